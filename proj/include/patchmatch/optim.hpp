#pragma once

// Per-pair optimization: the full forward graph (features -> associations,
// deformation parameters -> deformed shapes -> criteria), reverse-mode
// gradients, global-norm clipping, and Adam with the staged learning-rate
// schedule. One job is single-threaded and deterministic under its seed.

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patchmatch/association.hpp"
#include "patchmatch/criteria.hpp"
#include "patchmatch/deformation.hpp"
#include "patchmatch/geodesic.hpp"
#include "patchmatch/hierarchy.hpp"
#include "patchmatch/tape.hpp"
#include "patchmatch/trimesh.hpp"

namespace patchmatch {

struct OptimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- Adam ------------------------------------------------------------------

struct AdamState {
  std::vector<Eigen::MatrixXd> first_moment;
  std::vector<Eigen::MatrixXd> second_moment;
  std::int64_t step = 0;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState like(const std::vector<Eigen::MatrixXd>& params, double clip_norm) {
    AdamState s;
    s.clip_norm = clip_norm;
    for (const auto& p : params) {
      s.first_moment.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
      s.second_moment.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    }
    return s;
  }
};

// Learning rate per 1-based epoch: 1e-3 for the first epoch, 5e-4 through
// epoch 10, 2.5e-4 afterwards.
inline double learning_rate(int epoch) {
  if (epoch <= 1) return 1e-3;
  if (epoch <= 10) return 5e-4;
  return 2.5e-4;
}

// Scales the whole gradient list so its global norm is at most clip_norm.
inline void clip_gradients(std::vector<Eigen::MatrixXd>& grads, double clip_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > clip_norm && norm > 0.0) {
    const double s = clip_norm / norm;
    for (auto& g : grads) g *= s;
  }
}

inline void adam_step(AdamState& state, std::vector<Eigen::MatrixXd>& params,
                      std::vector<Eigen::MatrixXd> grads, double lr) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw OptimError("adam_step: parameter/gradient count mismatch");
  for (const auto& g : grads)
    if (!g.allFinite()) throw OptimError("adam_step: nonfinite gradient");
  clip_gradients(grads, state.clip_norm);
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[k];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[k].cwiseProduct(grads[k]);
    params[k] -= lr * (m / c1).cwiseQuotient(((v / c2).cwiseSqrt().array() + state.epsilon).matrix());
  }
}

// ---- Pair optimization -----------------------------------------------------

struct MatchConfig {
  std::vector<int> patch_counts = {800, 200, 50};  // finest to coarsest
  std::vector<int> feature_dims;                   // per level; empty = 32 everywhere
  double tau = 1e-2;
  LossWeights weights;  // empty levels = defaults for the level count
  double sigma_scale = 1.0;
  int smoothing_steps = 1;
  int epochs = 50;
  int steps_per_epoch = 4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  Normalization normalization = Normalization::sqrt_area;
  bool geometric_seeding = true;
  int warmup_epochs = 0;  // coarse-to-fine schedule when > 0; joint otherwise

  // Optional on-disk cache for the per-level center distance matrices; not
  // part of the run configuration proper (never serialized or hashed).
  std::string cache_dir;
  std::string cache_key_x, cache_key_y;

  int num_levels() const { return static_cast<int>(patch_counts.size()) + 1; }

  std::vector<int> effective_dims() const {
    std::vector<int> d = feature_dims;
    if (d.empty()) d.assign(num_levels(), 32);
    if (static_cast<int>(d.size()) != num_levels())
      throw OptimError("feature_dims must have one entry per hierarchy level");
    if (geometric_seeding) d[0] = 6;
    return d;
  }

  LossWeights effective_weights() const {
    LossWeights w = weights;
    if (w.levels.empty()) w = LossWeights::defaults(num_levels());
    if (static_cast<int>(w.levels.size()) != num_levels())
      throw OptimError("loss weights must have one entry per hierarchy level");
    w.validate();
    return w;
  }
};

// Everything precomputable for one shape before optimization starts.
struct ShapeContext {
  const TriMesh* mesh = nullptr;
  PatchHierarchy hierarchy;
  std::vector<std::shared_ptr<const Eigen::MatrixXd>> center_distances;  // per level, null if unused
  std::vector<BlendWeights> blend;
  std::vector<std::shared_ptr<const BlendContext>> blend_ctx;
  std::vector<std::shared_ptr<const RigidityContext>> rigidity_ctx;
  std::vector<std::shared_ptr<const Eigen::SparseMatrix<double>>> smoothers;
  std::vector<Eigen::MatrixXd> center_positions;  // per level, n_l x 3
};

inline ShapeContext build_shape_context(const TriMesh& mesh, const MatchConfig& cfg,
                                        const std::string& cache_key = "") {
  ShapeContext s;
  s.mesh = &mesh;
  const EdgeGraph graph(mesh);
  s.hierarchy = build_hierarchy(mesh, graph, cfg.patch_counts, cfg.seed);
  const LossWeights w = cfg.effective_weights();
  const int levels = cfg.num_levels();
  const double norm = normalization_factor(mesh, cfg.normalization);
  const bool use_cache = !cfg.cache_dir.empty() && !cache_key.empty();

  s.center_distances.resize(levels);
  for (int l = 1; l < levels; ++l) {
    if (w.levels[l].geodesic == 0.0) continue;
    const int n = s.hierarchy.level_sizes[l];
    const auto& centers = s.hierarchy.centers[l];
    const std::string cache_path =
        cfg.cache_dir + "/" + cache_key + ".L" + std::to_string(l) + ".pmdm";
    if (use_cache) {
      try {
        const DistanceMatrix dm = load_distance_matrix(
            cache_path, static_cast<std::uint64_t>(mesh.num_vertices()), centers, centers);
        if (dm.normalization == cfg.normalization) {
          s.center_distances[l] = std::make_shared<Eigen::MatrixXd>(dm.values);
          continue;
        }
      } catch (const GeodesicError&) {
        // Missing or stale entry: recompute and overwrite below.
      }
    }
    auto d = std::make_shared<Eigen::MatrixXd>(n, n);
    d->setZero();
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const double v = s.hierarchy.center_dist[i][centers[j]] / norm;
        (*d)(i, j) = v;
        (*d)(j, i) = v;
      }
    s.center_distances[l] = d;
    if (use_cache) {
      DistanceMatrix dm;
      dm.row_points = centers;
      dm.col_points = centers;
      dm.values = *d;
      dm.normalization = cfg.normalization;
      store_distance_matrix(dm, static_cast<std::uint64_t>(mesh.num_vertices()), cache_path);
    }
  }

  for (int l = 0; l < levels; ++l) {
    s.blend.push_back(blend_weights(s.hierarchy, l, cfg.sigma_scale));
    s.blend_ctx.push_back(make_blend_context(mesh, s.hierarchy, l, s.blend[l]));
    s.rigidity_ctx.push_back(make_rigidity_context(mesh, s.hierarchy, l, s.blend[l]));
    s.center_positions.push_back(s.hierarchy.center_positions(mesh, l));
  }
  s.smoothers = build_smoothers(s.hierarchy);
  return s;
}

// Flat parameter list: features of X and Y per level, then rotation / center
// parameters of X and Y per level.
struct ParameterSet {
  int levels = 0;
  std::vector<Eigen::MatrixXd> values;

  int feat_x(int l) const { return l; }
  int feat_y(int l) const { return levels + l; }
  int rot_x(int l) const { return 2 * levels + l; }
  int ctr_x(int l) const { return 3 * levels + l; }
  int rot_y(int l) const { return 4 * levels + l; }
  int ctr_y(int l) const { return 5 * levels + l; }
};

inline ParameterSet init_parameters(const ShapeContext& x, const ShapeContext& y,
                                    const MatchConfig& cfg) {
  ParameterSet p;
  p.levels = cfg.num_levels();
  const auto dims = cfg.effective_dims();
  const TriMesh* geo_x = cfg.geometric_seeding ? x.mesh : nullptr;
  const TriMesh* geo_y = cfg.geometric_seeding ? y.mesh : nullptr;
  const FeatureField fx = init_features(x.hierarchy, dims, cfg.seed, geo_x);
  const FeatureField fy = init_features(y.hierarchy, dims, cfg.seed, geo_y);
  p.values.reserve(6 * p.levels);
  for (const auto& m : fx.levels) p.values.push_back(m);
  for (const auto& m : fy.levels) p.values.push_back(m);
  auto push_deform = [&](const ShapeContext& s) {
    for (int l = 0; l < p.levels; ++l)
      p.values.push_back(identity_params(*s.mesh, s.hierarchy, l).rot6);
    for (int l = 0; l < p.levels; ++l)
      p.values.push_back(identity_params(*s.mesh, s.hierarchy, l).centers);
  };
  push_deform(x);
  push_deform(y);
  return p;
}

struct ForwardResult {
  int loss = -1;
  LossReport report;
  std::vector<int> param_nodes;             // node id per ParameterSet index
  std::vector<int> pi_xy, pi_yx;            // per level
  std::vector<int> deformed_x, deformed_y;  // per level, V x 3 position nodes
};

inline ForwardResult forward_pass(Tape& t, const ShapeContext& x, const ShapeContext& y,
                                  const ParameterSet& params, const MatchConfig& cfg,
                                  const LossWeights& weights, bool with_grad) {
  const int levels = cfg.num_levels();
  std::vector<int> feat_x(levels), feat_y(levels);
  std::vector<int> rot_x(levels), ctr_x(levels), rot_y(levels), ctr_y(levels);
  ForwardResult out;
  out.param_nodes.assign(params.values.size(), -1);
  auto reg = [&](int idx) {
    const int node =
        with_grad ? t.parameter(params.values[idx]) : t.constant(params.values[idx]);
    out.param_nodes[idx] = node;
    return node;
  };
  for (int l = 0; l < levels; ++l) {
    feat_x[l] = reg(params.feat_x(l));
    feat_y[l] = reg(params.feat_y(l));
    rot_x[l] = reg(params.rot_x(l));
    ctr_x[l] = reg(params.ctr_x(l));
    rot_y[l] = reg(params.rot_y(l));
    ctr_y[l] = reg(params.ctr_y(l));
  }

  const auto comb_x = combine_features(t, x.hierarchy, feat_x, x.smoothers, cfg.smoothing_steps);
  const auto comb_y = combine_features(t, y.hierarchy, feat_y, y.smoothers, cfg.smoothing_steps);

  out.pi_xy.resize(levels);
  out.pi_yx.resize(levels);
  out.deformed_x.resize(levels);
  out.deformed_y.resize(levels);
  std::vector<LevelCriterionNodes> nodes(levels);

  for (int l = 0; l < levels; ++l) {
    const auto& w = weights.levels[l];
    const AssociationPair pi = associate(t, comb_x[l], comb_y[l], cfg.tau);
    out.pi_xy[l] = pi.forward;
    out.pi_yx[l] = pi.reverse;
    const int cx = t.constant(x.center_positions[l]);
    const int cy = t.constant(y.center_positions[l]);

    // Deformed shapes and centers.
    const int r9x = t.decode_rot6(rot_x[l]);
    const int r9y = t.decode_rot6(rot_y[l]);
    out.deformed_x[l] = t.blend_deform(r9x, ctr_x[l], x.blend_ctx[l]);
    out.deformed_y[l] = t.blend_deform(r9y, ctr_y[l], y.blend_ctx[l]);

    if (w.geodesic != 0.0)
      nodes[l].geodesic =
          geodesic_loss(t, pi.forward, pi.reverse, x.center_distances[l], y.center_distances[l]);
    if (w.cycle != 0.0) nodes[l].cycle = cycle_loss(t, pi.forward, pi.reverse, cx, cy);
    if (w.self_reconstruction != 0.0) {
      const int pxx = self_associate(t, comb_x[l], cfg.tau);
      const int pyy = self_associate(t, comb_y[l], cfg.tau);
      nodes[l].self_reconstruction = self_reconstruction_loss(t, pxx, cx, pyy, cy);
    }
    if (w.matching != 0.0) {
      const int dcx = t.gather_rows(out.deformed_x[l], x.hierarchy.centers[l]);
      const int dcy = t.gather_rows(out.deformed_y[l], y.hierarchy.centers[l]);
      nodes[l].matching = matching_loss(t, dcx, pi.forward, cy, dcy, pi.reverse, cx);
    }
    if (w.rigidity != 0.0) {
      const int rx = t.rigidity(r9x, ctr_x[l], x.rigidity_ctx[l]);
      const int ry = t.rigidity(r9y, ctr_y[l], y.rigidity_ctx[l]);
      nodes[l].rigidity = t.add(rx, ry);
    }
  }

  out.loss = total_loss(t, nodes, weights, &out.report);
  return out;
}

// Coarse-to-fine warm-up: during the first warmup_epochs epochs, levels finer
// than a linearly descending threshold have all their weights zeroed.
inline LossWeights warmup_weights(const LossWeights& base, const MatchConfig& cfg, int epoch) {
  if (cfg.warmup_epochs <= 0 || epoch > cfg.warmup_epochs) return base;
  const int L = cfg.num_levels() - 1;
  const int min_level = L - ((epoch - 1) * L) / cfg.warmup_epochs;
  LossWeights w = base;
  for (int l = 0; l < min_level; ++l) w.levels[l] = LevelWeights{0, 0, 0, 0, 0};
  return w;
}

struct MatchResult {
  std::vector<int> map_xy, map_yx;
  std::vector<Eigen::MatrixXd> pi_xy, pi_yx;              // per level, final
  std::vector<Eigen::MatrixXd> deformed_x, deformed_y;    // per level, V x 3
  std::vector<LossReport> history;                        // one record per step
  bool diverged = false;
  std::string divergence_message;
};

inline MatchResult match_pair(const TriMesh& mesh_x, const TriMesh& mesh_y,
                              const MatchConfig& cfg) {
  const ShapeContext sx = build_shape_context(mesh_x, cfg, cfg.cache_key_x);
  const ShapeContext sy = build_shape_context(mesh_y, cfg, cfg.cache_key_y);
  const LossWeights base_weights = cfg.effective_weights();
  ParameterSet params = init_parameters(sx, sy, cfg);
  AdamState adam = AdamState::like(params.values, cfg.clip_norm);

  MatchResult result;
  for (int epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
    const LossWeights w = warmup_weights(base_weights, cfg, epoch);
    const double lr = learning_rate(epoch);
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      try {
        Tape t;
        const ForwardResult f = forward_pass(t, sx, sy, params, cfg, w, true);
        result.history.push_back(f.report);
        t.backward(f.loss);
        std::vector<Eigen::MatrixXd> grads;
        grads.reserve(params.values.size());
        for (size_t k = 0; k < params.values.size(); ++k)
          grads.push_back(t.gradient(f.param_nodes[k]));
        adam_step(adam, params.values, std::move(grads), lr);
      } catch (const std::runtime_error& e) {
        result.diverged = true;
        result.divergence_message = e.what();
        break;
      }
    }
  }

  // Final evaluation pass (no gradients).
  Tape t;
  t.check_finite = false;
  const ForwardResult f = forward_pass(t, sx, sy, params, cfg, base_weights, false);
  const int levels = cfg.num_levels();
  for (int l = 0; l < levels; ++l) {
    result.pi_xy.push_back(t.value(f.pi_xy[l]));
    result.pi_yx.push_back(t.value(f.pi_yx[l]));
    result.deformed_x.push_back(t.value(f.deformed_x[l]));
    result.deformed_y.push_back(t.value(f.deformed_y[l]));
  }
  result.map_xy = extract_point_map(result.pi_xy[0]);
  result.map_yx = extract_point_map(result.pi_yx[0]);
  return result;
}

}  // namespace patchmatch
