#pragma once

// Optimizable per-patch feature fields, coarse-to-fine combined features, and
// the soft association matrices (cross and self) they induce. Everything here
// builds on the tape so feature gradients are available to the optimizer; the
// plain-matrix overloads evaluate through a throwaway tape.

#include <cmath>
#include <fstream>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "patchmatch/hierarchy.hpp"
#include "patchmatch/tape.hpp"
#include "patchmatch/trimesh.hpp"

namespace patchmatch {

struct AssociationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FeatureField {
  // levels[l] is n_l x d_l.
  std::vector<Eigen::MatrixXd> levels;
};

namespace detail {

// Deterministic uniform double in [0, 1) from the raw engine stream; avoids
// std::uniform_real_distribution so values are stable across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

// Rows are i.i.d. uniform in [-0.1, 0.1]; all-zero rows are re-drawn so cosine
// similarity is always defined. With geometric seeding the level-0 field is
// replaced by [position | normal] scaled to unit RMS (its width becomes 6).
inline FeatureField init_features(const PatchHierarchy& h, std::vector<int> dims,
                                  std::uint64_t seed, const TriMesh* geometric_seed_mesh = nullptr) {
  if (static_cast<int>(dims.size()) != h.num_levels())
    throw AssociationError("init_features: one dimension per level expected");
  for (int d : dims)
    if (d < 1) throw AssociationError("init_features: dimensions must be positive");
  std::mt19937_64 rng(seed);
  FeatureField f;
  f.levels.resize(h.num_levels());
  for (int l = 0; l < h.num_levels(); ++l) {
    Eigen::MatrixXd m(h.level_sizes[l], dims[l]);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      do {
        for (Eigen::Index c = 0; c < m.cols(); ++c)
          m(r, c) = 0.2 * detail::uniform01(rng) - 0.1;
      } while (m.row(r).norm() == 0.0);
    }
    f.levels[l] = std::move(m);
  }
  if (geometric_seed_mesh) {
    const TriMesh& mesh = *geometric_seed_mesh;
    if (mesh.num_vertices() != h.num_vertices)
      throw AssociationError("init_features: mesh does not match hierarchy");
    Eigen::MatrixXd g(h.num_vertices, 6);
    for (int v = 0; v < h.num_vertices; ++v) {
      g.row(v).head<3>() = mesh.vertices[v].transpose();
      g.row(v).tail<3>() = mesh.vertex_normals[v].transpose();
    }
    const double rms = std::sqrt(g.squaredNorm() / static_cast<double>(g.size()));
    if (rms > 0.0) g /= rms;
    f.levels[0] = std::move(g);
  }
  return f;
}

// Neighbor-averaging smoothers, one per level: row <- 1/2 row + 1/2 mean of
// adjacent rows (identity where a patch has no neighbors).
inline std::vector<std::shared_ptr<const Eigen::SparseMatrix<double>>> build_smoothers(
    const PatchHierarchy& h) {
  std::vector<std::shared_ptr<const Eigen::SparseMatrix<double>>> out(h.num_levels());
  for (int l = 0; l < h.num_levels(); ++l) {
    const int n = h.level_sizes[l];
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < n; ++i) {
      const auto& nbr = h.adjacency[l][i];
      if (nbr.empty()) {
        trip.emplace_back(i, i, 1.0);
        continue;
      }
      trip.emplace_back(i, i, 0.5);
      const double w = 0.5 / static_cast<double>(nbr.size());
      for (int j : nbr) trip.emplace_back(i, j, w);
    }
    auto s = std::make_shared<Eigen::SparseMatrix<double>>(n, n);
    s->setFromTriplets(trip.begin(), trip.end());
    out[l] = s;
  }
  return out;
}

// Combined coarse-to-fine features on the tape. feature_nodes[l] holds the raw
// field of level l; the result at level l is [own | parents...] followed by
// `smoothing_steps` rounds of adjacency averaging (the top level passes
// through untouched).
inline std::vector<int> combine_features(
    Tape& t, const PatchHierarchy& h, const std::vector<int>& feature_nodes,
    const std::vector<std::shared_ptr<const Eigen::SparseMatrix<double>>>& smoothers,
    int smoothing_steps) {
  const int L = h.coarsest_level();
  if (static_cast<int>(feature_nodes.size()) != L + 1)
    throw AssociationError("combine_features: one feature node per level expected");
  std::vector<int> combined(L + 1);
  combined[L] = feature_nodes[L];
  for (int l = L - 1; l >= 0; --l) {
    // Repool the parent's combined block through the vertex level.
    int parent = t.gather_rows(combined[l + 1], h.assignment[l + 1]);
    parent = t.segment_max(parent, h.assignment[l], h.level_sizes[l]);
    int cat = t.concat_cols(feature_nodes[l], parent);
    for (int s = 0; s < smoothing_steps; ++s) cat = t.sparse_matmul(smoothers[l], cat);
    combined[l] = cat;
  }
  return combined;
}

inline std::vector<Eigen::MatrixXd> combine_features(const PatchHierarchy& h,
                                                     const FeatureField& field,
                                                     int smoothing_steps) {
  Tape t;
  t.check_finite = false;
  std::vector<int> nodes;
  for (const auto& m : field.levels) nodes.push_back(t.constant(m));
  const auto smoothers = build_smoothers(h);
  const auto combined = combine_features(t, h, nodes, smoothers, smoothing_steps);
  std::vector<Eigen::MatrixXd> out;
  for (int n : combined) out.push_back(t.value(n));
  return out;
}

// Cosine-similarity association. Both outputs come from one similarity matrix
// s: rows of the first softmax over s, rows of the second over s^T.
struct AssociationPair {
  int forward;  // Pi_{X->Y}
  int reverse;  // Pi_{Y->X}
  int similarity;
};

inline AssociationPair associate(Tape& t, int features_a, int features_b, double tau) {
  if (t.value(features_a).cols() != t.value(features_b).cols())
    throw AssociationError("associate: feature widths differ");
  const int s = t.matmul_nt(t.row_normalize(features_a), t.row_normalize(features_b));
  AssociationPair p;
  p.similarity = s;
  p.forward = t.row_softmax(s, tau);
  p.reverse = t.row_softmax(t.transpose(s), tau);
  return p;
}

inline int self_associate(Tape& t, int features, double tau) {
  const int n = t.row_normalize(features);
  return t.row_softmax(t.matmul_nt(n, n), tau);
}

inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> associate(const Eigen::MatrixXd& a,
                                                             const Eigen::MatrixXd& b,
                                                             double tau) {
  Tape t;
  t.check_finite = false;
  const AssociationPair p = associate(t, t.constant(a), t.constant(b), tau);
  return {t.value(p.forward), t.value(p.reverse)};
}

inline Eigen::MatrixXd self_associate(const Eigen::MatrixXd& a, double tau) {
  Tape t;
  t.check_finite = false;
  return t.value(self_associate(t, t.constant(a), tau));
}

// Row-wise argmax, ties to the lowest index.
inline std::vector<int> extract_point_map(const Eigen::MatrixXd& pi) {
  std::vector<int> map(static_cast<size_t>(pi.rows()));
  for (Eigen::Index r = 0; r < pi.rows(); ++r) {
    int best = 0;
    for (Eigen::Index c = 1; c < pi.cols(); ++c)
      if (pi(r, c) > pi(r, best)) best = static_cast<int>(c);
    map[static_cast<size_t>(r)] = best;
  }
  return map;
}

inline void save_point_map(const std::vector<int>& map, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw AssociationError(path + ": cannot open file for writing");
  for (int v : map) out << v << "\n";
  if (!out) throw AssociationError(path + ": write failed");
}

inline std::vector<int> load_point_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw AssociationError(path + ": cannot open file");
  std::vector<int> map;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    try {
      map.push_back(std::stoi(line));
    } catch (...) {
      throw AssociationError(path + ":" + std::to_string(lineno) + ": bad index '" + line + "'");
    }
  }
  if (map.empty()) throw AssociationError(path + ": empty point map");
  return map;
}

}  // namespace patchmatch
