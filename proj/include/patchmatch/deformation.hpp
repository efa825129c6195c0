#pragma once

// Patch-wise near-rigid deformation model: 6D rotation parameters and new
// center positions per patch, Gaussian geodesic blending with 3-sigma support
// truncation, and the pairwise rigidity energy between adjacent patches.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "patchmatch/hierarchy.hpp"
#include "patchmatch/tape.hpp"
#include "patchmatch/trimesh.hpp"

namespace patchmatch {

struct DeformationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Eigen::Matrix3d decode_rotation(const Eigen::Matrix<double, 6, 1>& rot6) {
  Tape t;
  t.check_finite = false;
  Eigen::MatrixXd row(1, 6);
  row << rot6.transpose();
  Eigen::MatrixXd r9;
  try {
    r9 = t.value(t.decode_rot6(t.constant(row)));
  } catch (const TapeError& e) {
    throw DeformationError(e.what());
  }
  Eigen::Matrix3d r;
  for (int i = 0; i < 3; ++i) r.row(i) = r9.block<1, 3>(0, 3 * i);
  return r;
}

// Normalized Gaussian blending weights of one level, sparse over the 3-sigma
// support (own patch always included). sigma_i = sigma_scale * patch radius;
// singleton patches (level 0) degenerate to an indicator on their own patch.
struct BlendWeights {
  int level = 0;
  std::vector<double> sigma;
  std::vector<int> row_offset;  // per vertex, into (patch, alpha)
  std::vector<int> patch;
  std::vector<double> alpha;

  double weight(int patch_id, int vertex) const {
    for (int e = row_offset[vertex]; e < row_offset[vertex + 1]; ++e)
      if (patch[e] == patch_id) return alpha[e];
    return 0.0;
  }
};

inline BlendWeights blend_weights(const PatchHierarchy& h, int level, double sigma_scale) {
  if (!(sigma_scale > 0.0)) throw DeformationError("blend_weights: sigma_scale must be positive");
  const int nv = h.num_vertices;
  const int n = h.level_sizes[level];
  BlendWeights w;
  w.level = level;
  w.sigma.resize(n);
  for (int i = 0; i < n; ++i) w.sigma[i] = sigma_scale * h.patch_radius[level][i];

  w.row_offset.assign(nv + 1, 0);
  if (level == 0) {
    // Singleton patches: alpha is the indicator of the owning patch.
    w.patch.resize(nv);
    w.alpha.assign(nv, 1.0);
    for (int v = 0; v < nv; ++v) {
      w.row_offset[v + 1] = v + 1;
      w.patch[v] = h.assignment[0][v];
    }
    return w;
  }

  std::vector<std::pair<int, double>> row;
  for (int v = 0; v < nv; ++v) {
    row.clear();
    const int own = h.assignment[level][v];
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = h.center_dist[i][v];
      const double s = w.sigma[i];
      const bool in_support = s > 0.0 && d <= 3.0 * s;
      if (!in_support && i != own) continue;
      const double g = s > 0.0 ? std::exp(-(d * d) / (2.0 * s * s)) : (d == 0.0 ? 1.0 : 0.0);
      const double gv = (i == own && g == 0.0) ? 1.0 : g;  // own patch keeps support
      row.push_back({i, gv});
      total += gv;
    }
    for (auto& [i, g] : row) {
      w.patch.push_back(i);
      w.alpha.push_back(g / total);
    }
    w.row_offset[v + 1] = static_cast<int>(w.patch.size());
  }
  return w;
}

// Per-level optimizable parameters: 6D rotation rows and new center positions.
struct DeformationParams {
  Eigen::MatrixXd rot6;     // n x 6
  Eigen::MatrixXd centers;  // n x 3 (u_i)
};

inline DeformationParams identity_params(const TriMesh& mesh, const PatchHierarchy& h,
                                         int level) {
  const int n = h.level_sizes[level];
  DeformationParams p;
  p.rot6.resize(n, 6);
  p.centers.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    p.rot6.row(i) << 1, 0, 0, 0, 1, 0;
    p.centers.row(i) = mesh.vertices[h.centers[level][i]].transpose();
  }
  return p;
}

inline std::shared_ptr<const BlendContext> make_blend_context(const TriMesh& mesh,
                                                              const PatchHierarchy& h, int level,
                                                              const BlendWeights& w) {
  auto ctx = std::make_shared<BlendContext>();
  ctx->rest_positions = mesh.positions_matrix();
  ctx->center_positions = h.center_positions(mesh, level);
  ctx->row_offset = w.row_offset;
  ctx->patch = w.patch;
  ctx->alpha = w.alpha;
  return ctx;
}

// One term per (ordered neighbor pair, vertex of the pair's patch union),
// following the printed double visit of each unordered pair.
inline std::shared_ptr<const RigidityContext> make_rigidity_context(const TriMesh& mesh,
                                                                    const PatchHierarchy& h,
                                                                    int level,
                                                                    const BlendWeights& w) {
  auto ctx = std::make_shared<RigidityContext>();
  ctx->rest_positions = mesh.positions_matrix();
  ctx->center_positions = h.center_positions(mesh, level);
  const int n = h.level_sizes[level];
  std::vector<std::vector<int>> members(n);
  for (int v = 0; v < h.num_vertices; ++v) members[h.assignment[level][v]].push_back(v);
  for (int i = 0; i < n; ++i) {
    for (int j : h.adjacency[level][i]) {
      for (int v : members[i])
        ctx->terms.push_back({i, j, v, w.weight(i, v) + w.weight(j, v)});
      for (int v : members[j])
        ctx->terms.push_back({i, j, v, w.weight(i, v) + w.weight(j, v)});
    }
  }
  return ctx;
}

struct DeformedLevel {
  Eigen::MatrixXd positions;         // V x 3
  Eigen::MatrixXd deformed_centers;  // n x 3, blended positions at center vertices
};

inline DeformedLevel deform(const TriMesh& mesh, const PatchHierarchy& h, int level,
                            const DeformationParams& params, const BlendWeights& weights) {
  Tape t;
  t.check_finite = false;
  const auto ctx = make_blend_context(mesh, h, level, weights);
  int r9;
  try {
    r9 = t.decode_rot6(t.constant(params.rot6));
  } catch (const TapeError& e) {
    throw DeformationError(e.what());
  }
  const int pos = t.blend_deform(r9, t.constant(params.centers), ctx);
  DeformedLevel out;
  out.positions = t.value(pos);
  out.deformed_centers = t.value(t.gather_rows(pos, h.centers[level]));
  return out;
}

inline double rigidity_energy(const TriMesh& mesh, const PatchHierarchy& h, int level,
                              const DeformationParams& params, const BlendWeights& weights) {
  Tape t;
  t.check_finite = false;
  const auto ctx = make_rigidity_context(mesh, h, level, weights);
  int r9;
  try {
    r9 = t.decode_rot6(t.constant(params.rot6));
  } catch (const TapeError& e) {
    throw DeformationError(e.what());
  }
  return t.value(t.rigidity(r9, t.constant(params.centers), ctx))(0, 0);
}

}  // namespace patchmatch
