#pragma once

// Multi-resolution surface patches: geodesic farthest point sampling, Voronoi
// assignment of vertices to sampled centers, patch adjacency, and the
// unpool/max-pool operators that move per-patch rows between levels.
//
// Level 0 is always the vertex level (one singleton patch per vertex); level
// L is the coarsest. Centers of coarser levels are prefixes of one FPS run,
// so coarse center sets nest inside finer ones.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "patchmatch/geodesic.hpp"
#include "patchmatch/trimesh.hpp"

namespace patchmatch {

struct HierarchyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline int fps_start_vertex(std::uint64_t seed, int num_vertices) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, num_vertices - 1);
  return pick(rng);
}

// Greedy FPS: repeatedly add the vertex farthest from the selected set
// (argmax ties broken by lowest vertex index). Returns the full ordered
// sample list of length max(targets); each target count is a prefix of it.
inline std::vector<int> fps_sample(const TriMesh& mesh, const EdgeGraph& graph,
                                   const std::vector<int>& targets, std::uint64_t seed) {
  if (targets.empty()) throw HierarchyError("fps_sample: no targets");
  for (size_t i = 1; i < targets.size(); ++i)
    if (targets[i] <= targets[i - 1])
      throw HierarchyError("fps_sample: targets must be strictly ascending");
  const int nv = mesh.num_vertices();
  const int want = targets.back();
  if (want < 1 || want > nv)
    throw HierarchyError("fps_sample: target " + std::to_string(want) +
                         " exceeds vertex count " + std::to_string(nv));

  std::vector<int> samples;
  samples.reserve(want);
  const int start = fps_start_vertex(seed, nv);
  samples.push_back(start);
  std::vector<double> cover = single_source(graph, start).dist;
  while (static_cast<int>(samples.size()) < want) {
    int best = 0;
    for (int v = 1; v < nv; ++v)
      if (cover[v] > cover[best]) best = v;
    samples.push_back(best);
    const DistanceMap dm = single_source(graph, best);
    for (int v = 0; v < nv; ++v) cover[v] = std::min(cover[v], dm.dist[v]);
  }
  return samples;
}

inline std::vector<int> fps_sample(const TriMesh& mesh, const std::vector<int>& targets,
                                   std::uint64_t seed) {
  return fps_sample(mesh, EdgeGraph(mesh), targets, seed);
}

struct PatchHierarchy {
  int num_vertices = 0;
  // level_sizes[0] = |V|, strictly decreasing.
  std::vector<int> level_sizes;
  // assignment[l][v] = patch id of vertex v at level l; assignment[0][v] = v.
  std::vector<std::vector<int>> assignment;
  // centers[l] = center vertex indices (level 0: 0..|V|-1).
  std::vector<std::vector<int>> centers;
  // adjacency[l][i] = sorted neighbor patch ids (symmetric, irreflexive).
  std::vector<std::vector<std::vector<int>>> adjacency;
  // patch_radius[l][i] = mean geodesic distance of P_i's vertices to its center.
  std::vector<std::vector<double>> patch_radius;

  // Distance maps from the centers of level 1 (the finest sampled level).
  // Coarser centers are prefixes of the same FPS run, so row i serves patch i
  // at every level l >= 1. Row layout: center_dist[i][v].
  std::vector<std::vector<double>> center_dist;

  int num_levels() const { return static_cast<int>(level_sizes.size()); }
  int coarsest_level() const { return num_levels() - 1; }

  Eigen::MatrixXd center_positions(const TriMesh& mesh, int level) const {
    const auto& c = centers[level];
    Eigen::MatrixXd out(static_cast<Eigen::Index>(c.size()), 3);
    for (size_t i = 0; i < c.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = mesh.vertices[c[i]].transpose();
    return out;
  }
};

inline PatchHierarchy build_hierarchy(const TriMesh& mesh, const EdgeGraph& graph,
                                      const std::vector<int>& patch_counts,
                                      std::uint64_t seed) {
  const int nv = mesh.num_vertices();
  if (patch_counts.empty()) throw HierarchyError("build_hierarchy: no patch counts");
  for (size_t i = 0; i < patch_counts.size(); ++i) {
    if (patch_counts[i] < 1 || patch_counts[i] > nv)
      throw HierarchyError("build_hierarchy: patch count " + std::to_string(patch_counts[i]) +
                           " must be in [1, |V|] with |V| = " + std::to_string(nv));
    if (i > 0 && patch_counts[i] >= patch_counts[i - 1])
      throw HierarchyError("build_hierarchy: patch counts must be strictly descending");
  }

  // patch_counts is finest-to-coarsest ([800, 200, 50]); FPS targets ascend.
  std::vector<int> targets(patch_counts.rbegin(), patch_counts.rend());
  const std::vector<int> samples = fps_sample(mesh, graph, targets, seed);

  PatchHierarchy h;
  h.num_vertices = nv;
  const int L = static_cast<int>(patch_counts.size());
  h.level_sizes.resize(L + 1);
  h.level_sizes[0] = nv;
  for (int l = 1; l <= L; ++l) h.level_sizes[l] = patch_counts[l - 1];

  h.center_dist.resize(samples.size());
  for (size_t i = 0; i < samples.size(); ++i)
    h.center_dist[i] = single_source(graph, samples[i]).dist;

  h.assignment.resize(L + 1);
  h.centers.resize(L + 1);
  h.adjacency.resize(L + 1);
  h.patch_radius.resize(L + 1);

  // Level 0: singleton patches.
  h.assignment[0].resize(nv);
  h.centers[0].resize(nv);
  for (int v = 0; v < nv; ++v) {
    h.assignment[0][v] = v;
    h.centers[0][v] = v;
  }
  h.patch_radius[0].assign(nv, 0.0);
  h.adjacency[0].resize(nv);
  for (int v = 0; v < nv; ++v)
    for (int e = graph.offset[v]; e < graph.offset[v + 1]; ++e)
      h.adjacency[0][v].push_back(graph.neighbor[e]);
  for (auto& a : h.adjacency[0]) std::sort(a.begin(), a.end());

  for (int l = 1; l <= L; ++l) {
    const int n = h.level_sizes[l];
    h.centers[l].assign(samples.begin(), samples.begin() + n);
    auto& assign = h.assignment[l];
    assign.assign(nv, 0);
    for (int v = 0; v < nv; ++v) {
      int best = 0;
      double bd = h.center_dist[0][v];
      for (int i = 1; i < n; ++i) {
        const double d = h.center_dist[i][v];
        if (d < bd) {  // ties keep the lowest center index
          bd = d;
          best = i;
        }
      }
      assign[v] = best;
    }

    std::vector<int> count(n, 0);
    std::vector<double> radius(n, 0.0);
    for (int v = 0; v < nv; ++v) {
      ++count[assign[v]];
      radius[assign[v]] += h.center_dist[assign[v]][v];
    }
    for (int i = 0; i < n; ++i) {
      if (count[i] == 0)
        throw HierarchyError("build_hierarchy: empty patch " + std::to_string(i) +
                             " at level " + std::to_string(l));
      radius[i] /= count[i];
    }
    h.patch_radius[l] = std::move(radius);

    // Patches are adjacent iff a mesh edge crosses their boundary.
    std::vector<std::set<int>> nbr(n);
    for (int v = 0; v < nv; ++v)
      for (int e = graph.offset[v]; e < graph.offset[v + 1]; ++e) {
        const int u = graph.neighbor[e];
        if (assign[v] != assign[u]) nbr[assign[v]].insert(assign[u]);
      }
    h.adjacency[l].resize(n);
    for (int i = 0; i < n; ++i) h.adjacency[l][i].assign(nbr[i].begin(), nbr[i].end());
  }
  return h;
}

inline PatchHierarchy build_hierarchy(const TriMesh& mesh, const std::vector<int>& patch_counts,
                                      std::uint64_t seed) {
  return build_hierarchy(mesh, EdgeGraph(mesh), patch_counts, seed);
}

inline Eigen::MatrixXd unpool_to_vertices(const PatchHierarchy& h, int level,
                                          const Eigen::MatrixXd& values) {
  if (values.rows() != h.level_sizes[level])
    throw HierarchyError("unpool_to_vertices: row count " + std::to_string(values.rows()) +
                         " does not match level size " + std::to_string(h.level_sizes[level]));
  Eigen::MatrixXd out(h.num_vertices, values.cols());
  for (int v = 0; v < h.num_vertices; ++v) out.row(v) = values.row(h.assignment[level][v]);
  return out;
}

inline Eigen::MatrixXd maxpool_to_level(const PatchHierarchy& h, int level,
                                        const Eigen::MatrixXd& rows) {
  if (rows.rows() != h.num_vertices)
    throw HierarchyError("maxpool_to_level: expected one row per vertex");
  const int n = h.level_sizes[level];
  Eigen::MatrixXd out(n, rows.cols());
  std::vector<char> init(n, 0);
  for (int v = 0; v < h.num_vertices; ++v) {
    const int p = h.assignment[level][v];
    if (!init[p]) {
      out.row(p) = rows.row(v);
      init[p] = 1;
    } else {
      out.row(p) = out.row(p).cwiseMax(rows.row(v));
    }
  }
  return out;
}

// Normative two-step move between arbitrary levels: broadcast to vertices,
// then max-pool to the target level.
inline Eigen::MatrixXd repool(const PatchHierarchy& h, int from_level, int to_level,
                              const Eigen::MatrixXd& values) {
  return maxpool_to_level(h, to_level, unpool_to_vertices(h, from_level, values));
}

inline nlohmann::json hierarchy_to_json(const PatchHierarchy& h) {
  nlohmann::json levels = nlohmann::json::array();
  for (int l = 0; l < h.num_levels(); ++l) {
    levels.push_back({{"level", l},
                      {"size", h.level_sizes[l]},
                      {"centers", h.centers[l]},
                      {"assignment", h.assignment[l]}});
  }
  return {{"num_vertices", h.num_vertices}, {"levels", levels}};
}

}  // namespace patchmatch
