#pragma once

// Graph geodesics on the mesh edge graph: single-source Dijkstra maps,
// center-restricted distance matrices with the normalizations used by the
// losses and metrics, a sampled geodesic diameter, and a binary disk cache.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patchmatch/trimesh.hpp"

namespace patchmatch {

struct GeodesicError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// CSR adjacency with Euclidean edge weights; build once, query many times.
struct EdgeGraph {
  std::vector<int> offset;
  std::vector<int> neighbor;
  std::vector<double> weight;

  EdgeGraph() = default;
  explicit EdgeGraph(const TriMesh& m) {
    const int nv = m.num_vertices();
    std::vector<std::vector<std::pair<int, double>>> adj(nv);
    std::set<std::pair<int, int>> seen;
    for (const auto& f : m.faces) {
      for (int k = 0; k < 3; ++k) {
        int a = f[k], b = f[(k + 1) % 3];
        int lo = std::min(a, b), hi = std::max(a, b);
        if (!seen.insert({lo, hi}).second) continue;
        const double w = (m.vertices[a] - m.vertices[b]).norm();
        adj[lo].push_back({hi, w});
        adj[hi].push_back({lo, w});
      }
    }
    offset.resize(nv + 1, 0);
    for (int v = 0; v < nv; ++v) offset[v + 1] = offset[v] + static_cast<int>(adj[v].size());
    neighbor.resize(offset[nv]);
    weight.resize(offset[nv]);
    for (int v = 0; v < nv; ++v) {
      int o = offset[v];
      for (const auto& [u, w] : adj[v]) {
        neighbor[o] = u;
        weight[o] = w;
        ++o;
      }
    }
  }

  int num_vertices() const { return static_cast<int>(offset.size()) - 1; }
};

struct DistanceMap {
  int source = -1;
  std::vector<double> dist;
};

inline DistanceMap single_source(const EdgeGraph& g, int source) {
  const int nv = g.num_vertices();
  if (source < 0 || source >= nv)
    throw GeodesicError("single_source: source " + std::to_string(source) + " out of range");
  DistanceMap out;
  out.source = source;
  out.dist.assign(nv, std::numeric_limits<double>::infinity());
  out.dist[source] = 0.0;
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
  heap.push({0.0, source});
  std::vector<char> done(nv, 0);
  while (!heap.empty()) {
    auto [d, v] = heap.top();
    heap.pop();
    if (done[v]) continue;
    done[v] = 1;
    for (int e = g.offset[v]; e < g.offset[v + 1]; ++e) {
      const int u = g.neighbor[e];
      const double nd = d + g.weight[e];
      if (nd < out.dist[u]) {
        out.dist[u] = nd;
        heap.push({nd, u});
      }
    }
  }
  for (int v = 0; v < nv; ++v)
    if (!std::isfinite(out.dist[v]))
      throw GeodesicError("single_source: vertex " + std::to_string(v) +
                          " unreachable from source " + std::to_string(source));
  return out;
}

inline DistanceMap single_source(const TriMesh& m, int source) {
  return single_source(EdgeGraph(m), source);
}

enum class Normalization { sqrt_area, geodesic_diameter, none };

inline std::string normalization_name(Normalization n) {
  switch (n) {
    case Normalization::sqrt_area: return "sqrt_area";
    case Normalization::geodesic_diameter: return "geodesic_diameter";
    case Normalization::none: return "none";
  }
  return "none";
}

inline Normalization normalization_from_name(const std::string& s) {
  if (s == "sqrt_area") return Normalization::sqrt_area;
  if (s == "geodesic_diameter" || s == "diameter") return Normalization::geodesic_diameter;
  if (s == "none") return Normalization::none;
  throw GeodesicError("unknown normalization '" + s + "'");
}

// Greedy farthest-point selection of `samples` sources (start fixed at vertex
// 0); returns the largest distance seen from any of them. A lower bound on the
// graph diameter, exact at samples = |V|.
inline double geodesic_diameter(const EdgeGraph& g, int samples) {
  if (samples < 1) throw GeodesicError("geodesic_diameter: samples must be >= 1");
  const int nv = g.num_vertices();
  samples = std::min(samples, nv);
  std::vector<double> cover(nv, std::numeric_limits<double>::infinity());
  double diam = 0.0;
  int next = 0;
  for (int s = 0; s < samples; ++s) {
    const DistanceMap dm = single_source(g, next);
    for (int v = 0; v < nv; ++v) {
      diam = std::max(diam, dm.dist[v]);
      cover[v] = std::min(cover[v], dm.dist[v]);
    }
    next = 0;
    for (int v = 1; v < nv; ++v)
      if (cover[v] > cover[next]) next = v;
  }
  return diam;
}

inline double geodesic_diameter(const TriMesh& m, int samples = 32) {
  return geodesic_diameter(EdgeGraph(m), samples);
}

inline double normalization_factor(const TriMesh& m, Normalization n,
                                   int diameter_samples = 32) {
  switch (n) {
    case Normalization::sqrt_area: return std::sqrt(m.surface_area);
    case Normalization::geodesic_diameter: return geodesic_diameter(m, diameter_samples);
    case Normalization::none: return 1.0;
  }
  return 1.0;
}

struct DistanceMatrix {
  std::vector<int> row_points;
  std::vector<int> col_points;
  Eigen::MatrixXd values;
  Normalization normalization = Normalization::none;
};

inline DistanceMatrix center_matrix(const TriMesh& m, const EdgeGraph& g,
                                    const std::vector<int>& centers, Normalization norm) {
  if (centers.empty()) throw GeodesicError("center_matrix: empty center list");
  const int n = static_cast<int>(centers.size());
  for (int c : centers)
    if (c < 0 || c >= g.num_vertices())
      throw GeodesicError("center_matrix: center " + std::to_string(c) + " out of range");
  const double f = normalization_factor(m, norm);
  DistanceMatrix out;
  out.row_points = centers;
  out.col_points = centers;
  out.normalization = norm;
  out.values.setZero(n, n);
  for (int i = 0; i < n; ++i) {
    const DistanceMap dm = single_source(g, centers[i]);
    for (int j = i + 1; j < n; ++j) {
      const double d = dm.dist[centers[j]] / f;
      out.values(i, j) = d;
      out.values(j, i) = d;  // mirrored, keeps the matrix exactly symmetric
    }
  }
  return out;
}

inline DistanceMatrix center_matrix(const TriMesh& m, const std::vector<int>& centers,
                                    Normalization norm) {
  return center_matrix(m, EdgeGraph(m), centers, norm);
}

// ---- Binary cache ----------------------------------------------------------
// Layout (little-endian): magic "PMDM", version u32, vertex count u64,
// FNV-1a hash of row then col indices u64, normalization tag u8,
// row count u64, col count u64, values f64 row-major.

namespace detail {

inline std::uint64_t fnv1a(const void* data, size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t center_hash(const std::vector<int>& rows, const std::vector<int>& cols) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (int v : rows) {
    const std::uint64_t u = static_cast<std::uint64_t>(v);
    h = fnv1a(&u, 8, h);
  }
  for (int v : cols) {
    const std::uint64_t u = static_cast<std::uint64_t>(v);
    h = fnv1a(&u, 8, h);
  }
  return h;
}

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void store_distance_matrix(const DistanceMatrix& dm, std::uint64_t mesh_vertex_count,
                                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw GeodesicError(path + ": cannot open cache file for writing");
  out.write("PMDM", 4);
  detail::write_le<std::uint32_t>(out, 1);
  detail::write_le<std::uint64_t>(out, mesh_vertex_count);
  detail::write_le<std::uint64_t>(out, detail::center_hash(dm.row_points, dm.col_points));
  detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(dm.normalization));
  detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(dm.values.rows()));
  detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(dm.values.cols()));
  for (Eigen::Index i = 0; i < dm.values.rows(); ++i)
    for (Eigen::Index j = 0; j < dm.values.cols(); ++j)
      detail::write_le<double>(out, dm.values(i, j));
  if (!out) throw GeodesicError(path + ": cache write failed");
}

inline DistanceMatrix load_distance_matrix(const std::string& path,
                                           std::uint64_t mesh_vertex_count,
                                           const std::vector<int>& rows,
                                           const std::vector<int>& cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw GeodesicError(path + ": cache file not found");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "PMDM", 4) != 0)
    throw GeodesicError(path + ": not a PMDM cache file");
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != 1) throw GeodesicError(path + ": unsupported cache version");
  const auto vcount = detail::read_le<std::uint64_t>(in);
  const auto hash = detail::read_le<std::uint64_t>(in);
  const auto tag = detail::read_le<std::uint8_t>(in);
  const auto nr = detail::read_le<std::uint64_t>(in);
  const auto nc = detail::read_le<std::uint64_t>(in);
  if (!in) throw GeodesicError(path + ": truncated cache header");
  if (vcount != mesh_vertex_count)
    throw GeodesicError(path + ": cache was built for a mesh with " + std::to_string(vcount) +
                        " vertices, current mesh has " + std::to_string(mesh_vertex_count));
  if (hash != detail::center_hash(rows, cols))
    throw GeodesicError(path + ": cache center hash mismatch; refusing to load");
  if (nr != rows.size() || nc != cols.size())
    throw GeodesicError(path + ": cache dimensions mismatch");
  DistanceMatrix dm;
  dm.row_points = rows;
  dm.col_points = cols;
  dm.normalization = static_cast<Normalization>(tag);
  dm.values.resize(static_cast<Eigen::Index>(nr), static_cast<Eigen::Index>(nc));
  for (Eigen::Index i = 0; i < dm.values.rows(); ++i)
    for (Eigen::Index j = 0; j < dm.values.cols(); ++j)
      dm.values(i, j) = detail::read_le<double>(in);
  if (!in) throw GeodesicError(path + ": truncated cache data");
  return dm;
}

}  // namespace patchmatch
