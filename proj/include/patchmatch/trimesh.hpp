#pragma once

// Triangle mesh container with OBJ/OFF/PLY I/O and the derived quantities
// (normals, area, edge statistics) the matching pipeline relies on.
// Meshes are immutable after construction and safe to share across threads.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace patchmatch {

using Vec3 = Eigen::Vector3d;
using Color = std::array<std::uint8_t, 3>;

enum class MeshFormat { obj, off, ply };

struct MeshError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;

  // Derived at construction.
  std::vector<Vec3> vertex_normals;
  double surface_area = 0.0;
  double mean_edge_length = 0.0;
  // Vertices whose incident faces all have zero area; their normal is the
  // arbitrary fixed fallback (0,0,1).
  std::vector<char> degenerate_normal;
  std::vector<std::string> warnings;

  // Optional per-vertex colors, populated when loading a PLY that carries them.
  std::vector<Color> colors;

  int num_vertices() const { return static_cast<int>(vertices.size()); }
  int num_faces() const { return static_cast<int>(faces.size()); }

  Eigen::MatrixXd positions_matrix() const {
    Eigen::MatrixXd p(num_vertices(), 3);
    for (int v = 0; v < num_vertices(); ++v) p.row(v) = vertices[v].transpose();
    return p;
  }
};

namespace detail {

inline void compute_derived(TriMesh& m, const std::string& context) {
  const int nv = m.num_vertices();
  if (nv == 0) throw MeshError(context + ": mesh has no vertices");
  if (m.faces.empty()) throw MeshError(context + ": mesh has no faces");

  for (size_t f = 0; f < m.faces.size(); ++f) {
    const auto& t = m.faces[f];
    for (int k = 0; k < 3; ++k) {
      if (t[k] < 0 || t[k] >= nv)
        throw MeshError(context + ": face " + std::to_string(f) +
                        " references vertex " + std::to_string(t[k]) +
                        " out of range [0, " + std::to_string(nv) + ")");
    }
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
      throw MeshError(context + ": face " + std::to_string(f) +
                      " is degenerate (repeated vertex index)");
  }

  // Undirected edge set, with per-edge face counts for the manifold warning.
  std::map<std::pair<int, int>, int> edge_count;
  for (const auto& t : m.faces) {
    for (int k = 0; k < 3; ++k) {
      int a = t[k], b = t[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      edge_count[{a, b}]++;
    }
  }
  int nonmanifold = 0;
  double edge_sum = 0.0;
  for (const auto& [e, c] : edge_count) {
    if (c > 2) ++nonmanifold;
    edge_sum += (m.vertices[e.first] - m.vertices[e.second]).norm();
  }
  if (nonmanifold > 0)
    m.warnings.push_back(context + ": " + std::to_string(nonmanifold) +
                         " non-manifold edge(s)");
  m.mean_edge_length = edge_sum / static_cast<double>(edge_count.size());
  if (!(m.mean_edge_length > 0.0))
    throw MeshError(context + ": mean edge length is not positive");

  // Connectivity over the edge graph.
  std::vector<std::vector<int>> adj(nv);
  for (const auto& [e, c] : edge_count) {
    adj[e.first].push_back(e.second);
    adj[e.second].push_back(e.first);
  }
  std::vector<char> seen(nv, 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  int reached = 1;
  while (!q.empty()) {
    int v = q.front();
    q.pop();
    for (int u : adj[v])
      if (!seen[u]) {
        seen[u] = 1;
        ++reached;
        q.push(u);
      }
  }
  if (reached != nv)
    throw MeshError(context + ": mesh is disconnected (" +
                    std::to_string(reached) + " of " + std::to_string(nv) +
                    " vertices reachable from vertex 0)");

  // Area-weighted face-normal averages.
  m.vertex_normals.assign(nv, Vec3::Zero());
  m.degenerate_normal.assign(nv, 0);
  m.surface_area = 0.0;
  for (const auto& t : m.faces) {
    const Vec3 e1 = m.vertices[t[1]] - m.vertices[t[0]];
    const Vec3 e2 = m.vertices[t[2]] - m.vertices[t[0]];
    const Vec3 an = 0.5 * e1.cross(e2);  // area-weighted normal
    m.surface_area += an.norm();
    for (int k = 0; k < 3; ++k) m.vertex_normals[t[k]] += an;
  }
  for (int v = 0; v < nv; ++v) {
    const double n = m.vertex_normals[v].norm();
    if (n < 1e-300) {
      m.vertex_normals[v] = Vec3(0, 0, 1);
      m.degenerate_normal[v] = 1;
    } else {
      m.vertex_normals[v] /= n;
    }
  }
}

inline std::string line_context(const std::string& path, size_t line) {
  return path + ":" + std::to_string(line);
}

inline TriMesh parse_obj(std::istream& in, const std::string& path) {
  TriMesh m;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ls >> p.x() >> p.y() >> p.z()))
        throw MeshError(line_context(path, lineno) + ": malformed vertex line");
      m.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        // "i", "i/j", "i/j/k", "i//k" all start with the vertex index.
        const size_t slash = tok.find('/');
        const std::string head = slash == std::string::npos ? tok : tok.substr(0, slash);
        int i = 0;
        try {
          i = std::stoi(head);
        } catch (...) {
          throw MeshError(line_context(path, lineno) + ": bad face index '" + tok + "'");
        }
        if (i < 0) i = static_cast<int>(m.vertices.size()) + i + 1;
        idx.push_back(i - 1);
      }
      if (idx.size() != 3)
        throw MeshError(line_context(path, lineno) +
                        ": only triangular faces are supported (got " +
                        std::to_string(idx.size()) + " indices)");
      m.faces.push_back({idx[0], idx[1], idx[2]});
    }
  }
  return m;
}

inline TriMesh parse_off(std::istream& in, const std::string& path) {
  auto next_data_line = [&](size_t& lineno) {
    std::string line;
    while (std::getline(in, line)) {
      ++lineno;
      const size_t h = line.find('#');
      if (h != std::string::npos) line = line.substr(0, h);
      if (line.find_first_not_of(" \t\r\n") != std::string::npos) return line;
    }
    throw MeshError(path + ": unexpected end of OFF file");
  };
  size_t lineno = 0;
  std::string header = next_data_line(lineno);
  {
    std::istringstream hs(header);
    std::string tag;
    hs >> tag;
    if (tag != "OFF")
      throw MeshError(line_context(path, lineno) + ": missing OFF header");
  }
  std::string counts = next_data_line(lineno);
  size_t nv = 0, nf = 0, ne = 0;
  {
    std::istringstream cs(counts);
    if (!(cs >> nv >> nf >> ne))
      throw MeshError(line_context(path, lineno) + ": malformed OFF counts");
  }
  TriMesh m;
  m.vertices.reserve(nv);
  for (size_t i = 0; i < nv; ++i) {
    std::istringstream vs(next_data_line(lineno));
    Vec3 p;
    if (!(vs >> p.x() >> p.y() >> p.z()))
      throw MeshError(line_context(path, lineno) + ": malformed OFF vertex");
    m.vertices.push_back(p);
  }
  for (size_t i = 0; i < nf; ++i) {
    std::istringstream fs(next_data_line(lineno));
    int n, a, b, c;
    if (!(fs >> n >> a >> b >> c) || n != 3)
      throw MeshError(line_context(path, lineno) +
                      ": only triangular OFF faces are supported");
    m.faces.push_back({a, b, c});
  }
  return m;
}

struct PlyProperty {
  std::string name;
  std::string type;       // scalar type, or count type for lists
  std::string list_type;  // element type when is_list
  bool is_list = false;
};

inline size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" ||
      t == "float32")
    return 4;
  if (t == "double" || t == "float64") return 8;
  throw MeshError("unknown PLY type '" + t + "'");
}

inline double ply_read_binary_scalar(std::istream& in, const std::string& t) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(ply_type_size(t)));
  if (!in) throw MeshError("unexpected end of binary PLY data");
  auto le = [&](int n) {
    std::uint64_t u = 0;
    for (int i = n - 1; i >= 0; --i) u = (u << 8) | buf[i];
    return u;
  };
  if (t == "char" || t == "int8") return static_cast<double>(static_cast<std::int8_t>(buf[0]));
  if (t == "uchar" || t == "uint8") return static_cast<double>(buf[0]);
  if (t == "short" || t == "int16") return static_cast<double>(static_cast<std::int16_t>(le(2)));
  if (t == "ushort" || t == "uint16") return static_cast<double>(static_cast<std::uint16_t>(le(2)));
  if (t == "int" || t == "int32") return static_cast<double>(static_cast<std::int32_t>(le(4)));
  if (t == "uint" || t == "uint32") return static_cast<double>(static_cast<std::uint32_t>(le(4)));
  if (t == "float" || t == "float32") {
    float f;
    std::uint32_t u = static_cast<std::uint32_t>(le(4));
    std::memcpy(&f, &u, 4);
    return static_cast<double>(f);
  }
  double d;
  std::uint64_t u = le(8);
  std::memcpy(&d, &u, 8);
  return d;
}

inline TriMesh parse_ply(std::istream& in, const std::string& path) {
  std::string line;
  size_t lineno = 0;
  if (!std::getline(in, line)) throw MeshError(path + ": empty file");
  ++lineno;
  if (line.rfind("ply", 0) != 0)
    throw MeshError(line_context(path, lineno) + ": missing 'ply' magic");

  bool binary = false;
  struct Element {
    std::string name;
    size_t count = 0;
    std::vector<PlyProperty> props;
  };
  std::vector<Element> elements;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "comment" || tag == "obj_info") continue;
    if (tag == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii")
        binary = false;
      else if (fmt == "binary_little_endian")
        binary = true;
      else
        throw MeshError(line_context(path, lineno) + ": unsupported PLY format '" + fmt + "'");
    } else if (tag == "element") {
      Element e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (tag == "property") {
      if (elements.empty())
        throw MeshError(line_context(path, lineno) + ": property before element");
      PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.is_list = true;
        ls >> p.type >> p.list_type >> p.name;
      } else {
        p.type = t;
        ls >> p.name;
      }
      elements.back().props.push_back(p);
    } else if (tag == "end_header") {
      break;
    } else {
      throw MeshError(line_context(path, lineno) + ": unexpected header line '" + line + "'");
    }
  }

  TriMesh m;
  bool has_colors = false;
  for (const auto& e : elements) {
    if (e.name == "vertex") {
      int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
      for (size_t p = 0; p < e.props.size(); ++p) {
        const auto& name = e.props[p].name;
        if (name == "x") ix = static_cast<int>(p);
        if (name == "y") iy = static_cast<int>(p);
        if (name == "z") iz = static_cast<int>(p);
        if (name == "red") ir = static_cast<int>(p);
        if (name == "green") ig = static_cast<int>(p);
        if (name == "blue") ib = static_cast<int>(p);
      }
      if (ix < 0 || iy < 0 || iz < 0)
        throw MeshError(path + ": PLY vertex element lacks x/y/z");
      has_colors = ir >= 0 && ig >= 0 && ib >= 0;
      std::vector<double> vals(e.props.size());
      for (size_t i = 0; i < e.count; ++i) {
        if (binary) {
          for (size_t p = 0; p < e.props.size(); ++p) {
            if (e.props[p].is_list)
              throw MeshError(path + ": list property on vertex element unsupported");
            vals[p] = ply_read_binary_scalar(in, e.props[p].type);
          }
        } else {
          if (!std::getline(in, line)) throw MeshError(path + ": truncated PLY vertex data");
          ++lineno;
          std::istringstream ls(line);
          for (size_t p = 0; p < e.props.size(); ++p)
            if (!(ls >> vals[p]))
              throw MeshError(line_context(path, lineno) + ": malformed PLY vertex");
        }
        m.vertices.emplace_back(vals[ix], vals[iy], vals[iz]);
        if (has_colors)
          m.colors.push_back({static_cast<std::uint8_t>(vals[ir]),
                              static_cast<std::uint8_t>(vals[ig]),
                              static_cast<std::uint8_t>(vals[ib])});
      }
    } else if (e.name == "face") {
      const PlyProperty* list = nullptr;
      for (const auto& p : e.props)
        if (p.is_list && (p.name == "vertex_indices" || p.name == "vertex_index")) list = &p;
      if (!list) throw MeshError(path + ": PLY face element lacks vertex_indices");
      for (size_t i = 0; i < e.count; ++i) {
        int n;
        std::vector<int> idx;
        if (binary) {
          n = static_cast<int>(ply_read_binary_scalar(in, list->type));
          for (int k = 0; k < n; ++k)
            idx.push_back(static_cast<int>(ply_read_binary_scalar(in, list->list_type)));
        } else {
          if (!std::getline(in, line)) throw MeshError(path + ": truncated PLY face data");
          ++lineno;
          std::istringstream ls(line);
          if (!(ls >> n)) throw MeshError(line_context(path, lineno) + ": malformed PLY face");
          for (int k = 0; k < n; ++k) {
            int v;
            if (!(ls >> v)) throw MeshError(line_context(path, lineno) + ": malformed PLY face");
            idx.push_back(v);
          }
        }
        if (n != 3)
          throw MeshError(path + ": only triangular PLY faces are supported");
        m.faces.push_back({idx[0], idx[1], idx[2]});
      }
    } else {
      // Skip unknown ascii elements line by line; refuse in binary mode.
      if (binary) throw MeshError(path + ": unknown binary PLY element '" + e.name + "'");
      for (size_t i = 0; i < e.count; ++i) std::getline(in, line);
    }
  }
  return m;
}

}  // namespace detail

inline MeshFormat format_from_path(const std::string& path) {
  const size_t dot = path.find_last_of('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (ext == "obj") return MeshFormat::obj;
  if (ext == "off") return MeshFormat::off;
  if (ext == "ply") return MeshFormat::ply;
  throw MeshError(path + ": cannot infer mesh format from extension '" + ext + "'");
}

inline TriMesh validate_mesh(TriMesh m, const std::string& context = "mesh") {
  detail::compute_derived(m, context);
  return m;
}

inline TriMesh load_mesh(const std::string& path, MeshFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MeshError(path + ": cannot open file");
  TriMesh m;
  switch (format) {
    case MeshFormat::obj: m = detail::parse_obj(in, path); break;
    case MeshFormat::off: m = detail::parse_off(in, path); break;
    case MeshFormat::ply: m = detail::parse_ply(in, path); break;
  }
  detail::compute_derived(m, path);
  return m;
}

inline TriMesh load_mesh(const std::string& path) {
  return load_mesh(path, format_from_path(path));
}

inline void save_mesh(const TriMesh& m, const std::string& path, MeshFormat format) {
  std::ofstream out(path);
  if (!out) throw MeshError(path + ": cannot open file for writing");
  out.precision(17);
  switch (format) {
    case MeshFormat::obj:
      for (const auto& v : m.vertices) out << "v " << v.x() << " " << v.y() << " " << v.z() << "\n";
      for (const auto& f : m.faces)
        out << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
      break;
    case MeshFormat::off:
      out << "OFF\n" << m.vertices.size() << " " << m.faces.size() << " 0\n";
      for (const auto& v : m.vertices) out << v.x() << " " << v.y() << " " << v.z() << "\n";
      for (const auto& f : m.faces) out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
      break;
    case MeshFormat::ply:
      out << "ply\nformat ascii 1.0\n";
      out << "element vertex " << m.vertices.size() << "\n";
      out << "property double x\nproperty double y\nproperty double z\n";
      out << "element face " << m.faces.size() << "\n";
      out << "property list uchar int vertex_indices\nend_header\n";
      for (const auto& v : m.vertices) out << v.x() << " " << v.y() << " " << v.z() << "\n";
      for (const auto& f : m.faces) out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
      break;
  }
  if (!out) throw MeshError(path + ": write failed");
}

inline void save_mesh(const TriMesh& m, const std::string& path) {
  save_mesh(m, path, format_from_path(path));
}

inline void save_colored_mesh(const TriMesh& m, const std::vector<Color>& colors,
                              const std::string& path) {
  if (colors.size() != m.vertices.size())
    throw MeshError(path + ": color count " + std::to_string(colors.size()) +
                    " does not match vertex count " + std::to_string(m.vertices.size()));
  std::ofstream out(path);
  if (!out) throw MeshError(path + ": cannot open file for writing");
  out.precision(17);
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << m.vertices.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << m.faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  for (size_t v = 0; v < m.vertices.size(); ++v) {
    const auto& p = m.vertices[v];
    out << p.x() << " " << p.y() << " " << p.z() << " " << int(colors[v][0]) << " "
        << int(colors[v][1]) << " " << int(colors[v][2]) << "\n";
  }
  for (const auto& f : m.faces) out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
  if (!out) throw MeshError(path + ": write failed");
}

// Deterministic bounding-box-normalized color coding: half direct position,
// half a cyclic channel mix. Translating the mesh leaves colors unchanged;
// a degenerate axis collapses to the mid value 0.5.
inline std::vector<Color> normal_coded_colors(const TriMesh& m) {
  Vec3 lo = m.vertices[0], hi = m.vertices[0];
  for (const auto& v : m.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const Vec3 extent = hi - lo;
  std::vector<Color> out(m.vertices.size());
  for (size_t v = 0; v < m.vertices.size(); ++v) {
    Vec3 p;
    for (int k = 0; k < 3; ++k)
      p[k] = extent[k] > 0.0 ? (m.vertices[v][k] - lo[k]) / extent[k] : 0.5;
    const Vec3 mixed(p.y(), p.z(), p.x());
    const Vec3 c = 0.5 * p + 0.5 * mixed;
    for (int k = 0; k < 3; ++k)
      out[v][k] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(c[k], 0.0, 1.0)));
  }
  return out;
}

}  // namespace patchmatch
