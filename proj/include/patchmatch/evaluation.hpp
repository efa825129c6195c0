#pragma once

// Correspondence scoring: mean geodesic error, cycle geodesic error,
// point-to-point accuracy, cumulative error curves, and the ground-truth
// discard mask. Ground-truth maps use -1 for discarded vertices.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchmatch/geodesic.hpp"
#include "patchmatch/trimesh.hpp"

namespace patchmatch {

struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kDiscarded = -1;

using GroundTruthMap = std::vector<int>;  // target index or kDiscarded

inline void validate_gt(const GroundTruthMap& gt, int target_vertices) {
  int live = 0;
  for (int v : gt) {
    if (v == kDiscarded) continue;
    if (v < 0 || v >= target_vertices)
      throw EvaluationError("ground truth index " + std::to_string(v) + " out of range");
    ++live;
  }
  if (live == 0) throw EvaluationError("ground truth has no evaluable entries");
}

// Distance maps from each distinct source in `sources`, memoized.
class DistanceOracle {
 public:
  explicit DistanceOracle(const TriMesh& mesh) : graph_(mesh) {}

  double operator()(int a, int b) {
    const auto& row = map_for(a);
    return row[b];
  }

 private:
  const std::vector<double>& map_for(int src) {
    auto it = cache_.find(src);
    if (it == cache_.end()) it = cache_.emplace(src, single_source(graph_, src).dist).first;
    return it->second;
  }

  EdgeGraph graph_;
  std::map<int, std::vector<double>> cache_;
};

inline std::vector<double> per_vertex_errors(const std::vector<int>& pred,
                                             const GroundTruthMap& gt, const TriMesh& target,
                                             double norm_factor) {
  if (pred.size() != gt.size())
    throw EvaluationError("prediction and ground truth cover different vertex counts");
  validate_gt(gt, target.num_vertices());
  DistanceOracle dist(target);
  std::vector<double> err;
  err.reserve(pred.size());
  for (size_t v = 0; v < pred.size(); ++v) {
    if (gt[v] == kDiscarded) {
      err.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    if (pred[v] < 0 || pred[v] >= target.num_vertices())
      throw EvaluationError("predicted index " + std::to_string(pred[v]) + " out of range");
    err.push_back(dist(gt[v], pred[v]) / norm_factor);
  }
  return err;
}

inline double mge(const std::vector<int>& pred, const GroundTruthMap& gt, const TriMesh& target,
                  Normalization norm) {
  const double f = normalization_factor(target, norm);
  const auto err = per_vertex_errors(pred, gt, target, f);
  double sum = 0.0;
  int n = 0;
  for (double e : err)
    if (!std::isnan(e)) {
      sum += e;
      ++n;
    }
  return sum / n;
}

// Mean metric distortion over ordered vertex pairs of the source shape under
// the two-step round trip. Pairs whose round-trip images coincide while the
// originals do not contribute `degenerate_cap`. Full O(n^2) sum when the
// budget covers it, seeded uniform pair sampling otherwise.
inline double cycle_ge(const std::vector<int>& map_xy, const std::vector<int>& map_yx,
                       const TriMesh& source, Normalization norm = Normalization::none,
                       std::uint64_t pair_budget = 1000000, std::uint64_t sample_seed = 0,
                       double degenerate_cap = 1.0) {
  const size_t n = map_xy.size();
  if (n != static_cast<size_t>(source.num_vertices()))
    throw EvaluationError("cycle_ge: forward map does not cover the source shape");
  std::vector<int> round_trip(n);
  for (size_t v = 0; v < n; ++v) {
    const int y = map_xy[v];
    if (y < 0 || static_cast<size_t>(y) >= map_yx.size())
      throw EvaluationError("cycle_ge: forward map index out of range");
    round_trip[v] = map_yx[static_cast<size_t>(y)];
    if (round_trip[v] < 0 || round_trip[v] >= source.num_vertices())
      throw EvaluationError("cycle_ge: reverse map index out of range");
  }
  (void)norm;  // the distortion ratio is normalization-free
  DistanceOracle dist(source);
  auto term = [&](int x1, int x2) {
    const double d = dist(x1, x2);
    const double dt = dist(round_trip[x1], round_trip[x2]);
    if (dt == 0.0) return d == 0.0 ? 0.0 : degenerate_cap;
    return std::abs(1.0 - d / dt);
  };
  const std::uint64_t full = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(n);
  if (pair_budget >= full) {
    double sum = 0.0;
    for (size_t a = 0; a < n; ++a)
      for (size_t b = 0; b < n; ++b) sum += term(static_cast<int>(a), static_cast<int>(b));
    return sum / static_cast<double>(full);
  }
  std::mt19937_64 rng(sample_seed);
  double sum = 0.0;
  for (std::uint64_t k = 0; k < pair_budget; ++k) {
    const int a = static_cast<int>(rng() % n);
    const int b = static_cast<int>(rng() % n);
    sum += term(a, b);
  }
  return sum / static_cast<double>(pair_budget);
}

inline double p2p_accuracy(const std::vector<int>& pred, const GroundTruthMap& gt) {
  if (pred.size() != gt.size())
    throw EvaluationError("prediction and ground truth cover different vertex counts");
  int hits = 0, live = 0;
  for (size_t v = 0; v < pred.size(); ++v) {
    if (gt[v] == kDiscarded) continue;
    ++live;
    if (pred[v] == gt[v]) ++hits;
  }
  if (live == 0) throw EvaluationError("ground truth has no evaluable entries");
  return static_cast<double>(hits) / static_cast<double>(live);
}

struct CurvePoint {
  double tolerance;
  double fraction;
};

inline std::vector<CurvePoint> cumulative_curve(const std::vector<int>& pred,
                                                const GroundTruthMap& gt, const TriMesh& target,
                                                Normalization norm,
                                                const std::vector<double>& tolerances) {
  for (size_t i = 1; i < tolerances.size(); ++i)
    if (tolerances[i] < tolerances[i - 1])
      throw EvaluationError("cumulative_curve: tolerances must be ascending");
  const double f = normalization_factor(target, norm);
  const auto err = per_vertex_errors(pred, gt, target, f);
  int live = 0;
  for (double e : err)
    if (!std::isnan(e)) ++live;
  std::vector<CurvePoint> curve;
  for (double t : tolerances) {
    int within = 0;
    for (double e : err)
      if (!std::isnan(e) && e <= t) ++within;
    curve.push_back({t, static_cast<double>(within) / live});
  }
  return curve;
}

// Marks DISCARDED where the fit distance exceeds factor x mean edge length
// (0.2 for remeshed ground truth, 2.0 for raw scans).
inline GroundTruthMap build_gt_discards(const GroundTruthMap& gt,
                                        const std::vector<double>& surface_distance,
                                        double mean_edge_length, double factor) {
  if (gt.size() != surface_distance.size())
    throw EvaluationError("build_gt_discards: size mismatch");
  GroundTruthMap out = gt;
  for (size_t v = 0; v < gt.size(); ++v)
    if (surface_distance[v] > factor * mean_edge_length) out[v] = kDiscarded;
  return out;
}

struct MetricReport {
  double mge = 0.0;
  double cycle_ge = 0.0;
  double p2p = 0.0;
  std::vector<CurvePoint> curve;
  Normalization normalization = Normalization::sqrt_area;
};

inline nlohmann::json metric_report_to_json(const MetricReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.curve) curve.push_back({p.tolerance, p.fraction});
  return {{"mge", r.mge},
          {"cycle_ge", r.cycle_ge},
          {"p2p", r.p2p},
          {"curve", curve},
          {"normalization", normalization_name(r.normalization)}};
}

inline void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw EvaluationError(path + ": cannot open file for writing");
  out.precision(17);
  out << "tolerance,fraction\n";
  for (const auto& p : curve) out << p.tolerance << "," << p.fraction << "\n";
  if (!out) throw EvaluationError(path + ": write failed");
}

inline GroundTruthMap load_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EvaluationError(path + ": cannot open file");
  GroundTruthMap gt;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    gt.push_back(std::stoi(line));
  }
  if (gt.empty()) throw EvaluationError(path + ": empty ground-truth map");
  return gt;
}

}  // namespace patchmatch
