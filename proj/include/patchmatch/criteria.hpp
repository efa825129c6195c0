#pragma once

// The five self-supervised criteria and their weighted per-level total.
// Each builder returns a scalar tape node so gradients reach the feature
// fields (through the association matrices) and the deformation parameters.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "patchmatch/tape.hpp"

namespace patchmatch {

struct CriteriaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LevelWeights {
  double geodesic = 0.01;
  double cycle = 1.0;
  double self_reconstruction = 1.0;
  double matching = 1.0;
  double rigidity = 0.1;
};

struct LossWeights {
  std::vector<LevelWeights> levels;

  static LossWeights defaults(int num_levels) {
    LossWeights w;
    w.levels.resize(num_levels);
    w.levels[0].geodesic = 0.0;  // vertex level never uses the geodesic criterion
    return w;
  }

  void validate() const {
    if (levels.empty()) throw CriteriaError("loss weights: no levels");
    if (levels[0].geodesic != 0.0)
      throw CriteriaError("loss weights: geodesic weight at level 0 must be 0");
    for (const auto& l : levels)
      if (l.geodesic < 0 || l.cycle < 0 || l.self_reconstruction < 0 || l.matching < 0 ||
          l.rigidity < 0)
        throw CriteriaError("loss weights: weights must be nonnegative");
  }
};

struct LevelLosses {
  double geodesic = 0.0;
  double cycle = 0.0;
  double self_reconstruction = 0.0;
  double matching = 0.0;
  double rigidity = 0.0;
};

struct LossReport {
  std::vector<LevelLosses> levels;
  double total = 0.0;
};

inline nlohmann::json loss_report_to_json(const LossReport& r) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : r.levels)
    levels.push_back({{"geodesic", l.geodesic},
                      {"cycle", l.cycle},
                      {"self_reconstruction", l.self_reconstruction},
                      {"matching", l.matching},
                      {"rigidity", l.rigidity}});
  return {{"total", r.total}, {"levels", levels}};
}

// || Pi_xy D_y Pi_xy^T - D_x ||^2 + the symmetric term.
inline int geodesic_loss(Tape& t, int pi_xy, int pi_yx,
                         std::shared_ptr<const Eigen::MatrixXd> d_x,
                         std::shared_ptr<const Eigen::MatrixXd> d_y) {
  return t.add(t.geodesic_term(pi_xy, d_y, d_x), t.geodesic_term(pi_yx, d_x, d_y));
}

// || Pi_xy (Pi_yx C_x) - C_x ||^2 + symmetric; centers are constants.
inline int cycle_loss(Tape& t, int pi_xy, int pi_yx, int centers_x, int centers_y) {
  const int back_x = t.sub(t.matmul(pi_xy, t.matmul(pi_yx, centers_x)), centers_x);
  const int back_y = t.sub(t.matmul(pi_yx, t.matmul(pi_xy, centers_y)), centers_y);
  return t.add(t.frob_sq(back_x), t.frob_sq(back_y));
}

// || Pi_xx C_x - C_x ||^2 + symmetric.
inline int self_reconstruction_loss(Tape& t, int pi_xx, int centers_x, int pi_yy, int centers_y) {
  const int rx = t.sub(t.matmul(pi_xx, centers_x), centers_x);
  const int ry = t.sub(t.matmul(pi_yy, centers_y), centers_y);
  return t.add(t.frob_sq(rx), t.frob_sq(ry));
}

// || C^{X_l} - Pi_xy C_y ||^2 + symmetric; deformed centers carry gradients
// into the deformation parameters, Pi into the features.
inline int matching_loss(Tape& t, int deformed_centers_x, int pi_xy, int centers_y,
                         int deformed_centers_y, int pi_yx, int centers_x) {
  const int rx = t.sub(deformed_centers_x, t.matmul(pi_xy, centers_y));
  const int ry = t.sub(deformed_centers_y, t.matmul(pi_yx, centers_x));
  return t.add(t.frob_sq(rx), t.frob_sq(ry));
}

// Inputs per level for the weighted total; node ids of -1 mark criteria whose
// weight is zero and whose graph was skipped.
struct LevelCriterionNodes {
  int geodesic = -1;
  int cycle = -1;
  int self_reconstruction = -1;
  int matching = -1;
  int rigidity = -1;
};

inline int total_loss(Tape& t, const std::vector<LevelCriterionNodes>& nodes,
                      const LossWeights& weights, LossReport* report = nullptr) {
  weights.validate();
  if (nodes.size() != weights.levels.size())
    throw CriteriaError("total_loss: level count mismatch");
  if (report) {
    report->levels.assign(nodes.size(), LevelLosses{});
    report->total = 0.0;
  }
  int total = t.constant(Eigen::MatrixXd::Zero(1, 1));
  for (size_t l = 0; l < nodes.size(); ++l) {
    const auto& n = nodes[l];
    const auto& w = weights.levels[l];
    auto take = [&](int node, double weight, const char* name, double* slot) -> void {
      if (node < 0) return;
      const double value = t.value(node)(0, 0);
      if (!std::isfinite(value))
        throw CriteriaError("total_loss: nonfinite " + std::string(name) + " criterion at level " +
                            std::to_string(l));
      if (slot) *slot = value;
      if (weight != 0.0) total = t.add(total, t.scale(node, weight));
    };
    take(n.geodesic, w.geodesic, "geodesic", report ? &report->levels[l].geodesic : nullptr);
    take(n.cycle, w.cycle, "cycle", report ? &report->levels[l].cycle : nullptr);
    take(n.self_reconstruction, w.self_reconstruction, "self_reconstruction",
         report ? &report->levels[l].self_reconstruction : nullptr);
    take(n.matching, w.matching, "matching", report ? &report->levels[l].matching : nullptr);
    take(n.rigidity, w.rigidity, "rigidity", report ? &report->levels[l].rigidity : nullptr);
  }
  if (report) report->total = t.value(total)(0, 0);
  return total;
}

}  // namespace patchmatch
