#pragma once

// Run configuration: JSON schema with strict unknown-key rejection, the
// canonical effective-config echo, config hashing for run directories, and
// the atomically-written run manifest.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchmatch/criteria.hpp"
#include "patchmatch/geodesic.hpp"
#include "patchmatch/optim.hpp"

namespace patchmatch {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  MatchConfig match;

  // Five scalar weights; geodesic applies to levels >= 1 (level 0 is fixed 0).
  double weight_geodesic = 0.01;
  double weight_cycle = 1.0;
  double weight_self_reconstruction = 1.0;
  double weight_matching = 1.0;
  double weight_rigidity = 0.1;

  void finalize() {
    LossWeights w;
    w.levels.assign(match.num_levels(),
                    LevelWeights{weight_geodesic, weight_cycle, weight_self_reconstruction,
                                 weight_matching, weight_rigidity});
    w.levels[0].geodesic = 0.0;
    match.weights = w;
    match.effective_dims();  // validates
    w.validate();
  }
};

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["patch_counts"] = c.match.patch_counts;
  j["feature_dims"] = c.match.feature_dims.empty()
                          ? nlohmann::json(std::vector<int>(c.match.num_levels(), 32))
                          : nlohmann::json(c.match.feature_dims);
  j["tau"] = c.match.tau;
  j["weights"] = {{"geodesic", c.weight_geodesic},
                  {"cycle", c.weight_cycle},
                  {"self_reconstruction", c.weight_self_reconstruction},
                  {"matching", c.weight_matching},
                  {"rigidity", c.weight_rigidity}};
  j["sigma_scale"] = c.match.sigma_scale;
  j["smoothing_steps"] = c.match.smoothing_steps;
  j["epochs"] = c.match.epochs;
  j["steps_per_epoch"] = c.match.steps_per_epoch;
  j["clip_norm"] = c.match.clip_norm;
  j["seed"] = c.match.seed;
  j["normalization"] = normalization_name(c.match.normalization);
  j["geometric_seeding"] = c.match.geometric_seeding;
  j["warmup_epochs"] = c.match.warmup_epochs;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "patch_counts", "feature_dims", "tau",          "weights",
      "sigma_scale",  "smoothing_steps", "epochs",    "steps_per_epoch",
      "clip_norm",    "seed",         "normalization", "geometric_seeding",
      "warmup_epochs"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");

  RunConfig c;
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  get("patch_counts", c.match.patch_counts);
  get("feature_dims", c.match.feature_dims);
  get("tau", c.match.tau);
  get("sigma_scale", c.match.sigma_scale);
  get("smoothing_steps", c.match.smoothing_steps);
  get("epochs", c.match.epochs);
  get("steps_per_epoch", c.match.steps_per_epoch);
  get("clip_norm", c.match.clip_norm);
  get("seed", c.match.seed);
  get("geometric_seeding", c.match.geometric_seeding);
  get("warmup_epochs", c.match.warmup_epochs);
  if (j.contains("normalization"))
    c.match.normalization = normalization_from_name(j.at("normalization").get<std::string>());
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    static const std::set<std::string> wk = {"geodesic", "cycle", "self_reconstruction",
                                             "matching", "rigidity"};
    for (auto it = w.begin(); it != w.end(); ++it)
      if (!wk.count(it.key())) throw ConfigError("unknown weight key '" + it.key() + "'");
    if (w.contains("geodesic")) c.weight_geodesic = w.at("geodesic").get<double>();
    if (w.contains("cycle")) c.weight_cycle = w.at("cycle").get<double>();
    if (w.contains("self_reconstruction"))
      c.weight_self_reconstruction = w.at("self_reconstruction").get<double>();
    if (w.contains("matching")) c.weight_matching = w.at("matching").get<double>();
    if (w.contains("rigidity")) c.weight_rigidity = w.at("rigidity").get<double>();
  }
  if (!(c.match.tau > 0.0)) throw ConfigError("tau must be positive");
  if (c.match.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (c.match.steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
  if (!(c.match.clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(c.match.sigma_scale > 0.0)) throw ConfigError("sigma_scale must be positive");
  if (c.match.smoothing_steps < 0) throw ConfigError("smoothing_steps must be >= 0");
  c.finalize();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

inline std::string config_hash(const RunConfig& c) {
  const std::string dump = config_to_json(c).dump();
  const std::uint64_t h = detail::fnv1a(dump.data(), dump.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void write_json_atomic(const nlohmann::json& j, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw ConfigError(tmp + ": cannot open file for writing");
    out << j.dump(2) << "\n";
    if (!out) throw ConfigError(tmp + ": write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw ConfigError(path + ": atomic rename failed");
}

}  // namespace patchmatch
