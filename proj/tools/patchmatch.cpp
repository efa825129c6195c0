// Command-line surface for the patch-based matching pipeline:
//   patchmatch decompose | match | eval | transfer-colors
// Exit codes: 0 ok, 2 input error, 3 numerical divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchmatch/association.hpp"
#include "patchmatch/config.hpp"
#include "patchmatch/evaluation.hpp"
#include "patchmatch/geodesic.hpp"
#include "patchmatch/hierarchy.hpp"
#include "patchmatch/optim.hpp"
#include "patchmatch/trimesh.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace patchmatch;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitDiverged = 3;

struct CommonFlags {
  std::string config_path;
  std::string out = ".";
  std::int64_t seed = -1;  // -1 = keep the config value
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file");
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--out", f.out, "output directory");
}

// Precedence: flags > file > defaults.
RunConfig resolve_config(const CommonFlags& f) {
  RunConfig cfg;
  if (!f.config_path.empty())
    cfg = load_config(f.config_path);
  else
    cfg.finalize();
  if (f.seed >= 0) cfg.match.seed = static_cast<std::uint64_t>(f.seed);
  return cfg;
}

std::string basename_stem(const std::string& path) { return fs::path(path).stem().string(); }

std::vector<Color> patch_palette_colors(const PatchHierarchy& h, int level) {
  std::vector<Color> out(static_cast<size_t>(h.num_vertices));
  for (int v = 0; v < h.num_vertices; ++v) {
    // Deterministic per-patch color from an integer hash of the patch id.
    std::uint64_t x = static_cast<std::uint64_t>(h.assignment[level][v]) + 0x9e3779b97f4a7c15ull;
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    out[static_cast<size_t>(v)] = {static_cast<std::uint8_t>(x & 0xff),
                                   static_cast<std::uint8_t>((x >> 8) & 0xff),
                                   static_cast<std::uint8_t>((x >> 16) & 0xff)};
  }
  return out;
}

int cmd_decompose(const std::string& mesh_path, const CommonFlags& flags, bool colored) {
  const RunConfig cfg = resolve_config(flags);
  const TriMesh mesh = load_mesh(mesh_path);
  const PatchHierarchy h = build_hierarchy(mesh, cfg.match.patch_counts, cfg.match.seed);
  fs::create_directories(flags.out);
  const std::string stem = basename_stem(mesh_path);
  write_json_atomic(hierarchy_to_json(h), flags.out + "/" + stem + ".hierarchy.json");
  if (colored)
    for (int l = 1; l < h.num_levels(); ++l)
      save_colored_mesh(mesh, patch_palette_colors(h, l),
                        flags.out + "/" + stem + ".patches.L" + std::to_string(l) + ".ply");
  return kExitOk;
}

void save_positions_obj(const Eigen::MatrixXd& positions, const TriMesh& topology,
                        const std::string& path) {
  TriMesh m = topology;
  for (int v = 0; v < m.num_vertices(); ++v) m.vertices[v] = positions.row(v).transpose();
  save_mesh(m, path, MeshFormat::obj);
}

void write_loss_log(const std::vector<LossReport>& history, int steps_per_epoch,
                    const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError(path + ": cannot open file for writing");
  out.precision(17);
  for (size_t k = 0; k < history.size(); ++k) {
    json rec = loss_report_to_json(history[k]);
    rec["step"] = k;
    rec["epoch"] = static_cast<int>(k) / steps_per_epoch + 1;
    out << rec.dump() << "\n";
  }
  if (!out) throw ConfigError(path + ": write failed");
}

int run_match_job(const std::string& mesh_a, const std::string& mesh_b, RunConfig cfg,
                  const std::string& run_dir, bool dump_deformations) {
  const std::string hash = config_hash(cfg);
  fs::create_directories(run_dir);

  // Refuse to reuse a run directory produced under a different configuration.
  const std::string manifest_path = run_dir + "/manifest.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    json prev;
    in >> prev;
    if (prev.value("config_hash", "") != hash) {
      std::cerr << run_dir << ": existing manifest was produced with config hash "
                << prev.value("config_hash", "?") << ", current config hashes to " << hash
                << "; refusing to resume\n";
      return kExitInput;
    }
  }

  const TriMesh mx = load_mesh(mesh_a);
  const TriMesh my = load_mesh(mesh_b);
  if (const char* cache = std::getenv("PATCHMATCH_CACHE"); cache && *cache) {
    cfg.match.cache_dir = cache;
    fs::create_directories(cfg.match.cache_dir);
    cfg.match.cache_key_x = basename_stem(mesh_a) + "." + std::to_string(mx.num_vertices()) +
                            ".s" + std::to_string(cfg.match.seed);
    cfg.match.cache_key_y = basename_stem(mesh_b) + "." + std::to_string(my.num_vertices()) +
                            ".s" + std::to_string(cfg.match.seed);
  }

  const MatchResult result = match_pair(mx, my, cfg.match);

  json outputs;
  save_point_map(result.map_xy, run_dir + "/map_x_to_y.txt");
  save_point_map(result.map_yx, run_dir + "/map_y_to_x.txt");
  outputs["map_x_to_y"] = run_dir + "/map_x_to_y.txt";
  outputs["map_y_to_x"] = run_dir + "/map_y_to_x.txt";

  // Association dumps for the coarse levels (level 0 is covered by the maps).
  for (size_t l = 1; l < result.pi_xy.size(); ++l) {
    auto dump = [&](const Eigen::MatrixXd& pi, const std::string& name) {
      const std::string path = run_dir + "/" + name + ".L" + std::to_string(l) + ".csv";
      std::ofstream out(path);
      out.precision(17);
      for (Eigen::Index r = 0; r < pi.rows(); ++r) {
        for (Eigen::Index c = 0; c < pi.cols(); ++c) out << (c ? "," : "") << pi(r, c);
        out << "\n";
      }
      outputs[name + "_L" + std::to_string(l)] = path;
    };
    dump(result.pi_xy[l], "pi_x_to_y");
    dump(result.pi_yx[l], "pi_y_to_x");
  }

  if (dump_deformations)
    for (size_t l = 0; l < result.deformed_x.size(); ++l) {
      const std::string px = run_dir + "/deformed_x.L" + std::to_string(l) + ".obj";
      const std::string py = run_dir + "/deformed_y.L" + std::to_string(l) + ".obj";
      save_positions_obj(result.deformed_x[l], mx, px);
      save_positions_obj(result.deformed_y[l], my, py);
      outputs["deformed_x_L" + std::to_string(l)] = px;
      outputs["deformed_y_L" + std::to_string(l)] = py;
    }

  const std::string loss_path = run_dir + "/loss.jsonl";
  write_loss_log(result.history, cfg.match.steps_per_epoch, loss_path);

  json manifest;
  manifest["seed"] = cfg.match.seed;
  manifest["config_hash"] = hash;
  manifest["config"] = config_to_json(cfg);
  manifest["mesh_x"] = mesh_a;
  manifest["mesh_y"] = mesh_b;
  manifest["loss_log"] = loss_path;
  manifest["outputs"] = outputs;
  manifest["diverged"] = result.diverged;
  if (result.diverged) manifest["divergence_message"] = result.divergence_message;
  write_json_atomic(manifest, manifest_path);

  if (result.diverged) {
    std::cerr << "optimization diverged: " << result.divergence_message
              << " (partial artifacts kept in " << run_dir << ")\n";
    return kExitDiverged;
  }
  return kExitOk;
}

int cmd_match(const std::string& mesh_a, const std::string& mesh_b, const CommonFlags& flags,
              bool dump_deformations, std::int64_t epochs_flag, const std::string& pairs_file) {
  RunConfig cfg = resolve_config(flags);
  if (epochs_flag >= 0) {
    cfg.match.epochs = static_cast<int>(epochs_flag);
    cfg.finalize();
  }
  const std::string hash = config_hash(cfg);
  const std::string base = flags.out + "/" + hash + "-seed" + std::to_string(cfg.match.seed);

  if (!pairs_file.empty()) {
    std::ifstream in(pairs_file);
    if (!in) throw ConfigError(pairs_file + ": cannot open pairs file");
    std::string a, b;
    int worst = kExitOk;
    while (in >> a >> b) {
      const std::string dir = base + "/" + basename_stem(a) + "__" + basename_stem(b);
      const int rc = run_match_job(a, b, cfg, dir, dump_deformations);
      worst = std::max(worst, rc);
    }
    return worst;
  }
  return run_match_job(mesh_a, mesh_b, cfg, base, dump_deformations);
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path,
             const std::string& target_mesh_path, const CommonFlags& flags,
             const std::string& norm_name, const std::string& reverse_map_path,
             const std::string& source_mesh_path) {
  const Normalization norm = normalization_from_name(norm_name);
  const std::vector<int> pred = load_point_map(pred_path);
  const GroundTruthMap gt = load_ground_truth(gt_path);
  const TriMesh target = load_mesh(target_mesh_path);

  MetricReport report;
  report.normalization = norm;
  report.mge = mge(pred, gt, target, norm);
  report.p2p = p2p_accuracy(pred, gt);
  std::vector<double> tolerances;
  for (int k = 0; k <= 25; ++k) tolerances.push_back(0.01 * k);
  report.curve = cumulative_curve(pred, gt, target, norm, tolerances);
  if (!reverse_map_path.empty()) {
    if (source_mesh_path.empty())
      throw EvaluationError("--reverse-map requires --source-mesh for the cycle metric");
    const std::vector<int> reverse = load_point_map(reverse_map_path);
    const TriMesh source = load_mesh(source_mesh_path);
    report.cycle_ge = cycle_ge(pred, reverse, source);
  }

  fs::create_directories(flags.out);
  write_json_atomic(metric_report_to_json(report), flags.out + "/metrics.json");
  write_curve_csv(report.curve, flags.out + "/curve.csv");
  return kExitOk;
}

int cmd_transfer_colors(const std::string& source_path, const std::string& target_path,
                        const std::string& map_path, const std::string& out_ply) {
  const TriMesh source = load_mesh(source_path);
  const TriMesh target = load_mesh(target_path);
  const std::vector<int> map = load_point_map(map_path);
  if (map.size() != static_cast<size_t>(source.num_vertices()))
    throw MeshError(map_path + ": map covers " + std::to_string(map.size()) +
                    " vertices, source has " + std::to_string(source.num_vertices()));
  const std::vector<Color> target_colors = normal_coded_colors(target);
  std::vector<Color> source_colors(map.size());
  for (size_t v = 0; v < map.size(); ++v) {
    if (map[v] < 0 || map[v] >= target.num_vertices())
      throw MeshError(map_path + ": index " + std::to_string(map[v]) + " out of range");
    source_colors[v] = target_colors[static_cast<size_t>(map[v])];
  }
  save_colored_mesh(source, source_colors, out_ply);
  const fs::path p(out_ply);
  const std::string target_out = (p.parent_path() / (p.stem().string() + ".target.ply")).string();
  save_colored_mesh(target, target_colors, target_out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical patch-based non-rigid shape matching"};
  app.require_subcommand(1);

  CommonFlags decompose_flags, match_flags, eval_flags;
  std::string mesh_path, mesh_a, mesh_b;
  bool colored = false, dump_deformations = false;
  std::int64_t epochs_flag = -1;
  std::string pairs_file;
  std::string pred_path, gt_path, target_mesh_path, norm_name = "sqrt_area";
  std::string reverse_map_path, source_mesh_path;
  std::string tc_source, tc_target, tc_map, tc_out;

  auto* decompose = app.add_subcommand("decompose", "build and export a patch hierarchy");
  decompose->add_option("mesh", mesh_path, "input mesh (.obj/.off/.ply)")->required();
  add_common(decompose, decompose_flags);
  decompose->add_flag("--colored-ply", colored, "export per-level patch-colored PLYs");

  auto* match = app.add_subcommand("match", "optimize a correspondence for a shape pair");
  match->add_option("mesh-a", mesh_a, "first mesh");
  match->add_option("mesh-b", mesh_b, "second mesh");
  add_common(match, match_flags);
  match->add_flag("--dump-deformations", dump_deformations, "export per-level deformed OBJs");
  match->add_option("--epochs", epochs_flag, "override the epoch count");
  match->add_option("--pairs", pairs_file, "file of mesh pairs, one 'A B' per line");

  auto* eval = app.add_subcommand("eval", "score a point map against ground truth");
  eval->add_option("pred-map", pred_path, "predicted point map")->required();
  eval->add_option("gt-map", gt_path, "ground-truth map (-1 = discarded)")->required();
  eval->add_option("target-mesh", target_mesh_path, "target mesh")->required();
  add_common(eval, eval_flags);
  eval->add_option("--normalization", norm_name, "sqrt_area | geodesic_diameter | none");
  eval->add_option("--reverse-map", reverse_map_path, "reverse point map for the cycle metric");
  eval->add_option("--source-mesh", source_mesh_path, "source mesh for the cycle metric");

  auto* transfer = app.add_subcommand("transfer-colors", "visualize a map by color transfer");
  transfer->add_option("source-mesh", tc_source, "source mesh")->required();
  transfer->add_option("target-mesh", tc_target, "target mesh")->required();
  transfer->add_option("map-file", tc_map, "point map source -> target")->required();
  transfer->add_option("out-ply", tc_out, "output colored source PLY")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInput;
  }

  try {
    if (decompose->parsed()) return cmd_decompose(mesh_path, decompose_flags, colored);
    if (match->parsed()) {
      if (pairs_file.empty() && (mesh_a.empty() || mesh_b.empty())) {
        std::cerr << "match: two meshes (or --pairs) required\n";
        return kExitInput;
      }
      return cmd_match(mesh_a, mesh_b, match_flags, dump_deformations, epochs_flag, pairs_file);
    }
    if (eval->parsed())
      return cmd_eval(pred_path, gt_path, target_mesh_path, eval_flags, norm_name,
                      reverse_map_path, source_mesh_path);
    if (transfer->parsed()) return cmd_transfer_colors(tc_source, tc_target, tc_map, tc_out);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
