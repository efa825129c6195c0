#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "patchmatch/config.hpp"
#include "test_support.hpp"

using namespace patchmatch;
using testsupport::TempDir;

TEST_CASE("default config finalizes into per-level weights") {
  RunConfig c;
  c.finalize();
  REQUIRE(c.match.weights.levels.size() == 4);
  CHECK(c.match.weights.levels[0].geodesic == 0.0);
  CHECK(c.match.weights.levels[1].geodesic == 0.01);
  CHECK(c.match.weights.levels[2].cycle == 1.0);
  CHECK(c.match.weights.levels[3].rigidity == 0.1);
  CHECK(c.match.patch_counts == std::vector<int>{800, 200, 50});
  CHECK(c.match.tau == 1e-2);
}

TEST_CASE("an empty JSON object yields the default configuration") {
  const RunConfig c = config_from_json(nlohmann::json::object());
  const RunConfig d = [] {
    RunConfig x;
    x.finalize();
    return x;
  }();
  CHECK(config_to_json(c) == config_to_json(d));
}

TEST_CASE("config JSON round-trips through parse and echo") {
  nlohmann::json j = {{"patch_counts", {10, 4}},
                      {"tau", 0.5},
                      {"epochs", 3},
                      {"seed", 42},
                      {"weights", {{"geodesic", 0.02}, {"rigidity", 0.3}}},
                      {"normalization", "none"},
                      {"geometric_seeding", false}};
  const RunConfig c = config_from_json(j);
  CHECK(c.match.patch_counts == std::vector<int>{10, 4});
  CHECK(c.match.tau == 0.5);
  CHECK(c.match.epochs == 3);
  CHECK(c.match.seed == 42);
  CHECK(c.weight_geodesic == 0.02);
  CHECK(c.weight_rigidity == 0.3);
  CHECK(c.weight_cycle == 1.0);
  CHECK(c.match.normalization == Normalization::none);
  CHECK_FALSE(c.match.geometric_seeding);

  const nlohmann::json echo = config_to_json(c);
  CHECK(config_to_json(config_from_json(echo)) == echo);
}

TEST_CASE("unknown keys are rejected at both nesting levels") {
  REQUIRE_THROWS_AS(config_from_json({{"patchcounts", {10, 4}}}), ConfigError);
  REQUIRE_THROWS_AS(config_from_json({{"weights", {{"geodessic", 0.1}}}}), ConfigError);
  REQUIRE_THROWS_WITH(config_from_json({{"bogus", 1}}),
                      Catch::Matchers::ContainsSubstring("bogus"));
}

TEST_CASE("invalid values are rejected with clear errors") {
  CHECK_THROWS_AS(config_from_json({{"tau", 0.0}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"tau", -1.0}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"epochs", -1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"steps_per_epoch", 0}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"clip_norm", 0.0}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"sigma_scale", -0.5}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"smoothing_steps", -1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"normalization", "parsecs"}}), GeodesicError);
  CHECK_THROWS_AS(config_from_json({{"weights", {{"cycle", -1.0}}}}), CriteriaError);
  // feature_dims must cover every level, including the vertex level.
  CHECK_THROWS_AS(config_from_json({{"patch_counts", {10, 4}}, {"feature_dims", {8, 8}}}),
                  OptimError);
}

TEST_CASE("configs load from disk and report parse failures") {
  TempDir dir;
  {
    std::ofstream out(dir.file("good.json"));
    out << R"({"tau": 0.25, "epochs": 2})";
  }
  const RunConfig c = load_config(dir.file("good.json"));
  CHECK(c.match.tau == 0.25);
  CHECK(c.match.epochs == 2);

  {
    std::ofstream out(dir.file("bad.json"));
    out << "{not json";
  }
  REQUIRE_THROWS_AS(load_config(dir.file("bad.json")), ConfigError);
  REQUIRE_THROWS_AS(load_config(dir.file("missing.json")), ConfigError);
}

TEST_CASE("config hashes are stable, hex, and sensitive to any field") {
  RunConfig a;
  a.finalize();
  RunConfig b;
  b.finalize();
  const std::string ha = config_hash(a);
  CHECK(ha == config_hash(b));
  CHECK(ha.size() == 16);
  CHECK(ha.find_first_not_of("0123456789abcdef") == std::string::npos);

  b.match.seed = 1;
  CHECK(config_hash(b) != ha);
  b = a;
  b.match.tau = 0.02;
  b.finalize();
  CHECK(config_hash(b) != ha);
  b = a;
  b.weight_rigidity = 0.2;
  b.finalize();
  CHECK(config_hash(b) != ha);
}

TEST_CASE("atomic JSON writes land complete and leave no temp file") {
  TempDir dir;
  const nlohmann::json j = {{"alpha", 1}, {"beta", {1, 2, 3}}};
  write_json_atomic(j, dir.file("out.json"));
  CHECK_FALSE(std::filesystem::exists(dir.file("out.json.tmp")));
  std::ifstream in(dir.file("out.json"));
  nlohmann::json back;
  in >> back;
  CHECK(back == j);
  // Overwriting an existing file also succeeds.
  write_json_atomic({{"alpha", 2}}, dir.file("out.json"));
  std::ifstream in2(dir.file("out.json"));
  nlohmann::json back2;
  in2 >> back2;
  CHECK(back2["alpha"] == 2);
}
