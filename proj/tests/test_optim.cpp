#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "patchmatch/optim.hpp"
#include "test_support.hpp"

using namespace patchmatch;
using testsupport::TempDir;

TEST_CASE("learning rate follows the staged schedule") {
  CHECK(learning_rate(1) == 1e-3);
  CHECK(learning_rate(2) == 5e-4);
  CHECK(learning_rate(10) == 5e-4);
  CHECK(learning_rate(11) == 2.5e-4);
  CHECK(learning_rate(50) == 2.5e-4);
}

TEST_CASE("gradient clipping rescales only above the threshold") {
  std::vector<Eigen::MatrixXd> grads;
  grads.push_back(Eigen::MatrixXd::Constant(2, 2, 3.0));  // norm 6
  grads.push_back(Eigen::MatrixXd::Constant(1, 1, 8.0));  // global norm 10
  clip_gradients(grads, 1.0);
  CHECK(grads[0](0, 0) == Catch::Approx(0.3).epsilon(1e-12));
  CHECK(grads[1](0, 0) == Catch::Approx(0.8).epsilon(1e-12));

  std::vector<Eigen::MatrixXd> small;
  small.push_back(Eigen::MatrixXd::Constant(1, 1, 0.5));
  clip_gradients(small, 1.0);
  CHECK(small[0](0, 0) == 0.5);

  std::vector<Eigen::MatrixXd> zero;
  zero.push_back(Eigen::MatrixXd::Zero(3, 3));
  clip_gradients(zero, 1.0);
  CHECK(zero[0].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("one Adam step from zero moments moves by about -lr * sign(g)") {
  std::vector<Eigen::MatrixXd> params;
  params.push_back(Eigen::MatrixXd::Constant(1, 1, 2.0));
  AdamState s = AdamState::like(params, 1e9);
  std::vector<Eigen::MatrixXd> grads;
  grads.push_back(Eigen::MatrixXd::Constant(1, 1, 0.25));
  adam_step(s, params, grads, 1e-3);
  // m-hat = g, v-hat = g^2 after bias correction: step = lr * g / (|g| + eps).
  const double expected = 2.0 - 1e-3 * 0.25 / (0.25 + 1e-8);
  CHECK(params[0](0, 0) == Catch::Approx(expected).epsilon(1e-10));
  CHECK(s.step == 1);
}

TEST_CASE("zero gradients leave Adam parameters unchanged") {
  std::vector<Eigen::MatrixXd> params;
  params.push_back(Eigen::MatrixXd::Constant(2, 3, 1.5));
  AdamState s = AdamState::like(params, 1.0);
  std::vector<Eigen::MatrixXd> grads;
  grads.push_back(Eigen::MatrixXd::Zero(2, 3));
  adam_step(s, params, grads, 1e-3);
  CHECK((params[0].array() - 1.5).abs().maxCoeff() == 0.0);
}

TEST_CASE("Adam rejects mismatched lists and nonfinite gradients") {
  std::vector<Eigen::MatrixXd> params;
  params.push_back(Eigen::MatrixXd::Zero(1, 1));
  AdamState s = AdamState::like(params, 1.0);
  REQUIRE_THROWS_AS(adam_step(s, params, {}, 1e-3), OptimError);
  std::vector<Eigen::MatrixXd> bad;
  bad.push_back(Eigen::MatrixXd::Constant(1, 1, std::numeric_limits<double>::infinity()));
  REQUIRE_THROWS_AS(adam_step(s, params, bad, 1e-3), OptimError);
}

TEST_CASE("warm-up zeroes finer levels on a descending schedule") {
  MatchConfig cfg;
  cfg.patch_counts = {4, 2};
  cfg.warmup_epochs = 2;
  const LossWeights base = cfg.effective_weights();
  const LossWeights e1 = warmup_weights(base, cfg, 1);
  CHECK(e1.levels[0].cycle == 0.0);
  CHECK(e1.levels[1].cycle == 0.0);
  CHECK(e1.levels[2].cycle == base.levels[2].cycle);
  const LossWeights e2 = warmup_weights(base, cfg, 2);
  CHECK(e2.levels[0].cycle == 0.0);
  CHECK(e2.levels[1].cycle == base.levels[1].cycle);
  const LossWeights e3 = warmup_weights(base, cfg, 3);
  CHECK(e3.levels[0].matching == base.levels[0].matching);
  MatchConfig joint = cfg;
  joint.warmup_epochs = 0;
  CHECK(warmup_weights(base, joint, 1).levels[0].cycle == base.levels[0].cycle);
}

TEST_CASE("effective dims honor geometric seeding and validate lengths") {
  MatchConfig cfg;
  cfg.patch_counts = {4, 2};
  CHECK(cfg.effective_dims() == std::vector<int>{6, 32, 32});
  cfg.geometric_seeding = false;
  CHECK(cfg.effective_dims() == std::vector<int>{32, 32, 32});
  cfg.feature_dims = {8, 8};
  REQUIRE_THROWS_AS(cfg.effective_dims(), OptimError);
  cfg.feature_dims = {8, 8, 4};
  cfg.geometric_seeding = true;
  CHECK(cfg.effective_dims() == std::vector<int>{6, 8, 4});
}

TEST_CASE("effective weights default per level and validate counts") {
  MatchConfig cfg;
  cfg.patch_counts = {4};
  const LossWeights w = cfg.effective_weights();
  REQUIRE(w.levels.size() == 2);
  CHECK(w.levels[0].geodesic == 0.0);
  CHECK(w.levels[1].geodesic == 0.01);
  CHECK(w.levels[1].rigidity == 0.1);
  cfg.weights = LossWeights::defaults(3);
  REQUIRE_THROWS_AS(cfg.effective_weights(), OptimError);
}

TEST_CASE("shape context caches center distance matrices on disk") {
  std::mt19937_64 rng(11);
  const TriMesh m = testsupport::make_random_mesh(rng, 6, 6, 0);
  TempDir dir;
  MatchConfig cfg;
  cfg.patch_counts = {8, 3};
  cfg.cache_dir = dir.path;

  const ShapeContext fresh = build_shape_context(m, cfg, "shape");
  REQUIRE(std::filesystem::exists(dir.file("shape.L1.pmdm")));
  REQUIRE(std::filesystem::exists(dir.file("shape.L2.pmdm")));
  CHECK(fresh.center_distances[0] == nullptr);  // level 0 never uses geodesics

  const ShapeContext cached = build_shape_context(m, cfg, "shape");
  for (int l = 1; l <= 2; ++l) {
    REQUIRE(cached.center_distances[l]);
    CHECK(*cached.center_distances[l] == *fresh.center_distances[l]);
    CHECK((cached.center_distances[l]->transpose() - *cached.center_distances[l])
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("zero-epoch self match keeps the seeded identity map") {
  std::mt19937_64 rng(12);
  const TriMesh m = testsupport::make_random_mesh(rng, 5, 5, 0);
  MatchConfig cfg;
  cfg.patch_counts = {6, 2};
  cfg.epochs = 0;
  const MatchResult r = match_pair(m, m, cfg);
  CHECK_FALSE(r.diverged);
  REQUIRE(r.map_xy.size() == 25);
  std::vector<int> identity(25);
  for (int v = 0; v < 25; ++v) identity[v] = v;
  CHECK(r.map_xy == identity);
  CHECK(r.map_yx == identity);
  REQUIRE(r.pi_xy.size() == 3);
  CHECK(r.deformed_x[1].rows() == 25);
  CHECK(r.history.empty());
}

TEST_CASE("short optimization runs are finite and deterministic") {
  std::mt19937_64 rng(13);
  const TriMesh m = testsupport::make_random_mesh(rng, 5, 5, 0);
  MatchConfig cfg;
  cfg.patch_counts = {6, 2};
  cfg.epochs = 2;
  cfg.steps_per_epoch = 2;
  cfg.seed = 5;

  const MatchResult a = match_pair(m, m, cfg);
  CHECK_FALSE(a.diverged);
  REQUIRE(a.history.size() == 4);
  for (const auto& rec : a.history) CHECK(std::isfinite(rec.total));

  const MatchResult b = match_pair(m, m, cfg);
  CHECK(a.map_xy == b.map_xy);
  CHECK(a.map_yx == b.map_yx);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i)
    CHECK(a.history[i].total == b.history[i].total);
  for (size_t l = 0; l < a.pi_xy.size(); ++l)
    CHECK((a.pi_xy[l] - b.pi_xy[l]).cwiseAbs().maxCoeff() == 0.0);
}
