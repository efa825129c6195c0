#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "patchmatch/association.hpp"
#include "test_support.hpp"

using namespace patchmatch;
using testsupport::TempDir;

TEST_CASE("feature initialization is deterministic, bounded, and never zero") {
  const TriMesh m = testsupport::make_tetrahedron();
  const PatchHierarchy h = build_hierarchy(m, {2}, 0);
  const FeatureField a = init_features(h, {4, 4}, 99);
  const FeatureField b = init_features(h, {4, 4}, 99);
  const FeatureField c = init_features(h, {4, 4}, 100);
  REQUIRE(a.levels.size() == 2);
  CHECK(a.levels[0] == b.levels[0]);
  CHECK(a.levels[1] == b.levels[1]);
  CHECK(a.levels[0] != c.levels[0]);
  for (const auto& lvl : a.levels) {
    CHECK(lvl.cwiseAbs().maxCoeff() <= 0.1);
    for (Eigen::Index r = 0; r < lvl.rows(); ++r) CHECK(lvl.row(r).norm() > 0.0);
  }
  CHECK(init_features(h, {1, 1}, 0).levels[0].cols() == 1);
  REQUIRE_THROWS_AS(init_features(h, {4}, 0), AssociationError);
  REQUIRE_THROWS_AS(init_features(h, {0, 4}, 0), AssociationError);
}

TEST_CASE("geometric seeding writes scaled positions and normals at level 0") {
  const TriMesh m = testsupport::make_tetrahedron();
  const PatchHierarchy h = build_hierarchy(m, {2}, 0);
  const FeatureField f = init_features(h, {4, 4}, 7, &m);
  REQUIRE(f.levels[0].cols() == 6);
  Eigen::MatrixXd g(4, 6);
  for (int v = 0; v < 4; ++v) {
    g.row(v).head<3>() = m.vertices[v].transpose();
    g.row(v).tail<3>() = m.vertex_normals[v].transpose();
  }
  g /= std::sqrt(g.squaredNorm() / g.size());
  CHECK((f.levels[0] - g).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("smoothers are row-stochastic and fix constants") {
  std::mt19937_64 rng(1);
  const TriMesh m = testsupport::make_random_mesh(rng, 6, 6, 0);
  const PatchHierarchy h = build_hierarchy(m, {9, 4}, 1);
  const auto smoothers = build_smoothers(h);
  for (int l = 0; l < h.num_levels(); ++l) {
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(h.level_sizes[l]);
    CHECK(((*smoothers[l]) * ones - ones).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("combined features: top level passes through, widths accumulate") {
  std::mt19937_64 rng(2);
  const TriMesh m = testsupport::make_random_mesh(rng, 6, 6, 0);
  const PatchHierarchy h = build_hierarchy(m, {9, 4}, 1);
  const FeatureField f = init_features(h, {3, 5, 7}, 2);
  const auto combined = combine_features(h, f, 0);
  CHECK(combined[2] == f.levels[2]);
  CHECK(combined[1].cols() == 5 + 7);
  CHECK(combined[0].cols() == 3 + 5 + 7);
  // Own block is carried unchanged when no smoothing is applied.
  CHECK((combined[0].leftCols(3) - f.levels[0]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("combined features equal a manual unpool-then-maxpool computation") {
  const TriMesh m = testsupport::make_tetrahedron();
  const PatchHierarchy h = build_hierarchy(m, {2}, 0);
  FeatureField f;
  f.levels.resize(2);
  f.levels[0] = Eigen::MatrixXd::Zero(4, 1);
  f.levels[0] << 1, 2, 3, 4;
  f.levels[1] = Eigen::MatrixXd::Zero(2, 2);
  f.levels[1] << 10, -1, 20, -2;
  const auto combined = combine_features(h, f, 0);
  const Eigen::MatrixXd manual = repool(h, 1, 0, f.levels[1]);
  CHECK(combined[0].rightCols(2) == manual);
  CHECK(combined[0].leftCols(1) == f.levels[0]);
}

TEST_CASE("constant fields stay constant through combination and smoothing") {
  std::mt19937_64 rng(3);
  const TriMesh m = testsupport::make_random_mesh(rng, 6, 6, 0);
  const PatchHierarchy h = build_hierarchy(m, {9, 4}, 1);
  FeatureField f;
  f.levels.resize(3);
  for (int l = 0; l < 3; ++l)
    f.levels[l] = Eigen::MatrixXd::Constant(h.level_sizes[l], 2, 0.5);
  const auto combined = combine_features(h, f, 2);
  for (int l = 0; l < 3; ++l)
    CHECK((combined[l].array() - 0.5).abs().maxCoeff() < 1e-12);
}

TEST_CASE("association rows are stochastic and direction-symmetric") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd a(5, 3), b(7, 3);
  for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = u(rng);
  for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = u(rng);

  const auto [fwd, rev] = associate(a, b, 1e-2);
  REQUIRE(fwd.rows() == 5);
  REQUIRE(rev.rows() == 7);
  for (Eigen::Index r = 0; r < fwd.rows(); ++r)
    CHECK(fwd.row(r).sum() == Catch::Approx(1.0).margin(1e-9));
  for (Eigen::Index r = 0; r < rev.rows(); ++r)
    CHECK(rev.row(r).sum() == Catch::Approx(1.0).margin(1e-9));
  CHECK(fwd.minCoeff() > 0.0);

  const auto [fwd_swapped, rev_swapped] = associate(b, a, 1e-2);
  CHECK((rev - fwd_swapped).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((fwd - rev_swapped).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("identical single-row features give the 1x1 identity association") {
  Eigen::MatrixXd a(1, 3);
  a << 0.3, -0.2, 0.9;
  const auto [fwd, rev] = associate(a, a, 1e-2);
  CHECK(fwd(0, 0) == 1.0);
  CHECK(rev(0, 0) == 1.0);
}

TEST_CASE("two-candidate softmax row matches the scalar formula") {
  // Similarities (1, 0) at tau = 1e-2: mass (1 - e^-100, e^-100).
  Eigen::MatrixXd a(1, 2), b(2, 2);
  a << 1, 0;
  b << 1, 0, 0, 1;
  const auto [fwd, rev] = associate(a, b, 1e-2);
  CHECK(fwd(0, 0) == Catch::Approx(1.0 - std::exp(-100.0)).epsilon(1e-12));
  CHECK(fwd(0, 1) == Catch::Approx(std::exp(-100.0)).epsilon(1e-9));
}

TEST_CASE("orthogonal equal-similarity candidates give a uniform row") {
  Eigen::MatrixXd a(1, 3), b(3, 3);
  a << 1, 0, 0;
  b << 0, 1, 0, 0, 0, 1, 0, 1, 0;
  const auto [fwd, rev] = associate(a, b, 1e-2);
  for (int j = 0; j < 3; ++j) CHECK(fwd(0, j) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("self association of orthonormal rows is near-identity; duplicates split mass") {
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(4, 4);
  const Eigen::MatrixXd pi = self_associate(eye, 1e-2);
  for (int i = 0; i < 4; ++i) CHECK(pi(i, i) > 1.0 - 1e-9);

  Eigen::MatrixXd dup(3, 2);
  dup << 1, 0, 1, 0, 0, 1;
  const Eigen::MatrixXd pd = self_associate(dup, 1e-2);
  CHECK(pd(0, 0) == Catch::Approx(pd(0, 1)).epsilon(1e-12));
  CHECK(pd(0, 0) == Catch::Approx(0.5).epsilon(1e-9));

  CHECK(self_associate(Eigen::MatrixXd::Constant(1, 1, 3.0), 1e-2)(0, 0) == 1.0);
}

TEST_CASE("point map extraction takes the row argmax with ties to the lowest index") {
  Eigen::MatrixXd pi(3, 3);
  pi << 0.2, 0.5, 0.3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 0.1, 0.1, 0.8;
  CHECK(extract_point_map(pi) == std::vector<int>{1, 0, 2});
}

TEST_CASE("point map is invariant to row scaling and temperature") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd a(6, 4), b(9, 4);
  for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = u(rng);
  for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = u(rng);

  const auto base = extract_point_map(associate(a, b, 1e-2).first);

  Eigen::MatrixXd scaled = a;
  for (Eigen::Index r = 0; r < scaled.rows(); ++r) scaled.row(r) *= 0.5 + 3.0 * (r + 1);
  CHECK(extract_point_map(associate(scaled, b, 1e-2).first) == base);

  for (double tau : {1e-3, 0.1, 7.0})
    CHECK(extract_point_map(associate(a, b, tau).first) == base);
}

TEST_CASE("association rejects mismatched widths and zero rows") {
  Tape t;
  const int a = t.constant(Eigen::MatrixXd::Ones(2, 3));
  const int b = t.constant(Eigen::MatrixXd::Ones(2, 4));
  REQUIRE_THROWS_AS(associate(t, a, b, 1e-2), AssociationError);
  REQUIRE_THROWS_AS(associate(Eigen::MatrixXd::Zero(2, 3), Eigen::MatrixXd::Ones(2, 3), 1e-2),
                    TapeError);
}

TEST_CASE("point map files round-trip and reject junk") {
  TempDir dir;
  const std::vector<int> map = {4, 0, 0, 7, 2};
  save_point_map(map, dir.file("map.txt"));
  CHECK(load_point_map(dir.file("map.txt")) == map);
  {
    std::ofstream out(dir.file("bad.txt"));
    out << "3\nnot-a-number\n";
  }
  REQUIRE_THROWS_AS(load_point_map(dir.file("bad.txt")), AssociationError);
  REQUIRE_THROWS_AS(load_point_map(dir.file("missing.txt")), AssociationError);
}
