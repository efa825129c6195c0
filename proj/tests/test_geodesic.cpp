#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>

#include "patchmatch/geodesic.hpp"
#include "test_support.hpp"

using namespace patchmatch;
using testsupport::TempDir;

namespace {

EdgeGraph graph_from_edges(int nv, const std::vector<std::tuple<int, int, double>>& edges) {
  std::vector<std::vector<std::pair<int, double>>> adj(nv);
  for (const auto& [a, b, w] : edges) {
    adj[a].push_back({b, w});
    adj[b].push_back({a, w});
  }
  EdgeGraph g;
  g.offset.resize(nv + 1, 0);
  for (int v = 0; v < nv; ++v) g.offset[v + 1] = g.offset[v] + static_cast<int>(adj[v].size());
  for (int v = 0; v < nv; ++v)
    for (const auto& [u, w] : adj[v]) {
      g.neighbor.push_back(u);
      g.weight.push_back(w);
    }
  return g;
}

EdgeGraph unit_path(int nv) {
  std::vector<std::tuple<int, int, double>> edges;
  for (int v = 0; v + 1 < nv; ++v) edges.push_back({v, v + 1, 1.0});
  return graph_from_edges(nv, edges);
}

}  // namespace

TEST_CASE("single source on a unit path") {
  const EdgeGraph g = unit_path(5);
  const DistanceMap dm = single_source(g, 0);
  REQUIRE(dm.dist == std::vector<double>{0, 1, 2, 3, 4});
}

TEST_CASE("single source on the tetrahedron is 1 everywhere else") {
  const TriMesh m = testsupport::make_tetrahedron();
  // Equilateral edges are not all unit here; use the regular one via graph.
  const EdgeGraph g(m);
  for (int s = 0; s < 4; ++s) {
    const DistanceMap dm = single_source(g, s);
    CHECK(dm.dist[s] == 0.0);
    for (int v = 0; v < 4; ++v)
      if (v != s) CHECK(dm.dist[v] > 0.0);
  }
}

TEST_CASE("Dijkstra satisfies edge relaxation optimality") {
  std::mt19937_64 rng(7);
  const TriMesh m = testsupport::make_random_mesh(rng, 8, 8, 4);
  const EdgeGraph g(m);
  const DistanceMap dm = single_source(g, 13);
  for (int v = 0; v < g.num_vertices(); ++v)
    for (int e = g.offset[v]; e < g.offset[v + 1]; ++e)
      CHECK(dm.dist[g.neighbor[e]] <= dm.dist[v] + g.weight[e] + 1e-12);
}

TEST_CASE("Dijkstra equals Bellman-Ford on a 10x10 grid") {
  std::mt19937_64 rng(11);
  const TriMesh m = testsupport::make_random_mesh(rng, 10, 10, 0);
  const EdgeGraph g(m);
  for (int s : {0, 17, 42, 99}) {
    const DistanceMap dm = single_source(g, s);
    REQUIRE(dm.dist == testsupport::bellman_ford(g, s));
  }
}

TEST_CASE("single source rejects bad sources and disconnected graphs") {
  const EdgeGraph g = unit_path(5);
  REQUIRE_THROWS_AS(single_source(g, -1), GeodesicError);
  REQUIRE_THROWS_AS(single_source(g, 5), GeodesicError);
  const EdgeGraph split =
      graph_from_edges(4, {{0, 1, 1.0}, {2, 3, 1.0}});
  REQUIRE_THROWS_AS(single_source(split, 0), GeodesicError);
}

TEST_CASE("geodesic diameter of the unit path is its length") {
  CHECK(geodesic_diameter(unit_path(5), 5) == 4.0);
  CHECK(geodesic_diameter(unit_path(5), 1) == 4.0);  // source 0 already sees 4
}

TEST_CASE("sampled diameter at full budget equals the all-pairs maximum") {
  std::mt19937_64 rng(3);
  const TriMesh m = testsupport::make_random_mesh(rng, 6, 6, 2);
  const EdgeGraph g(m);
  const auto all = testsupport::floyd_warshall(g);
  double max_d = 0.0;
  for (const auto& row : all)
    for (double d : row) max_d = std::max(max_d, d);
  CHECK(geodesic_diameter(g, g.num_vertices()) == Catch::Approx(max_d).epsilon(1e-12));
}

TEST_CASE("center matrix is symmetric, zero-diagonal, and matches per-source maps") {
  std::mt19937_64 rng(5);
  const TriMesh m = testsupport::make_random_mesh(rng, 5, 5, 0);
  const std::vector<int> centers = {0, 7, 24};
  const DistanceMatrix dm = center_matrix(m, centers, Normalization::none);
  REQUIRE(dm.values.rows() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(dm.values(i, i) == 0.0);
    const auto map = single_source(m, centers[i]);
    for (int j = 0; j < 3; ++j) {
      CHECK(dm.values(i, j) == dm.values(j, i));
      CHECK(dm.values(i, j) == Catch::Approx(map.dist[centers[j]]).epsilon(1e-12));
    }
  }
}

TEST_CASE("one center gives a 1x1 zero matrix") {
  const TriMesh m = testsupport::make_tetrahedron();
  const DistanceMatrix dm = center_matrix(m, {2}, Normalization::sqrt_area);
  REQUIRE(dm.values.rows() == 1);
  CHECK(dm.values(0, 0) == 0.0);
}

TEST_CASE("sqrt-area normalization is invariant to uniform scaling") {
  std::mt19937_64 rng(9);
  const TriMesh m = testsupport::make_random_mesh(rng, 5, 4, 0);
  TriMesh scaled = m;
  for (auto& v : scaled.vertices) v *= 3.7;
  scaled = validate_mesh(std::move(scaled));
  const std::vector<int> centers = {1, 9, 18};
  const DistanceMatrix a = center_matrix(m, centers, Normalization::sqrt_area);
  const DistanceMatrix b = center_matrix(scaled, centers, Normalization::sqrt_area);
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("normalization names round-trip") {
  for (auto n : {Normalization::sqrt_area, Normalization::geodesic_diameter, Normalization::none})
    CHECK(normalization_from_name(normalization_name(n)) == n);
  CHECK(normalization_from_name("diameter") == Normalization::geodesic_diameter);
  REQUIRE_THROWS_AS(normalization_from_name("bogus"), GeodesicError);
}

TEST_CASE("distance matrix cache round-trips bit-exactly") {
  std::mt19937_64 rng(2);
  const TriMesh m = testsupport::make_random_mesh(rng, 5, 5, 0);
  const std::vector<int> centers = {3, 11, 19, 24};
  const DistanceMatrix dm = center_matrix(m, centers, Normalization::sqrt_area);
  TempDir dir;
  const std::string path = dir.file("d.pmdm");
  store_distance_matrix(dm, 25, path);
  const DistanceMatrix back = load_distance_matrix(path, 25, centers, centers);
  CHECK(back.values == dm.values);
  CHECK(back.normalization == dm.normalization);
}

TEST_CASE("cache refuses to load against a different mesh or center set") {
  const TriMesh m = testsupport::make_tetrahedron();
  const std::vector<int> centers = {0, 2};
  const DistanceMatrix dm = center_matrix(m, centers, Normalization::none);
  TempDir dir;
  const std::string path = dir.file("d.pmdm");
  store_distance_matrix(dm, 4, path);
  REQUIRE_THROWS_WITH(load_distance_matrix(path, 5, centers, centers),
                      Catch::Matchers::ContainsSubstring("vertices"));
  REQUIRE_THROWS_WITH(load_distance_matrix(path, 4, {0, 3}, {0, 3}),
                      Catch::Matchers::ContainsSubstring("hash"));
  REQUIRE_THROWS_AS(load_distance_matrix(dir.file("missing.pmdm"), 4, centers, centers),
                    GeodesicError);
}

TEST_CASE("cache rejects files that are not PMDM") {
  TempDir dir;
  const std::string path = dir.file("junk.pmdm");
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a cache";
  }
  REQUIRE_THROWS_WITH(load_distance_matrix(path, 4, {0}, {0}),
                      Catch::Matchers::ContainsSubstring("PMDM"));
}
