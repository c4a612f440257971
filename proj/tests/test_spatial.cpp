#include "helpers.hpp"

#include "p23d/spatial.hpp"

#include <doctest.h>

#include <algorithm>

using namespace p23d;
using namespace p23d::test;

TEST_SUITE("spatial") {

TEST_CASE("singleton index answers every query with its point") {
  const std::vector<Vec3> pts{{0.25, -0.5, 1.0}};
  const NearestNeighborIndex idx(pts);
  Rng rng(1);
  for (const Vec3 &q : random_points(rng, 50, -3, 3)) {
    const Neighbor n = idx.nearest(q);
    CHECK(n.index == 0);
    CHECK(n.dist_sq == brute_nearest(pts, q).dist_sq);
  }
}

TEST_CASE("empty cloud is rejected") {
  CHECK_THROWS_AS(build_index(PointCloud{}), Error);
}

TEST_CASE("distance examples") {
  const std::vector<Vec3> pts{{0, 0, 0}, {2, 0, 0}};
  const NearestNeighborIndex idx(pts);
  const std::vector<Vec3> q{{0.9, 0, 0}, {2, 0, 0}};
  const DistanceBatch d = nearest_distance_batch(idx, q);
  CHECK(d.distances[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(d.distances[1] == 0.0);
}

TEST_CASE("random instances equal brute force exactly") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 1000);
    const auto pts = random_points(rng, n);
    const auto queries = random_points(rng, 1000, -1.2, 1.2);
    const NearestNeighborIndex idx(pts);
    const DistanceBatch d = nearest_distance_batch(idx, queries);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const Neighbor b = brute_nearest(pts, queries[i]);
      const Neighbor k = idx.nearest(queries[i]);
      REQUIRE(k.index == b.index);
      REQUIRE(k.dist_sq == b.dist_sq);
      REQUIRE(d.distances[i] == std::sqrt(b.dist_sq));
    }
  }
}

TEST_CASE("ties go to the lowest index") {
  // lattice points give many exactly equidistant candidates
  std::vector<Vec3> pts;
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      for (int k = 0; k < 6; ++k) {
        pts.push_back({0.25 * i, 0.25 * j, 0.25 * k});
      }
    }
  }
  std::vector<Vec3> dup = pts;
  pts.insert(pts.end(), dup.begin(), dup.end());
  const NearestNeighborIndex idx(pts);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      const Vec3 q{0.125 + 0.25 * i, 0.125 + 0.25 * j, 0.5};
      const Neighbor b = brute_nearest(pts, q);
      const Neighbor k = idx.nearest(q);
      REQUIRE(k.index == b.index);
      REQUIRE(k.dist_sq == b.dist_sq);
      CHECK(k.index < 216);
    }
  }
}

TEST_CASE("knn matches a sorted brute-force scan") {
  Rng rng(9);
  const auto pts = random_points(rng, 700);
  const NearestNeighborIndex idx(pts);
  for (const Vec3 &q : random_points(rng, 60)) {
    std::vector<Neighbor> all;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double dx = q.x - pts[i].x, dy = q.y - pts[i].y, dz = q.z - pts[i].z;
      all.push_back({dx * dx + dy * dy + dz * dz, static_cast<std::uint32_t>(i)});
    }
    std::sort(all.begin(), all.end());
    const auto got = idx.knn(q, 20);
    REQUIRE(got.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
      REQUIRE(got[i].index == all[i].index);
      REQUIRE(got[i].dist_sq == all[i].dist_sq);
    }
    // excluding the nearest shifts the list by one
    const auto skip = idx.knn(q, 5, all[0].index);
    for (std::size_t i = 0; i < 5; ++i) {
      REQUIRE(skip[i].index == all[i + 1].index);
    }
  }
  CHECK(idx.knn({0, 0, 0}, 1000).size() == 700);
  CHECK(idx.knn({0, 0, 0}, 0).empty());
}

TEST_CASE("bounded query agrees with the exact one inside the bound") {
  Rng rng(21);
  const auto pts = random_points(rng, 500);
  const NearestNeighborIndex idx(pts);
  const double r = 0.1;
  const auto queries = random_points(rng, 2000, -1.5, 1.5);
  const DistanceBatch exact = nearest_distance_batch(idx, queries);
  const DistanceBatch bounded = nearest_distance_batch(idx, queries, r);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (exact.distances[i] <= r) {
      REQUIRE(bounded.distances[i] == exact.distances[i]);
      REQUIRE(idx.nearest_within(queries[i], r * r).index == idx.nearest(queries[i]).index);
    } else {
      REQUIRE(std::isinf(bounded.distances[i]));
      REQUIRE(idx.nearest_within(queries[i], r * r).index == NearestNeighborIndex::kNoIndex);
    }
  }
}

TEST_CASE("adding a point never increases a distance") {
  Rng rng(4);
  auto pts = random_points(rng, 300);
  const auto queries = random_points(rng, 500);
  const DistanceBatch before = nearest_distance_batch(NearestNeighborIndex(pts), queries);
  pts.push_back({0.1, 0.1, 0.1});
  const DistanceBatch after = nearest_distance_batch(NearestNeighborIndex(pts), queries);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    CHECK(after.distances[i] <= before.distances[i]);
  }
}

TEST_CASE("results do not depend on the thread count") {
  Rng rng(77);
  const auto pts = random_points(rng, 5000);
  const auto queries = random_points(rng, 20000);
  const NearestNeighborIndex idx(pts);
  set_thread_count(1);
  const DistanceBatch one = nearest_distance_batch(idx, queries);
  set_thread_count(4);
  const DistanceBatch four = nearest_distance_batch(idx, queries);
  set_thread_count(0);
  CHECK(one.distances == four.distances);
}

TEST_CASE("normalize distances") {
  const Aabb box{{-1, -1, -1}, {1, 1, 1}};
  const DistanceBatch d{{0.0, 1.0, 0.05}};
  const DistanceBatch n = normalize_distances(d, box);
  CHECK(n.distances[0] == 0.0);
  CHECK(n.distances[1] == 1.0);
  CHECK(n.distances[2] == doctest::Approx(0.05));
  CHECK(1.0 - n.distances[2] == doctest::Approx(0.95));

  // the largest axis sets the scale
  const DistanceBatch m = normalize_distances(DistanceBatch{{1.0}}, Aabb{{0, 0, 0}, {4, 1, 1}});
  CHECK(m.distances[0] == doctest::Approx(0.5));

  // linear in D
  const DistanceBatch scaled = normalize_distances(DistanceBatch{{0.0, 3.0, 0.15}}, box);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(scaled.distances[i] == doctest::Approx(3.0 * n.distances[i]));
  }

  CHECK_THROWS_AS(normalize_distances(d, Aabb{{1, 1, 1}, {1, 1, 1}}), Error);
}

} // TEST_SUITE
