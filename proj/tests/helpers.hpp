#pragma once

#include "p23d/common.hpp"
#include "p23d/pointcloud.hpp"
#include "p23d/spatial.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace p23d::test {

inline std::string fixture(const std::string &name) { return std::string(P23D_FIXTURES) + "/" + name; }

/// Fresh, empty scratch directory under the build tree.
inline std::string scratch_dir(const std::string &name) {
  const std::filesystem::path dir = std::filesystem::path(P23D_SCRATCH) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline std::vector<Vec3> random_points(Rng &rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<Vec3> p(n);
  for (auto &v : p) {
    v = {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
  }
  return p;
}

inline std::vector<Vec3> sphere_points(Rng &rng, std::size_t n, double radius) {
  std::vector<Vec3> p(n);
  for (auto &v : p) {
    v = normalize(Vec3{rng.normal(), rng.normal(), rng.normal()}) * radius;
  }
  return p;
}

/// O(N) scan with the index's summation order and lowest-index tie break.
inline Neighbor brute_nearest(const std::vector<Vec3> &pts, const Vec3 &q) {
  Neighbor best;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = q.x - pts[i].x, dy = q.y - pts[i].y, dz = q.z - pts[i].z;
    const Neighbor c{dx * dx + dy * dy + dz * dz, static_cast<std::uint32_t>(i)};
    if (c < best) {
      best = c;
    }
  }
  return best;
}

} // namespace p23d::test
