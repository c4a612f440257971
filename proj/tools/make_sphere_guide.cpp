// Writes a guide cloud of points drawn uniformly on a sphere.
//
//   make_sphere_guide <out.ply> [count=4096] [radius=0.6] [seed=2024]

#include "p23d/pointcloud.hpp"

#include <cstdlib>
#include <iostream>

int main(int argc, char **argv) {
  if (argc < 2 || argc > 5) {
    std::cerr << "usage: make_sphere_guide <out.ply> [count] [radius] [seed]\n";
    return 1;
  }
  const long count = argc > 2 ? std::strtol(argv[2], nullptr, 10) : 4096;
  const double radius = argc > 3 ? std::strtod(argv[3], nullptr) : 0.6;
  const auto seed = argc > 4 ? std::strtoull(argv[4], nullptr, 10) : 2024ull;
  p23d::Rng rng(seed);
  p23d::PointCloud pc;
  for (long i = 0; i < count; ++i) {
    const p23d::Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    pc.points.push_back(p23d::normalize(d) * radius);
  }
  try {
    p23d::save_point_cloud(pc, argv[1]);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
