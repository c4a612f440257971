#include "helpers.hpp"

#include "p23d/meshout.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace p23d;
using namespace p23d::test;

namespace {

const Aabb kCube{{-1, -1, -1}, {1, 1, 1}};

std::vector<double> grid_values(const Resolution &res, const Aabb &box, const std::function<double(Vec3)> &f) {
  std::vector<double> v(static_cast<std::size_t>(res[0]) * res[1] * res[2]);
  const Vec3 e = box.extent();
  for (int k = 0; k < res[2]; ++k) {
    for (int j = 0; j < res[1]; ++j) {
      for (int i = 0; i < res[0]; ++i) {
        const Vec3 p{box.lo.x + e.x * i / (res[0] - 1), box.lo.y + e.y * j / (res[1] - 1),
                     box.lo.z + e.z * k / (res[2] - 1)};
        v[i + res[0] * (j + static_cast<std::size_t>(res[1]) * k)] = f(p);
      }
    }
  }
  return v;
}

void check_closed_manifold(const TriangleMesh &m) {
  const MeshTopology t = mesh_topology(m);
  CHECK(t.boundary_edges == 0);
  CHECK(t.nonmanifold_edges == 0);
}

TriangleMesh unit_cube() {
  TriangleMesh m;
  for (int i = 0; i < 8; ++i) {
    m.vertices.push_back({static_cast<double>(i & 1), static_cast<double>((i >> 1) & 1),
                          static_cast<double>((i >> 2) & 1)});
  }
  const std::array<std::array<std::uint32_t, 4>, 6> quads{{
      {0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5},
  }};
  for (const auto &q : quads) {
    m.triangles.push_back({q[0], q[1], q[2]});
    m.triangles.push_back({q[0], q[2], q[3]});
  }
  return m;
}

std::vector<Vec3> plane_grid(int n, double z) {
  std::vector<Vec3> p;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      p.push_back({i * 0.1, j * 0.1, z});
    }
  }
  return p;
}

} // namespace

TEST_SUITE("meshout") {

TEST_CASE("an empty field has no surface") {
  const VoxelField f = init_field({8, 8, 8}, kCube, FieldInit{});
  CHECK(marching_cubes(f, default_iso(f)).empty());
  CHECK(default_iso(f) == doctest::Approx(std::log(2.0) / f.voxel_edge()));
}

TEST_CASE("analytic sphere") {
  const Resolution res{128, 128, 128};
  const double r = 0.6;
  const auto v = grid_values(res, kCube, [&](Vec3 p) { return 1.0 + r - length(p); });
  TriangleMesh m = marching_cubes(v, res, kCube, 1.0);
  const double edge = 2.0 / 127.0;
  REQUIRE_FALSE(m.empty());
  for (const Vec3 &p : m.vertices) {
    REQUIRE(std::abs(length(p) - r) <= 2 * edge);
  }
  check_closed_manifold(m);
  CHECK(mesh_topology(m).euler() == 2);
  const double pi = std::acos(-1.0);
  CHECK(signed_volume(m) == doctest::Approx(4.0 / 3.0 * pi * r * r * r).epsilon(0.01));
  CHECK(surface_area(m) == doctest::Approx(4.0 * pi * r * r).epsilon(0.01));

  compute_normals(m);
  REQUIRE(m.normals.size() == m.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); i += 97) {
    CHECK(dot(m.normals[i], normalize(m.vertices[i])) > 0.99);
  }

  // surface samples lie on the sphere and follow the seed
  const auto s = sample_surface(m, 5000, 3);
  for (const Vec3 &p : s) {
    CHECK(std::abs(length(p) - r) <= 2 * edge);
  }
  CHECK(sample_surface(m, 5000, 3) == s);
  CHECK(sample_surface(m, 5000, 4) != s);
}

TEST_CASE("a single inside vertex gives a closed surface") {
  const Resolution res{5, 5, 5};
  std::vector<double> v(125, 0.0);
  v[2 + 5 * (2 + 5 * 2)] = 1.0;
  const TriangleMesh m = marching_cubes(v, res, kCube, 0.5);
  CHECK(m.triangles.size() == 8);
  CHECK(m.vertices.size() == 6);
  check_closed_manifold(m);
  CHECK(mesh_topology(m).euler() == 2);
  CHECK(signed_volume(m) > 0.0);

  // at the grid corner the surface closes against the empty outside
  std::vector<double> c(125, 0.0);
  c[0] = 1.0;
  const TriangleMesh mc = marching_cubes(c, res, kCube, 0.5);
  check_closed_manifold(mc);
  CHECK(signed_volume(mc) > 0.0);
}

TEST_CASE("random fields give closed manifolds") {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const Resolution res{6, 5, 7};
    std::vector<double> v(6 * 5 * 7);
    for (double &x : v) {
      x = rng.uniform();
      // exact iso hits exercise zero-area triangles
      if (trial % 3 == 0 && rng.uniform() < 0.2) {
        x = 0.5;
      }
    }
    const TriangleMesh m = marching_cubes(v, res, kCube, 0.5);
    check_closed_manifold(m);
    CHECK(signed_volume(m) > 0.0);
  }
}

TEST_CASE("checkerboard components") {
  // isolated inside vertices on a checkerboard each become one sphere
  const Resolution res{6, 6, 6};
  std::vector<double> v(216, 0.0);
  std::size_t inside = 0;
  for (int k = 1; k < 5; k += 2) {
    for (int j = 1; j < 5; j += 2) {
      for (int i = 1; i < 5; i += 2) {
        v[i + 6 * (j + 6 * k)] = 1.0;
        ++inside;
      }
    }
  }
  const TriangleMesh m = marching_cubes(v, res, kCube, 0.5);
  check_closed_manifold(m);
  CHECK(mesh_topology(m).euler() == static_cast<long long>(2 * inside));
}

TEST_CASE("obj and ply round trips") {
  const auto dir = scratch_dir("mesh_io");
  TriangleMesh cube = unit_cube();
  CHECK(signed_volume(cube) == doctest::Approx(1.0));
  for (const std::string name : {"cube.obj", "cube.ply"}) {
    export_mesh(cube, dir + "/" + name);
    const TriangleMesh back = load_mesh(dir + "/" + name);
    CHECK(back.vertices == cube.vertices);
    CHECK(back.triangles == cube.triangles);
    CHECK(back.normals.empty());
  }
  compute_normals(cube);
  for (const std::string name : {"cube_n.obj", "cube_n.ply"}) {
    export_mesh(cube, dir + "/" + name);
    const TriangleMesh back = load_mesh(dir + "/" + name);
    CHECK(back.triangles == cube.triangles);
    REQUIRE(back.normals.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(length(back.normals[i] - cube.normals[i]) < 1e-6);
    }
  }
  CHECK(mesh_format_for("a.OBJ") == MeshFormat::Obj);
  CHECK_THROWS_AS(mesh_format_for("a.stl"), Error);

  // plain OBJ with slashes, quads and negative indices
  std::ofstream(dir + "/quad.obj") << "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1 -1/1\n";
  const TriangleMesh quad = load_mesh(dir + "/quad.obj");
  CHECK(quad.triangles.size() == 2);
  CHECK(surface_area(quad) == doctest::Approx(1.0));
  std::ofstream(dir + "/bad.obj") << "v 0 0 0\nf 1 2 3\n";
  CHECK_THROWS_AS(load_mesh(dir + "/bad.obj"), Error);
}

TEST_CASE("binary ply size") {
  const auto dir = scratch_dir("mesh_ply_size");
  TriangleMesh m;
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n + 2; ++i) {
    m.vertices.push_back({static_cast<double>(i), static_cast<double>(i % 7), 0.0});
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    m.triangles.push_back({i, i + 1, i + 2});
  }
  const std::string path = dir + "/big.ply";
  export_mesh(m, path);
  std::ifstream in(path, std::ios::binary);
  const std::string bytes{std::istreambuf_iterator<char>(in), {}};
  const std::size_t header = bytes.find("end_header\n") + 11;
  CHECK(bytes.size() == header + (n + 2) * 12 + n * 13);
  CHECK(load_mesh(path).triangles.size() == n);
}

TEST_CASE("chamfer and f-score examples") {
  const auto a = plane_grid(20, 0.0);
  const GeometryScore same = chamfer_and_fscore(a, a, 0.01);
  CHECK(same.chamfer == 0.0);
  CHECK(same.fscore == 1.0);

  const double d = 0.02;
  const auto b = plane_grid(20, d);
  const GeometryScore shifted = chamfer_and_fscore(a, b, 0.05);
  CHECK(shifted.chamfer == doctest::Approx(2 * d));
  CHECK(shifted.fscore == 1.0);
  // matches are strictly below tau
  CHECK(chamfer_and_fscore(a, b, d).fscore == 0.0);

  const auto far = plane_grid(5, 10.0);
  CHECK(chamfer_and_fscore(a, far, 0.5).fscore == 0.0);

  Rng rng(8);
  const auto p = random_points(rng, 300), q = random_points(rng, 500);
  const GeometryScore pq = chamfer_and_fscore(p, q, 0.15), qp = chamfer_and_fscore(q, p, 0.15);
  CHECK(pq.chamfer == doctest::Approx(qp.chamfer).epsilon(1e-12));
  CHECK(pq.precision == qp.recall);
  CHECK(pq.recall == qp.precision);
  CHECK(pq.fscore == doctest::Approx(qp.fscore));

  CHECK_THROWS_AS(chamfer_and_fscore({}, a, 0.1), Error);
}

} // TEST_SUITE
