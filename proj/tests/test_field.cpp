#include "helpers.hpp"

#include "p23d/field.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace p23d;
using namespace p23d::test;

namespace {

const Aabb kCube{{-1, -1, -1}, {1, 1, 1}};

VoxelField random_field(Rng &rng, Resolution res) {
  VoxelField f(res, kCube);
  for (double &r : f.raw_density_mut()) {
    r = rng.uniform(-4.0, 4.0);
  }
  for (double &l : f.latent_mut()) {
    l = rng.uniform(-1.0, 1.0);
  }
  return f;
}

FieldInit constant(double sigma0) {
  FieldInit init;
  init.sigma0 = sigma0;
  return init;
}

} // namespace

TEST_SUITE("field") {

TEST_CASE("constant init reproduces sigma0") {
  const VoxelField f = init_field({16, 16, 16}, kCube, constant(0.1));
  Rng rng(1);
  for (const Vec3 &p : random_points(rng, 200, -0.99, 0.99)) {
    CHECK(sample_sigma(f, p).sigma == doctest::Approx(0.1).epsilon(1e-5));
  }
  for (double l : f.latent()) {
    CHECK(l == 0.0);
  }
}

TEST_CASE("constant init honours density_scale") {
  const VoxelField f = init_field({8, 8, 8}, kCube, constant(3.0), 7.0);
  CHECK(sample_sigma(f, {0.1, 0.2, 0.3}).sigma == doctest::Approx(3.0));
}

TEST_CASE("blob init peaks at the center") {
  FieldInit init;
  init.mode = FieldInit::Mode::Blob;
  init.peak = 5.0;
  init.radius = 0.3;
  const VoxelField f = init_field({33, 33, 33}, kCube, init);
  CHECK(sample_sigma(f, {0, 0, 0}).sigma == doctest::Approx(5.0).epsilon(1e-9));
  CHECK(vertex_sigma(f, f.vertex_index(0, 0, 0)) < 0.05 * 5.0);
  CHECK(vertex_sigma(f, f.vertex_index(32, 32, 32)) < 0.05 * 5.0);
  // profile: peak * exp(-r^2 / (2 radius^2)) at a vertex
  const Vec3 p = f.vertex_position(20, 16, 16);
  CHECK(vertex_sigma(f, f.vertex_index(20, 16, 16)) ==
        doctest::Approx(5.0 * std::exp(-dot(p, p) / (2 * 0.09))).epsilon(1e-9));
}

TEST_CASE("smallest grid") {
  const VoxelField f = init_field({2, 2, 2}, kCube, constant(0.5));
  REQUIRE(f.vertex_count() == 8);
  for (double r : f.raw_density()) {
    CHECK(r == f.raw_density()[0]);
  }
}

TEST_CASE("init rejects negative sigma0 and tiny grids") {
  CHECK_THROWS_AS(init_field({8, 8, 8}, kCube, constant(-0.1)), Error);
  CHECK_THROWS_AS(init_field({1, 8, 8}, kCube, constant(0.1)), Error);
}

TEST_CASE("interpolation at a vertex and at a cell center") {
  Rng rng(4);
  VoxelField f = random_field(rng, {5, 5, 5});
  const Vec3 v = f.vertex_position(2, 3, 1);
  const SigmaSample s = sample_sigma(f, v);
  const std::uint32_t vi = f.vertex_index(2, 3, 1);
  CHECK(s.sigma == doctest::Approx(softplus(f.raw_density()[vi])));
  double weight_on_vertex = 0.0;
  for (int c = 0; c < 8; ++c) {
    if (s.stencil.index[c] == vi) {
      weight_on_vertex += s.stencil.weight[c];
    }
  }
  CHECK(weight_on_vertex == doctest::Approx(1.0));

  const LatentSample l = sample_latent(f, v);
  for (int c = 0; c < kLatentChannels; ++c) {
    CHECK(l.value[c] == doctest::Approx(f.latent()[vi * kLatentChannels + c]));
  }

  const VoxelField k = init_field({5, 5, 5}, kCube, constant(0.7));
  CHECK(sample_sigma(k, {0.25, 0.25, 0.25}).sigma == doctest::Approx(0.7));
}

TEST_CASE("constant latent reproduces itself") {
  VoxelField f(Resolution{6, 6, 6}, kCube);
  auto lat = f.latent_mut();
  for (std::size_t v = 0; v < f.vertex_count(); ++v) {
    for (int c = 0; c < kLatentChannels; ++c) {
      lat[v * kLatentChannels + c] = 0.5 * c - 0.3;
    }
  }
  Rng rng(2);
  for (const Vec3 &p : random_points(rng, 50, -0.99, 0.99)) {
    const LatentSample s = sample_latent(f, p);
    for (int c = 0; c < kLatentChannels; ++c) {
      CHECK(s.value[c] == doctest::Approx(0.5 * c - 0.3));
    }
  }
}

TEST_CASE("stencil weights are a partition of unity") {
  Rng rng(5);
  const VoxelField f = random_field(rng, {7, 9, 5});
  for (const Vec3 &p : random_points(rng, 300)) {
    const Stencil s = f.stencil(p);
    REQUIRE(s.valid);
    double sum = 0.0;
    for (double w : s.weight) {
      CHECK(w >= 0.0);
      CHECK(w <= 1.0);
      sum += w;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("sigma is non-negative for any raw value") {
  VoxelField f(Resolution{2, 2, 2}, kCube);
  for (double raw : {-800.0, -40.0, -1.0, 0.0, 1.0, 40.0, 800.0}) {
    for (double &r : f.raw_density_mut()) {
      r = raw;
    }
    const double s = sample_sigma(f, {0.1, 0.1, 0.1}).sigma;
    CHECK(s >= 0.0);
    CHECK(std::isfinite(s));
  }
}

TEST_CASE("sampling is continuous across cell faces") {
  Rng rng(8);
  const VoxelField f = random_field(rng, {6, 6, 6});
  const double face = f.vertex_position(2, 0, 0).x;
  for (int t = 0; t < 50; ++t) {
    const double y = rng.uniform(-0.9, 0.9), z = rng.uniform(-0.9, 0.9);
    const Vec3 a{face - 1e-9, y, z}, b{face + 1e-9, y, z};
    CHECK(std::abs(sample_sigma(f, a).sigma - sample_sigma(f, b).sigma) < 1e-6);
    const Latent la = sample_latent(f, a).value, lb = sample_latent(f, b).value;
    for (int c = 0; c < kLatentChannels; ++c) {
      CHECK(std::abs(la[c] - lb[c]) < 1e-6);
    }
  }
}

TEST_CASE("outside the bounds is empty and carries no gradient") {
  Rng rng(3);
  const VoxelField f = random_field(rng, {4, 4, 4});
  for (const Vec3 &p : {Vec3{1.0001, 0, 0}, Vec3{0, -1.5, 0}, Vec3{0, 0, 7}}) {
    const SigmaSample s = sample_sigma(f, p);
    CHECK(s.sigma == 0.0);
    CHECK(s.dsigma_draw == 0.0);
    CHECK_FALSE(s.stencil.valid);
    const LatentSample l = sample_latent(f, p);
    CHECK(l.value == Latent{});
  }
}

TEST_CASE("mutable access bumps the version") {
  VoxelField f(Resolution{3, 3, 3}, kCube);
  const auto v0 = f.version();
  f.raw_density_mut();
  CHECK(f.version() > v0);
  const auto v1 = f.version();
  f.background_mut();
  CHECK(f.version() > v1);
  const VoxelField copy = f;
  CHECK(copy.id() != f.id());
}

TEST_CASE("gradient containers") {
  VoxelField f(Resolution{3, 3, 3}, kCube);
  FieldGradients a(f), b(f);
  CHECK(a.compatible(f));
  a.raw_density[4] = 2.0;
  b.raw_density[4] = 1.0;
  b.latent[3] = -3.0;
  b.background[1] = 0.5;
  a.axpy(2.0, b);
  CHECK(a.raw_density[4] == 4.0);
  CHECK(a.latent[3] == -6.0);
  CHECK(a.background[1] == 1.0);
  a.scale(0.5);
  CHECK(a.raw_density[4] == 2.0);
  CHECK(a.norm() == doctest::Approx(std::sqrt(4.0 + 9.0 + 0.25)));
  CHECK(a.all_finite());
  a.latent[0] = std::nan("");
  CHECK_FALSE(a.all_finite());
  a.zero();
  CHECK(a.norm() == 0.0);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(12);
  VoxelField f(Resolution{5, 4, 3}, Aabb{{-1, -2, -0.5}, {1, 2, 0.5}}, 3.25);
  for (double &r : f.raw_density_mut()) {
    r = static_cast<float>(rng.uniform(-3, 3));
  }
  for (double &l : f.latent_mut()) {
    l = static_cast<float>(rng.uniform(-1, 1));
  }
  f.background_mut() = {0.25, -0.5, 0.75, 1.0};
  const auto path = scratch_dir("field_ckpt") + "/f.p23d";
  save_checkpoint(f, path);
  const VoxelField g = load_checkpoint(path);
  CHECK(g.resolution() == f.resolution());
  CHECK(g.bounds().lo == f.bounds().lo);
  CHECK(g.bounds().hi == f.bounds().hi);
  CHECK(g.density_scale() == f.density_scale());
  CHECK(std::equal(g.raw_density().begin(), g.raw_density().end(), f.raw_density().begin()));
  CHECK(std::equal(g.latent().begin(), g.latent().end(), f.latent().begin()));
  CHECK(g.background() == f.background());

  // no temporary is left behind
  for (const auto &e : std::filesystem::directory_iterator(std::filesystem::path(path).parent_path())) {
    CHECK(e.path().filename() == "f.p23d");
  }

  // a truncated file is rejected
  std::filesystem::resize_file(path, 40);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::ofstream(path) << "P23X";
  CHECK_THROWS_AS(load_checkpoint(path), Error);
}

} // TEST_SUITE
