#include "p23d/gradcheck.hpp"

#include "p23d/field.hpp"
#include "p23d/geomloss.hpp"
#include "p23d/render.hpp"

#include <algorithm>
#include <cmath>

namespace p23d {

namespace {

constexpr double kStep = 1e-5;
constexpr double kPointwiseTol = 1e-6;
constexpr double kCompositionTol = 1e-5;
constexpr double kRenderTol = 1e-4;

VoxelField random_field(Rng &rng, Resolution res, double density_scale) {
  VoxelField f(res, Aabb{{-1, -1, -1}, {1, 1, 1}}, density_scale);
  for (double &r : f.raw_density_mut()) {
    r = rng.uniform(-3.0, 1.5);
  }
  for (double &l : f.latent_mut()) {
    l = rng.uniform(-1.0, 1.0);
  }
  for (double &b : f.background_mut()) {
    b = rng.uniform(-1.0, 1.0);
  }
  return f;
}

Vec3 random_interior_point(Rng &rng) {
  return {rng.uniform(-0.95, 0.95), rng.uniform(-0.95, 0.95), rng.uniform(-0.95, 0.95)};
}

void accumulate(GradCheckResult &r, std::span<const double> analytic, std::span<const double> numeric) {
  r.max_rel_error = std::max(r.max_rel_error, gradient_relative_error(analytic, numeric));
  r.checked += analytic.size();
}

OccupancyTarget random_targets(Rng &rng, std::size_t n) {
  OccupancyTarget t;
  t.labels.resize(n);
  t.values.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    if (u < 0.4) {
      t.labels[i] = OccupancyLabel::Soft;
      t.values[i] = rng.uniform(0.95, 1.0);
      ++t.soft_count;
    } else if (u < 0.8) {
      t.labels[i] = OccupancyLabel::Zero;
      ++t.zero_count;
    } else {
      t.labels[i] = OccupancyLabel::Ignore;
      ++t.ignore_count;
    }
  }
  return t;
}

} // namespace

double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nb += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom > 0.0 ? std::sqrt(diff) / denom : 0.0;
}

std::vector<double> central_differences(std::span<double> x, double h, const std::function<double()> &f) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f();
    x[i] = x0 - h;
    const double fm = f();
    x[i] = x0;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

GradCheckResult check_sample_sigma(std::uint64_t seed) {
  GradCheckResult r{"sample_sigma", 0, 0.0, kPointwiseTol};
  Rng rng(seed ^ 0x51);
  for (int trial = 0; trial < 32; ++trial) {
    VoxelField f = random_field(rng, {5, 6, 7}, rng.uniform(0.5, 4.0));
    const Vec3 p = random_interior_point(rng);
    const SigmaSample s = sample_sigma(f, p);
    std::vector<double> raw(f.raw_density().begin(), f.raw_density().end());
    std::vector<double> local(8), analytic(8);
    for (int v = 0; v < 8; ++v) {
      local[v] = raw[s.stencil.index[v]];
      analytic[v] = s.stencil.weight[v] * s.dsigma_draw;
    }
    auto eval = [&] {
      auto dst = f.raw_density_mut();
      for (int v = 0; v < 8; ++v) {
        dst[s.stencil.index[v]] = local[v];
      }
      return sample_sigma(f, p).sigma;
    };
    accumulate(r, analytic, central_differences(local, kStep, eval));
  }
  return r;
}

GradCheckResult check_sample_latent(std::uint64_t seed) {
  GradCheckResult r{"sample_latent", 0, 0.0, kPointwiseTol};
  Rng rng(seed ^ 0x1a7);
  for (int trial = 0; trial < 32; ++trial) {
    VoxelField f = random_field(rng, {5, 4, 6}, 1.0);
    const Vec3 p = random_interior_point(rng);
    const LatentSample s = sample_latent(f, p);
    // Random cotangent per channel reduces the 4-vector to a scalar.
    Latent cot;
    for (double &c : cot) {
      c = rng.uniform(-1.0, 1.0);
    }
    std::vector<double> local(8 * kLatentChannels), analytic(8 * kLatentChannels);
    for (int v = 0; v < 8; ++v) {
      for (int c = 0; c < kLatentChannels; ++c) {
        local[v * kLatentChannels + c] = f.latent()[s.stencil.index[v] * kLatentChannels + c];
        analytic[v * kLatentChannels + c] = s.stencil.weight[v] * cot[c];
      }
    }
    auto eval = [&] {
      auto dst = f.latent_mut();
      for (int v = 0; v < 8; ++v) {
        for (int c = 0; c < kLatentChannels; ++c) {
          dst[s.stencil.index[v] * kLatentChannels + c] = local[v * kLatentChannels + c];
        }
      }
      const Latent l = sample_latent(f, p).value;
      double sum = 0.0;
      for (int c = 0; c < kLatentChannels; ++c) {
        sum += cot[c] * l[c];
      }
      return sum;
    };
    accumulate(r, analytic, central_differences(local, kStep, eval));
  }
  return r;
}

GradCheckResult check_point_cloud_loss(std::uint64_t seed) {
  GradCheckResult r{"point_cloud_loss", 0, 0.0, kPointwiseTol};
  Rng rng(seed ^ 0xbce);
  const GeomLossConfig cfg;
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t n = 64;
    const OccupancyTarget t = random_targets(rng, n);
    std::vector<double> alpha(n);
    for (double &a : alpha) {
      a = rng.uniform(0.02, 0.98);
    }
    const PointLoss base = point_cloud_loss(alpha, t, cfg);
    auto eval = [&] { return point_cloud_loss(alpha, t, cfg).loss; };
    accumulate(r, base.dloss_dalpha, central_differences(alpha, kStep, eval));
  }
  return r;
}

GradCheckResult check_point_loss_sigma(std::uint64_t seed) {
  GradCheckResult r{"point_loss_sigma", 0, 0.0, kCompositionTol};
  Rng rng(seed ^ 0x5167);
  const GeomLossConfig cfg;
  const double delta = 2.0 / 95.0;
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t n = 64;
    const OccupancyTarget t = random_targets(rng, n);
    std::vector<double> sigma(n);
    for (double &s : sigma) {
      s = rng.uniform(1.0, 150.0);
    }
    auto alphas = [&] {
      std::vector<double> a(n);
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = point_alpha(sigma[i], delta).alpha;
      }
      return a;
    };
    const PointLoss base = point_cloud_loss(alphas(), t, cfg);
    std::vector<double> analytic(n);
    for (std::size_t i = 0; i < n; ++i) {
      analytic[i] = base.dloss_dalpha[i] * point_alpha(sigma[i], delta).dalpha_dsigma;
    }
    auto eval = [&] { return point_cloud_loss(alphas(), t, cfg).loss; };
    accumulate(r, analytic, central_differences(sigma, kStep, eval));
  }
  return r;
}

GradCheckResult check_sparsity_loss(std::uint64_t seed) {
  GradCheckResult r{"sparsity_loss", 0, 0.0, kPointwiseTol};
  Rng rng(seed ^ 0x59a);
  for (int trial = 0; trial < 4; ++trial) {
    RenderOutput out;
    out.width = 4;
    out.height = 4;
    out.samples = 8;
    out.weight.resize(out.rays() * out.samples);
    for (double &w : out.weight) {
      w = rng.uniform(0.1, 0.9);
    }
    const SparsityLoss base = sparsity_loss(out);
    auto eval = [&] { return sparsity_loss(out).loss; };
    accumulate(r, base.dloss_dweight, central_differences(out.weight, kStep, eval));
  }
  return r;
}

GradCheckResult check_render_jacobian(std::uint64_t seed) {
  GradCheckResult r{"render_jacobian", 0, 0.0, kRenderTol};
  Rng rng(seed ^ 0x4e4d);
  // density_scale = 1 / voxel_edge of an 8^3 grid over [-1, 1]^3
  VoxelField field = random_field(rng, {8, 8, 8}, 3.5);

  const Camera cam = orbit_camera(2.2, 25.0, 40.0, 40.0, 4, 4);
  RenderSettings rs;
  rs.samples_per_ray = 8;
  rs.near = 0.5;
  rs.far = 4.0;
  rs.seed = seed + 11;

  const RenderOutput tape = render(field, cam, rs);
  std::vector<double> dx(tape.latent.size()), dm(tape.depth.size()), dw(tape.weight.size());
  for (double &g : dx) {
    g = rng.uniform(-1.0, 1.0);
  }
  for (double &g : dm) {
    g = rng.uniform(-1.0, 1.0);
  }
  for (double &g : dw) {
    g = rng.uniform(-1.0, 1.0);
  }
  const FieldGradients grads = backprop_pixel_gradients(field, tape, dx, dm, dw);

  auto objective = [&](const VoxelField &fld) {
    const RenderOutput o = render(fld, cam, rs);
    double sum = 0.0;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      sum += dx[i] * o.latent[i];
    }
    for (std::size_t i = 0; i < dm.size(); ++i) {
      sum += dm[i] * o.depth[i];
    }
    for (std::size_t i = 0; i < dw.size(); ++i) {
      sum += dw[i] * o.weight[i];
    }
    return sum;
  };

  std::vector<double> raw(field.raw_density().begin(), field.raw_density().end());
  auto eval_raw = [&] {
    std::copy(raw.begin(), raw.end(), field.raw_density_mut().begin());
    return objective(field);
  };
  accumulate(r, grads.raw_density, central_differences(raw, kStep, eval_raw));
  std::copy(raw.begin(), raw.end(), field.raw_density_mut().begin());

  std::vector<double> lat(field.latent().begin(), field.latent().end());
  auto eval_lat = [&] {
    std::copy(lat.begin(), lat.end(), field.latent_mut().begin());
    return objective(field);
  };
  accumulate(r, grads.latent, central_differences(lat, kStep, eval_lat));
  std::copy(lat.begin(), lat.end(), field.latent_mut().begin());

  std::vector<double> bg(field.background().begin(), field.background().end());
  auto eval_bg = [&] {
    std::copy(bg.begin(), bg.end(), field.background_mut().begin());
    return objective(field);
  };
  accumulate(r, grads.background, central_differences(bg, kStep, eval_bg));
  return r;
}

std::vector<GradCheckResult> run_gradient_suites(std::uint64_t seed) {
  return {check_sample_sigma(seed),     check_sample_latent(seed), check_point_cloud_loss(seed),
          check_point_loss_sigma(seed), check_sparsity_loss(seed), check_render_jacobian(seed)};
}

} // namespace p23d
