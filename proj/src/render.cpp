#include "p23d/render.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace p23d {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg = kPi / 180.0;

std::uint64_t ray_seed(std::uint64_t seed, std::size_t ray) {
  return seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL * (ray + 1);
}

void check_span(std::span<const double> s, std::size_t n, const char *what) {
  if (!s.empty() && s.size() != n) {
    throw Error("render", "shape", std::string(what) + " gradient has " + std::to_string(s.size()) +
                                       " entries, expected " + std::to_string(n));
  }
}

} // namespace

Vec3 Camera::ray_direction(int x, int y) const {
  const double tan_half = std::tan(0.5 * fov_deg * kDeg);
  const double aspect = static_cast<double>(width) / height;
  const double cx = (2.0 * (x + 0.5) / width - 1.0) * tan_half * aspect;
  const double cy = (1.0 - 2.0 * (y + 0.5) / height) * tan_half;
  const Vec3 local = normalize({cx, cy, -1.0});
  return normalize({pose[0] * local.x + pose[1] * local.y + pose[2] * local.z,
                    pose[4] * local.x + pose[5] * local.y + pose[6] * local.z,
                    pose[8] * local.x + pose[9] * local.y + pose[10] * local.z});
}

void Camera::validate() const {
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      double rtr = 0.0;
      for (int k = 0; k < 3; ++k) {
        rtr += pose[k * 4 + r] * pose[k * 4 + c];
      }
      if (std::abs(rtr - (r == c ? 1.0 : 0.0)) >= 1e-6) {
        throw Error("render", "camera", "pose rotation is not orthonormal");
      }
    }
  }
  if (!(fov_deg > 10.0 && fov_deg < 120.0)) {
    throw Error("render", "camera", "fov must lie in (10, 120) degrees");
  }
  if (width < 1 || height < 1) {
    throw Error("render", "camera", "image size must be positive");
  }
}

Camera Camera::look_at(const Vec3 &eye, const Vec3 &target, Vec3 up, double fov_deg, int width, int height) {
  const Vec3 z = normalize(eye - target);
  Vec3 x = cross(up, z);
  if (length(x) < 1e-9) {
    up = {0.0, 0.0, 1.0};
    x = cross(up, z);
  }
  x = normalize(x);
  const Vec3 y = cross(z, x);
  Camera cam;
  cam.pose = {x.x, y.x, z.x, eye.x, x.y, y.y, z.y, eye.y, x.z, y.z, z.z, eye.z, 0, 0, 0, 1};
  cam.fov_deg = fov_deg;
  cam.width = width;
  cam.height = height;
  return cam;
}

void CameraSamplerConfig::validate() const {
  if (radius_min > radius_max || elevation_min > elevation_max || azimuth_min > azimuth_max ||
      fov_jitter_min > fov_jitter_max) {
    throw Error("render", "config", "camera sampler ranges must be non-empty (min <= max)");
  }
  if (!(radius_min > 0.0)) {
    throw Error("render", "config", "camera radius must be positive");
  }
  if (!(0.0 < near && near < far)) {
    throw Error("render", "config", "camera planes must satisfy 0 < near < far");
  }
  if (width < 1 || height < 1) {
    throw Error("render", "config", "image size must be positive");
  }
}

Camera orbit_camera(double radius, double elevation_deg, double azimuth_deg, double fov_deg, int width,
                    int height, const Vec3 &target) {
  const double el = elevation_deg * kDeg, az = azimuth_deg * kDeg;
  const Vec3 eye = target + Vec3{std::cos(el) * std::cos(az), std::sin(el), std::cos(el) * std::sin(az)} * radius;
  return Camera::look_at(eye, target, {0.0, 1.0, 0.0}, fov_deg, width, height);
}

Camera sample_camera(Rng &rng, const CameraSamplerConfig &cfg) {
  cfg.validate();
  const double radius = rng.uniform(cfg.radius_min, cfg.radius_max);
  const double elevation = rng.uniform(cfg.elevation_min, cfg.elevation_max);
  const double azimuth = rng.uniform(cfg.azimuth_min, cfg.azimuth_max);
  const double fov = cfg.fov_base + rng.uniform(cfg.fov_jitter_min, cfg.fov_jitter_max);
  return orbit_camera(radius, elevation, azimuth, fov, cfg.width, cfg.height, cfg.target);
}

std::vector<double> compositing_weights(std::span<const double> alpha) {
  std::vector<double> w(alpha.size());
  double trans = 1.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    w[k] = alpha[k] * trans;
    trans *= 1.0 - alpha[k];
  }
  return w;
}

RenderOutput render(const VoxelField &field, const Camera &camera, const RenderSettings &settings) {
  if (settings.samples_per_ray < 1) {
    throw Error("render", "config", "samples per ray must be >= 1");
  }
  if (!(0.0 < settings.near && settings.near < settings.far)) {
    throw Error("render", "config", "render planes must satisfy 0 < near < far");
  }
  RenderOutput out;
  out.width = camera.width;
  out.height = camera.height;
  out.samples = settings.samples_per_ray;
  out.camera = camera;
  out.background = field.background();
  out.field_id = field.id();
  out.field_version = field.version();
  const std::size_t rays = out.rays();
  const int K = out.samples;
  out.latent.assign(rays * kLatentChannels, 0.0);
  out.depth.assign(rays, 0.0);
  out.coverage.assign(rays, 0.0);
  out.origins.resize(rays);
  out.directions.resize(rays);
  out.t.resize(rays * K);
  out.delta.resize(rays * K);
  out.alpha.assign(rays * K, 0.0);
  out.weight.assign(rays * K, 0.0);
  out.active.assign(rays * K, 0);
  const double step = (settings.far - settings.near) / K;
  const Vec3 origin = camera.position();
  const Latent bg = field.background();
  const Aabb &box = field.bounds();

  parallel_for(rays, 64, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      const int px = static_cast<int>(r % camera.width), py = static_cast<int>(r / camera.width);
      const Vec3 dir = camera.ray_direction(px, py);
      out.origins[r] = origin;
      out.directions[r] = dir;
      double *t = &out.t[r * K];
      double *delta = &out.delta[r * K];
      double *alpha = &out.alpha[r * K];
      double *weight = &out.weight[r * K];
      Rng rng(ray_seed(settings.seed, r));
      for (int k = 0; k < K; ++k) {
        const double u = settings.jitter ? rng.uniform() : 0.5;
        t[k] = settings.near + (k + u) * step;
      }
      for (int k = 0; k + 1 < K; ++k) {
        delta[k] = t[k + 1] - t[k];
      }
      delta[K - 1] = K > 1 ? (t[K - 1] - t[0]) / (K - 1) : step;

      // Slab test to skip samples that cannot touch the grid.
      double t0 = settings.near, t1 = settings.far;
      for (int a = 0; a < 3 && t0 <= t1; ++a) {
        if (dir[a] == 0.0) {
          if (origin[a] < box.lo[a] || origin[a] > box.hi[a]) {
            t1 = -1.0;
          }
          continue;
        }
        double ta = (box.lo[a] - origin[a]) / dir[a];
        double tb = (box.hi[a] - origin[a]) / dir[a];
        if (ta > tb) {
          std::swap(ta, tb);
        }
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
      }
      const double slack = 1e-9 * (settings.far + 1.0);
      double trans = 1.0, wsum = 0.0, depth = 0.0;
      Latent acc{};
      for (int k = 0; k < K; ++k) {
        if (t0 > t1 || t[k] < t0 - slack || t[k] > t1 + slack) {
          continue;
        }
        const Vec3 p = origin + dir * t[k];
        const SigmaSample s = sample_sigma(field, p);
        if (!s.stencil.valid) {
          continue;
        }
        out.active[r * K + k] = 1;
        const double a = 1.0 - std::exp(-s.sigma * delta[k]);
        const double w = a * trans;
        alpha[k] = a;
        weight[k] = w;
        trans *= 1.0 - a;
        wsum += w;
        depth += w * t[k];
        if (w != 0.0) {
          const LatentSample c = sample_latent(field, p);
          for (int ch = 0; ch < kLatentChannels; ++ch) {
            acc[ch] += w * c.value[ch];
          }
        }
      }
      for (int ch = 0; ch < kLatentChannels; ++ch) {
        out.latent[r * kLatentChannels + ch] = acc[ch] + (1.0 - wsum) * bg[ch];
      }
      out.depth[r] = depth;
      out.coverage[r] = wsum;
    }
  });
  return out;
}

SparsityLoss sparsity_loss(const RenderOutput &output, double eps) {
  SparsityLoss out;
  const std::size_t rays = output.rays();
  const int K = output.samples;
  out.dloss_dweight.assign(output.weight.size(), 0.0);
  if (rays == 0) {
    return out;
  }
  const double inv_rays = 1.0 / static_cast<double>(rays);
  std::vector<double> per_ray(rays, 0.0);
  parallel_for(rays, 256, [&](std::size_t begin, std::size_t end) {
    std::vector<double> terms(K);
    for (std::size_t r = begin; r < end; ++r) {
      for (int k = 0; k < K; ++k) {
        const double raw = output.weight[r * K + k];
        const double w = std::clamp(raw, eps, 1.0 - eps);
        terms[k] = -(w * std::log(w) + (1.0 - w) * std::log(1.0 - w));
        if (raw > eps && raw < 1.0 - eps) {
          out.dloss_dweight[r * K + k] = -(std::log(w) - std::log(1.0 - w)) * inv_rays;
        }
      }
      per_ray[r] = pairwise_sum(terms);
    }
  });
  out.loss = pairwise_sum(per_ray) * inv_rays;
  return out;
}

FieldGradients backprop_pixel_gradients(const VoxelField &field, const RenderOutput &tape,
                                        std::span<const double> dlatent, std::span<const double> ddepth,
                                        std::span<const double> dweight) {
  if (tape.field_id != field.id() || tape.field_version != field.version()) {
    throw Error("render", "stale_tape", "field changed since the render that produced this tape");
  }
  const std::size_t rays = tape.rays();
  const int K = tape.samples;
  check_span(dlatent, rays * kLatentChannels, "latent");
  check_span(ddepth, rays, "depth");
  check_span(dweight, rays * K, "weight");

  FieldGradients grads(field);
  if (dlatent.empty() && ddepth.empty() && dweight.empty()) {
    return grads;
  }
  // Phase 1 (parallel): per-sample gradients w.r.t. the interpolated raw
  // density and the interpolated latent. Phase 2 (serial, ray order):
  // scatter through the trilinear stencils.
  const std::size_t n = rays * K;
  std::vector<double> g_raw(n, 0.0);
  std::vector<double> g_lat(n * kLatentChannels, 0.0);
  std::vector<Latent> g_bg(rays);
  const Latent &bg = tape.background;

  parallel_for(rays, 64, [&](std::size_t begin, std::size_t end) {
    std::vector<double> g(K), trans(K), suffix(K);
    std::vector<Latent> colors(K);
    for (std::size_t r = begin; r < end; ++r) {
      Latent gc{};
      if (!dlatent.empty()) {
        for (int ch = 0; ch < kLatentChannels; ++ch) {
          gc[ch] = dlatent[r * kLatentChannels + ch];
        }
      }
      const double gd = ddepth.empty() ? 0.0 : ddepth[r];
      const double *alpha = &tape.alpha[r * K];
      const double *weight = &tape.weight[r * K];
      const double *t = &tape.t[r * K];
      const std::uint8_t *active = &tape.active[r * K];
      double T = 1.0;
      for (int k = 0; k < K; ++k) {
        trans[k] = T;
        T *= 1.0 - alpha[k];
        colors[k] = {};
        double gk = gd * t[k] + (dweight.empty() ? 0.0 : dweight[r * K + k]);
        if (active[k]) {
          colors[k] = sample_latent(field, tape.sample_position(r, k)).value;
        }
        for (int ch = 0; ch < kLatentChannels; ++ch) {
          gk += gc[ch] * (colors[k][ch] - bg[ch]);
        }
        g[k] = gk;
      }
      double wsum = 0.0;
      for (int k = 0; k < K; ++k) {
        wsum += weight[k];
      }
      for (int ch = 0; ch < kLatentChannels; ++ch) {
        g_bg[r][ch] = (1.0 - wsum) * gc[ch];
      }
      suffix[K - 1] = 0.0;
      for (int k = K - 2; k >= 0; --k) {
        suffix[k] = g[k + 1] * alpha[k + 1] + (1.0 - alpha[k + 1]) * suffix[k + 1];
      }
      for (int k = 0; k < K; ++k) {
        if (!active[k]) {
          continue;
        }
        const std::size_t s = r * K + k;
        const double dalpha = trans[k] * (g[k] - suffix[k]);
        const double dsigma = dalpha * tape.delta[s] * (1.0 - alpha[k]);
        if (dsigma != 0.0) {
          const SigmaSample ss = sample_sigma(field, tape.sample_position(r, k));
          g_raw[s] = dsigma * ss.dsigma_draw;
        }
        for (int ch = 0; ch < kLatentChannels; ++ch) {
          g_lat[s * kLatentChannels + ch] = weight[k] * gc[ch];
        }
      }
    }
  });

  for (std::size_t r = 0; r < rays; ++r) {
    for (int ch = 0; ch < kLatentChannels; ++ch) {
      grads.background[ch] += g_bg[r][ch];
    }
    for (int k = 0; k < K; ++k) {
      const std::size_t s = r * K + k;
      const double *gl = &g_lat[s * kLatentChannels];
      if (g_raw[s] == 0.0 && gl[0] == 0.0 && gl[1] == 0.0 && gl[2] == 0.0 && gl[3] == 0.0) {
        continue;
      }
      const Stencil st = field.stencil(tape.sample_position(r, k));
      if (!st.valid) {
        continue;
      }
      for (int c = 0; c < 8; ++c) {
        const double w = st.weight[c];
        const std::size_t v = st.index[c];
        grads.raw_density[v] += w * g_raw[s];
        double *dst = &grads.latent[v * kLatentChannels];
        for (int ch = 0; ch < kLatentChannels; ++ch) {
          dst[ch] += w * gl[ch];
        }
      }
    }
  }
  return grads;
}

std::vector<double> normalized_depth(const RenderOutput &output, double coverage_threshold) {
  std::vector<double> out(output.depth.size(), 0.0);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (output.coverage[i] > coverage_threshold) {
      lo = std::min(lo, output.depth[i]);
      hi = std::max(hi, output.depth[i]);
    }
  }
  if (!(hi >= lo)) {
    return out;
  }
  const double range = hi - lo;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (output.coverage[i] > coverage_threshold) {
      out[i] = range > 0.0 ? (output.depth[i] - lo) / range : 0.0;
    }
  }
  return out;
}

void write_pfm(const std::string &path, int width, int height, int channels, std::span<const float> data) {
  if (channels != 1 && channels != 3) {
    throw Error("render", "io", "PFM supports 1 or 3 channels");
  }
  if (data.size() != static_cast<std::size_t>(width) * height * channels) {
    throw Error("render", "io", "PFM data size does not match the image shape");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("render", "io", path + ": cannot open for writing");
  }
  out << (channels == 3 ? "PF" : "Pf") << '\n' << width << ' ' << height << "\n-1.0\n";
  // PFM stores the bottom row first.
  for (int y = height - 1; y >= 0; --y) {
    out.write(reinterpret_cast<const char *>(data.data() + static_cast<std::size_t>(y) * width * channels),
              static_cast<std::streamsize>(sizeof(float) * width * channels));
  }
  if (!out) {
    throw Error("render", "io", path + ": write failed");
  }
}

std::vector<float> read_pfm(const std::string &path, int &width, int &height, int &channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("render", "io", path + ": cannot open");
  }
  std::string magic;
  double scale = 0.0;
  in >> magic >> width >> height >> scale;
  in.get();
  if ((magic != "PF" && magic != "Pf") || width < 1 || height < 1 || !(scale < 0.0)) {
    throw Error("render", "io", path + ": not a little-endian PFM file");
  }
  channels = magic == "PF" ? 3 : 1;
  std::vector<float> data(static_cast<std::size_t>(width) * height * channels);
  for (int y = height - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char *>(data.data() + static_cast<std::size_t>(y) * width * channels),
            static_cast<std::streamsize>(sizeof(float) * width * channels));
  }
  if (!in) {
    throw Error("render", "io", path + ": truncated");
  }
  return data;
}

void write_png(const std::string &path, int width, int height, int channels, std::span<const double> data) {
  if (channels != 1 && channels != 3) {
    throw Error("render", "io", "PNG writer supports 1 or 3 channels");
  }
  const std::size_t px = static_cast<std::size_t>(width) * height;
  if (data.size() != px * channels) {
    throw Error("render", "io", "PNG data size does not match the image shape");
  }
  std::vector<unsigned char> bytes(data.size());
  for (int c = 0; c < channels; ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < px; ++i) {
      lo = std::min(lo, data[i * channels + c]);
      hi = std::max(hi, data[i * channels + c]);
    }
    const double range = hi > lo ? hi - lo : 1.0;
    for (std::size_t i = 0; i < px; ++i) {
      const double v = (data[i * channels + c] - lo) / range;
      bytes[i * channels + c] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  std::unique_ptr<FILE, int (*)(FILE *)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) {
    throw Error("render", "io", path + ": cannot open for writing");
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("render", "io", "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("render", "io", path + ": PNG encoding failed");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * width * channels);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

} // namespace p23d
