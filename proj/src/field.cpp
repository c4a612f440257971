#include "p23d/field.hpp"

#include <atomic>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace p23d {

namespace {

std::atomic<std::uint64_t> g_next_field_id{1};

constexpr char kMagic[4] = {'P', '2', '3', 'F'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T> void put(std::vector<char> &buf, T v) {
  const auto *p = reinterpret_cast<const char *>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

template <class T> T get(const std::vector<char> &buf, std::size_t &off, const std::string &path) {
  if (off + sizeof(T) > buf.size()) {
    throw Error("field", "checkpoint", path + ": truncated at byte " + std::to_string(off));
  }
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

} // namespace

VoxelField::VoxelField(Resolution resolution, const Aabb &bounds, double density_scale)
    : resolution_(resolution), bounds_(bounds), density_scale_(density_scale),
      id_(g_next_field_id.fetch_add(1)) {
  for (int a = 0; a < 3; ++a) {
    if (resolution[a] < 2) {
      throw Error("field", "config", "resolution must be at least 2 on every axis");
    }
    if (!(bounds.hi[a] > bounds.lo[a])) {
      throw Error("field", "config", "bounds must have positive extent on every axis");
    }
  }
  if (!(density_scale > 0.0) || !std::isfinite(density_scale)) {
    throw Error("field", "config", "density scale must be positive and finite");
  }
  const std::size_t n = static_cast<std::size_t>(resolution[0]) * resolution[1] * resolution[2];
  if (n > std::numeric_limits<std::uint32_t>::max()) {
    throw Error("field", "config", "grid too large for 32-bit vertex indices");
  }
  raw_density_.assign(n, 0.0);
  latent_.assign(n * kLatentChannels, 0.0);
}

VoxelField::VoxelField(const VoxelField &other)
    : resolution_(other.resolution_), bounds_(other.bounds_), density_scale_(other.density_scale_),
      raw_density_(other.raw_density_), latent_(other.latent_), background_(other.background_),
      id_(g_next_field_id.fetch_add(1)) {}

VoxelField &VoxelField::operator=(const VoxelField &other) {
  if (this != &other) {
    resolution_ = other.resolution_;
    bounds_ = other.bounds_;
    density_scale_ = other.density_scale_;
    raw_density_ = other.raw_density_;
    latent_ = other.latent_;
    background_ = other.background_;
    ++version_;
  }
  return *this;
}

double VoxelField::voxel_edge() const {
  const Vec3 e = bounds_.extent();
  double edge = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    edge = std::min(edge, e[a] / (resolution_[a] - 1));
  }
  return edge;
}

Vec3 VoxelField::vertex_position(int i, int j, int k) const {
  const Vec3 e = bounds_.extent();
  return {bounds_.lo.x + e.x * i / (resolution_[0] - 1), bounds_.lo.y + e.y * j / (resolution_[1] - 1),
          bounds_.lo.z + e.z * k / (resolution_[2] - 1)};
}

Stencil VoxelField::stencil(const Vec3 &p) const {
  Stencil s;
  if (!bounds_.contains(p)) {
    return s;
  }
  int base[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] - bounds_.lo[a]) / (bounds_.hi[a] - bounds_.lo[a]) * (resolution_[a] - 1);
    int i = static_cast<int>(std::floor(u));
    i = std::clamp(i, 0, resolution_[a] - 2);
    base[a] = i;
    f[a] = std::clamp(u - i, 0.0, 1.0);
  }
  const std::uint32_t sx = 1, sy = static_cast<std::uint32_t>(resolution_[0]),
                      sz = static_cast<std::uint32_t>(resolution_[0] * resolution_[1]);
  const std::uint32_t b = vertex_index(base[0], base[1], base[2]);
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    s.index[c] = b + dx * sx + dy * sy + dz * sz;
    s.weight[c] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
  }
  s.valid = true;
  return s;
}

void FieldGradients::zero() {
  std::fill(raw_density.begin(), raw_density.end(), 0.0);
  std::fill(latent.begin(), latent.end(), 0.0);
  background.fill(0.0);
}

void FieldGradients::axpy(double s, const FieldGradients &o) {
  if (raw_density.size() != o.raw_density.size() || latent.size() != o.latent.size()) {
    throw Error("field", "shape", "gradient buffers differ in shape");
  }
  for (std::size_t i = 0; i < raw_density.size(); ++i) {
    raw_density[i] += s * o.raw_density[i];
  }
  for (std::size_t i = 0; i < latent.size(); ++i) {
    latent[i] += s * o.latent[i];
  }
  for (int c = 0; c < kLatentChannels; ++c) {
    background[c] += s * o.background[c];
  }
}

void FieldGradients::scale(double s) {
  for (double &v : raw_density) {
    v *= s;
  }
  for (double &v : latent) {
    v *= s;
  }
  for (double &v : background) {
    v *= s;
  }
}

double FieldGradients::norm() const {
  double s = 0.0;
  for (double v : raw_density) {
    s += v * v;
  }
  for (double v : latent) {
    s += v * v;
  }
  for (double v : background) {
    s += v * v;
  }
  return std::sqrt(s);
}

bool FieldGradients::all_finite() const {
  auto ok = [](double v) { return std::isfinite(v); };
  return std::all_of(raw_density.begin(), raw_density.end(), ok) &&
         std::all_of(latent.begin(), latent.end(), ok) &&
         std::all_of(background.begin(), background.end(), ok);
}

VoxelField init_field(Resolution resolution, const Aabb &bounds, const FieldInit &init,
                      double density_scale) {
  VoxelField field(resolution, bounds, density_scale);
  auto raw = field.raw_density_mut();
  if (init.mode == FieldInit::Mode::Constant) {
    if (init.sigma0 < 0.0 || !std::isfinite(init.sigma0)) {
      throw Error("field", "config", "constant initial density must be finite and >= 0");
    }
    // softplus never reaches 0 exactly; a vanishing sigma0 maps to a very
    // negative raw value.
    const double value = softplus_inverse(std::max(init.sigma0 / density_scale, 1e-300));
    std::fill(raw.begin(), raw.end(), value);
  } else {
    if (!(init.radius > 0.0) || init.peak < 0.0) {
      throw Error("field", "config", "blob needs radius > 0 and peak >= 0");
    }
    for (int k = 0; k < resolution[2]; ++k) {
      for (int j = 0; j < resolution[1]; ++j) {
        for (int i = 0; i < resolution[0]; ++i) {
          const Vec3 p = field.vertex_position(i, j, k);
          const double sigma =
              init.peak * std::exp(-distance_sq(p, init.center) / (2.0 * init.radius * init.radius));
          raw[field.vertex_index(i, j, k)] = softplus_inverse(std::max(sigma / density_scale, 1e-300));
        }
      }
    }
  }
  return field;
}

SigmaSample sample_sigma(const VoxelField &field, const Vec3 &p) {
  SigmaSample s;
  s.stencil = field.stencil(p);
  if (!s.stencil.valid) {
    return s;
  }
  const auto raw = field.raw_density();
  double r = 0.0;
  for (int c = 0; c < 8; ++c) {
    r += s.stencil.weight[c] * raw[s.stencil.index[c]];
  }
  s.sigma = field.density_scale() * softplus(r);
  s.dsigma_draw = field.density_scale() * sigmoid(r);
  return s;
}

LatentSample sample_latent(const VoxelField &field, const Vec3 &p) {
  LatentSample s;
  s.stencil = field.stencil(p);
  if (!s.stencil.valid) {
    return s;
  }
  const auto lat = field.latent();
  for (int c = 0; c < 8; ++c) {
    const double w = s.stencil.weight[c];
    const double *v = &lat[std::size_t{s.stencil.index[c]} * kLatentChannels];
    for (int ch = 0; ch < kLatentChannels; ++ch) {
      s.value[ch] += w * v[ch];
    }
  }
  return s;
}

double vertex_sigma(const VoxelField &field, std::size_t vertex) {
  return field.density_scale() * softplus(field.raw_density()[vertex]);
}

void save_checkpoint(const VoxelField &field, const std::string &path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::vector<char> buf;
  const std::size_t n = field.vertex_count();
  buf.reserve(96 + n * 4 * (1 + kLatentChannels));
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  for (int a = 0; a < 3; ++a) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(field.resolution()[a]));
  }
  for (int a = 0; a < 3; ++a) {
    put<double>(buf, field.bounds().lo[a]);
  }
  for (int a = 0; a < 3; ++a) {
    put<double>(buf, field.bounds().hi[a]);
  }
  put<double>(buf, field.density_scale());
  for (double b : field.background()) {
    put<float>(buf, static_cast<float>(b));
  }
  for (double v : field.raw_density()) {
    put<float>(buf, static_cast<float>(v));
  }
  const auto lat = field.latent();
  for (int ch = 0; ch < kLatentChannels; ++ch) {
    for (std::size_t v = 0; v < n; ++v) {
      put<float>(buf, static_cast<float>(lat[v * kLatentChannels + ch]));
    }
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error("field", "checkpoint", tmp + ": cannot open for writing");
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) {
      throw Error("field", "checkpoint", tmp + ": write failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw Error("field", "checkpoint", path + ": rename failed: " + ec.message());
  }
}

VoxelField load_checkpoint(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("field", "checkpoint", path + ": cannot open");
  }
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw Error("field", "checkpoint", path + ": bad magic");
  }
  std::size_t off = 4;
  const auto version = get<std::uint32_t>(buf, off, path);
  if (version != kCheckpointVersion) {
    throw Error("field", "checkpoint", path + ": unsupported version " + std::to_string(version));
  }
  Resolution res{};
  for (int a = 0; a < 3; ++a) {
    res[a] = static_cast<int>(get<std::uint32_t>(buf, off, path));
  }
  Aabb bounds;
  for (int a = 0; a < 3; ++a) {
    bounds.lo[a] = get<double>(buf, off, path);
  }
  for (int a = 0; a < 3; ++a) {
    bounds.hi[a] = get<double>(buf, off, path);
  }
  const double scale = get<double>(buf, off, path);
  VoxelField field(res, bounds, scale);
  auto &bg = field.background_mut();
  for (double &b : bg) {
    b = get<float>(buf, off, path);
  }
  const std::size_t n = field.vertex_count();
  if (buf.size() - off != n * 4 * (1 + kLatentChannels)) {
    throw Error("field", "checkpoint", path + ": payload size does not match the header resolution");
  }
  auto raw = field.raw_density_mut();
  for (std::size_t v = 0; v < n; ++v) {
    raw[v] = get<float>(buf, off, path);
  }
  auto lat = field.latent_mut();
  for (int ch = 0; ch < kLatentChannels; ++ch) {
    for (std::size_t v = 0; v < n; ++v) {
      lat[v * kLatentChannels + ch] = get<float>(buf, off, path);
    }
  }
  return field;
}

} // namespace p23d
