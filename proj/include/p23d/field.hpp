#pragma once

#include "p23d/common.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace p23d {

inline constexpr int kLatentChannels = 4;

using Resolution = std::array<int, 3>;
using Latent = std::array<double, kLatentChannels>;

/// Eight-vertex trilinear stencil. `valid` is false outside the bounds, in
/// which case the sample is zero and carries no gradient.
struct Stencil {
  std::array<std::uint32_t, 8> index{};
  std::array<double, 8> weight{};
  bool valid = false;
};

/// Dense vertex grid over an axis-aligned box holding one raw density and
/// four latent channels per vertex, plus a learnable background latent.
///
/// Density is sigma(p) = density_scale * softplus(trilinear(raw)(p)). With
/// density_scale = 1 this is the plain softplus activation; trainers set it to
/// 1 / voxel_edge so raw values are optical depth per voxel edge.
///
/// Every mutable accessor bumps version(); render tapes compare it to detect
/// stale state.
class VoxelField {
public:
  VoxelField(Resolution resolution, const Aabb &bounds, double density_scale = 1.0);

  const Resolution &resolution() const { return resolution_; }
  const Aabb &bounds() const { return bounds_; }
  double density_scale() const { return density_scale_; }
  std::size_t vertex_count() const { return raw_density_.size(); }
  /// Smallest vertex spacing over the three axes.
  double voxel_edge() const;
  Vec3 vertex_position(int i, int j, int k) const;
  std::uint32_t vertex_index(int i, int j, int k) const {
    return static_cast<std::uint32_t>(i + resolution_[0] * (j + resolution_[1] * k));
  }

  std::span<const double> raw_density() const { return raw_density_; }
  /// Interleaved per vertex: latent()[v * 4 + c].
  std::span<const double> latent() const { return latent_; }
  const Latent &background() const { return background_; }

  std::span<double> raw_density_mut() {
    ++version_;
    return raw_density_;
  }
  std::span<double> latent_mut() {
    ++version_;
    return latent_;
  }
  Latent &background_mut() {
    ++version_;
    return background_;
  }

  std::uint64_t id() const { return id_; }
  std::uint64_t version() const { return version_; }

  Stencil stencil(const Vec3 &p) const;

  VoxelField(const VoxelField &other);
  VoxelField &operator=(const VoxelField &other);
  VoxelField(VoxelField &&) noexcept = default;
  VoxelField &operator=(VoxelField &&) noexcept = default;

private:
  Resolution resolution_;
  Aabb bounds_;
  double density_scale_;
  std::vector<double> raw_density_;
  std::vector<double> latent_;
  Latent background_{};
  std::uint64_t id_;
  std::uint64_t version_ = 0;
};

/// Accumulated dLoss/dparameters, shaped like a VoxelField.
struct FieldGradients {
  std::vector<double> raw_density;
  std::vector<double> latent;
  Latent background{};

  FieldGradients() = default;
  explicit FieldGradients(const VoxelField &f)
      : raw_density(f.vertex_count(), 0.0), latent(f.vertex_count() * kLatentChannels, 0.0) {}

  bool compatible(const VoxelField &f) const {
    return raw_density.size() == f.vertex_count() && latent.size() == f.vertex_count() * kLatentChannels;
  }
  void zero();
  /// this += s * o
  void axpy(double s, const FieldGradients &o);
  void scale(double s);
  double norm() const;
  bool all_finite() const;
  bool operator==(const FieldGradients &) const = default;
};

struct FieldInit {
  enum class Mode { Constant, Blob } mode = Mode::Constant;
  double sigma0 = 0.1;      // Constant
  Vec3 center{};            // Blob
  double radius = 0.3;      // Blob: Gaussian standard deviation
  double peak = 5.0;        // Blob
};

/// Latent channels start at 0. Blob density is
/// peak * exp(-|p - center|^2 / (2 radius^2)).
VoxelField init_field(Resolution resolution, const Aabb &bounds, const FieldInit &init,
                      double density_scale = 1.0);

struct SigmaSample {
  double sigma = 0.0;
  double dsigma_draw = 0.0; // derivative w.r.t. the interpolated raw value
  Stencil stencil;
};

/// Gradient w.r.t. vertex v of the stencil is stencil.weight[v] * dsigma_draw.
SigmaSample sample_sigma(const VoxelField &field, const Vec3 &p);

struct LatentSample {
  Latent value{};
  Stencil stencil; // gradient of each channel w.r.t. its vertex value = weight
};

LatentSample sample_latent(const VoxelField &field, const Vec3 &p);

/// sigma at a grid vertex (no interpolation).
double vertex_sigma(const VoxelField &field, std::size_t vertex);

/// Checkpoint layout (all little-endian):
///   "P23F" | u32 version=1 | u32 nx,ny,nz | f64 lo.xyz, hi.xyz | f64 density_scale
///   | f32 background[4] | f32 raw_density[N] | f32 latent channel-planar [4][N]
/// Arrays are x-fastest. The file is written to a temporary name and renamed.
void save_checkpoint(const VoxelField &field, const std::string &path);
VoxelField load_checkpoint(const std::string &path);

} // namespace p23d
