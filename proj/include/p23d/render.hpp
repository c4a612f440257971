#pragma once

#include "p23d/common.hpp"
#include "p23d/field.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace p23d {

/// Pinhole camera. `pose` is the row-major camera-to-world transform; the
/// camera looks down its local -z with +y up.
struct Camera {
  std::array<double, 16> pose{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  double fov_deg = 50.0; // vertical
  int width = 64;
  int height = 64;

  Vec3 position() const { return {pose[3], pose[7], pose[11]}; }
  /// Unit world-space direction through the center of pixel (x, y); y = 0 is
  /// the top row.
  Vec3 ray_direction(int x, int y) const;
  /// Throws unless the rotation is orthonormal and the fov is in (10, 120).
  void validate() const;

  static Camera look_at(const Vec3 &eye, const Vec3 &target, Vec3 up, double fov_deg, int width,
                        int height);
};

struct CameraSamplerConfig {
  double radius_min = 1.0, radius_max = 1.5;
  double elevation_min = -10.0, elevation_max = 60.0; // degrees above the xz plane
  double azimuth_min = 0.0, azimuth_max = 360.0;      // degrees, measured from +x toward +z
  double fov_base = 50.0;
  double fov_jitter_min = 0.0, fov_jitter_max = 20.0;
  double near = 0.1, far = 4.2;
  int width = 64, height = 64;
  Vec3 target{};

  void validate() const;
};

/// Position uniform in radius, elevation and azimuth; aimed at cfg.target
/// with up = +y; fov = base + uniform jitter.
Camera sample_camera(Rng &rng, const CameraSamplerConfig &cfg);

/// Camera at the given spherical coordinates (degrees) around target.
Camera orbit_camera(double radius, double elevation_deg, double azimuth_deg, double fov_deg, int width,
                    int height, const Vec3 &target = {});

struct RenderSettings {
  int samples_per_ray = 96;
  double near = 0.1;
  double far = 4.2;
  bool jitter = true;       // stratified jitter; false places samples at stratum centers
  std::uint64_t seed = 0;   // jitter stream; each ray derives its own
};

/// Rendered latent image, depth map and coverage plus the sample tape used by
/// backprop_pixel_gradients. Images are row-major with y = 0 at the top;
/// latent is interleaved [(y * width + x) * 4 + c].
struct RenderOutput {
  int width = 0, height = 0, samples = 0;
  std::vector<double> latent;
  std::vector<double> depth;     // sum_k w_k t_k, unnormalized
  std::vector<double> coverage;  // sum_k w_k

  // tape
  Camera camera;
  Latent background{};
  std::vector<Vec3> origins, directions;          // per ray
  std::vector<double> t, delta, alpha, weight;    // per ray * samples
  std::vector<std::uint8_t> active;               // sample lies inside the grid
  std::uint64_t field_id = 0, field_version = 0;

  std::size_t rays() const { return static_cast<std::size_t>(width) * height; }
  Vec3 sample_position(std::size_t ray, int k) const {
    return origins[ray] + directions[ray] * t[ray * samples + k];
  }
};

RenderOutput render(const VoxelField &field, const Camera &camera, const RenderSettings &settings);

/// Front-to-back weights w_k = alpha_k * prod_{j<k} (1 - alpha_j).
std::vector<double> compositing_weights(std::span<const double> alpha);

struct SparsityLoss {
  double loss = 0.0;
  std::vector<double> dloss_dweight; // aligned with RenderOutput::weight
};

/// Binary entropy of every sample weight (clamped to [eps, 1-eps]), summed
/// per ray and averaged over rays.
SparsityLoss sparsity_loss(const RenderOutput &output, double eps = 1e-6);

/// Pulls gradients on the latent image, the depth map and/or the raw sample
/// weights back to the field parameters. Empty spans are treated as zero.
/// The field must be the one (and the version) that produced the tape.
FieldGradients backprop_pixel_gradients(const VoxelField &field, const RenderOutput &tape,
                                        std::span<const double> dlatent,
                                        std::span<const double> ddepth = {},
                                        std::span<const double> dweight = {});

/// Depth remapped to [0,1] by min-max over pixels with coverage > threshold;
/// other pixels read 0.
std::vector<double> normalized_depth(const RenderOutput &output, double coverage_threshold = 0.5);

// Image dumps.
/// channels is 1 or 3; data is row-major top row first.
void write_pfm(const std::string &path, int width, int height, int channels, std::span<const float> data);
/// Min-max normalizes each channel to 8 bits; channels is 1 or 3.
void write_png(const std::string &path, int width, int height, int channels, std::span<const double> data);
/// Reads a PFM written by write_pfm (row-major, top row first).
std::vector<float> read_pfm(const std::string &path, int &width, int &height, int &channels);

} // namespace p23d
