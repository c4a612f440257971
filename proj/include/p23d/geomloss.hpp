#pragma once

#include "p23d/common.hpp"
#include "p23d/spatial.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace p23d {

enum class OccupancyLabel : std::uint8_t { Soft, Zero, Ignore };

/// Per-query occupancy target. `value` is the soft target for Soft labels
/// and 0 otherwise.
struct OccupancyTarget {
  std::vector<OccupancyLabel> labels;
  std::vector<double> values;
  std::size_t soft_count = 0;
  std::size_t zero_count = 0;
  std::size_t ignore_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t supervised() const { return soft_count + zero_count; }
};

struct GeomLossConfig {
  double tau1 = 0.95;
  double tau2 = 0.9;
  double delta = 0.0;         // point-alpha step; <= 0 means one voxel edge of the field
  double clamp_eps = 1e-6;

  void validate() const;
};

/// Labels each query from its proximity p = 1 - D_hat: Soft(p) when
/// p > tau1, Zero when p < tau2, Ignore otherwise (both boundaries ignored).
OccupancyTarget target_occupancy(const DistanceBatch &normalized, const GeomLossConfig &cfg);

struct PointAlpha {
  double alpha;
  double dalpha_dsigma;
};

/// alpha = 1 - exp(-sigma * delta).
inline PointAlpha point_alpha(double sigma, double delta) {
  const double e = std::exp(-sigma * delta);
  return {1.0 - e, delta * e};
}

struct PointLoss {
  double loss = 0.0;
  std::vector<double> dloss_dalpha; // aligned with the input batch
};

/// Soft-label binary cross entropy averaged over non-Ignore entries, with
/// alpha clamped to [eps, 1-eps]. Clamped entries get zero gradient.
PointLoss point_cloud_loss(std::span<const double> alpha, const OccupancyTarget &targets,
                           const GeomLossConfig &cfg);

} // namespace p23d
