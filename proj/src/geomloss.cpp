#include "p23d/geomloss.hpp"

namespace p23d {

void GeomLossConfig::validate() const {
  if (!(0.0 < tau2 && tau2 < tau1 && tau1 <= 1.0)) {
    throw Error("geomloss", "config", "thresholds must satisfy 0 < tau2 < tau1 <= 1");
  }
  if (!(0.0 < clamp_eps && clamp_eps < 0.5)) {
    throw Error("geomloss", "config", "alpha clamp epsilon must lie in (0, 0.5)");
  }
}

OccupancyTarget target_occupancy(const DistanceBatch &normalized, const GeomLossConfig &cfg) {
  cfg.validate();
  OccupancyTarget t;
  const std::size_t n = normalized.distances.size();
  t.labels.resize(n);
  t.values.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = 1.0 - normalized.distances[i];
    if (p > cfg.tau1) {
      t.labels[i] = OccupancyLabel::Soft;
      t.values[i] = p;
      ++t.soft_count;
    } else if (p < cfg.tau2) {
      t.labels[i] = OccupancyLabel::Zero;
      ++t.zero_count;
    } else {
      t.labels[i] = OccupancyLabel::Ignore;
      ++t.ignore_count;
    }
  }
  return t;
}

PointLoss point_cloud_loss(std::span<const double> alpha, const OccupancyTarget &targets,
                           const GeomLossConfig &cfg) {
  if (alpha.size() != targets.size()) {
    throw Error("geomloss", "shape", "alpha batch and targets differ in length");
  }
  PointLoss out;
  const std::size_t n = alpha.size();
  out.dloss_dalpha.assign(n, 0.0);
  const std::size_t supervised = targets.supervised();
  if (supervised == 0) {
    return out;
  }
  const double inv = 1.0 / static_cast<double>(supervised);
  const double lo = cfg.clamp_eps, hi = 1.0 - cfg.clamp_eps;
  std::vector<double> terms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets.labels[i] == OccupancyLabel::Ignore) {
      continue;
    }
    const double o = targets.values[i];
    const double a = std::clamp(alpha[i], lo, hi);
    terms[i] = -(o * std::log(a) + (1.0 - o) * std::log(1.0 - a));
    if (alpha[i] > lo && alpha[i] < hi) {
      out.dloss_dalpha[i] = (a - o) / (a * (1.0 - a)) * inv;
    }
  }
  out.loss = pairwise_sum(terms) * inv;
  return out;
}

} // namespace p23d
