#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace p23d {

struct GradCheckResult {
  std::string name;
  std::size_t checked = 0;  // number of gradient entries compared
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

/// |a - b| / max(|a|, |b|) in the Euclidean norm over the whole gradient
/// vector; 0 when both are zero.
double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every entry of
/// x. `f` sees x perturbed in place; x is restored on return.
std::vector<double> central_differences(std::span<double> x, double h, const std::function<double()> &f);

GradCheckResult check_sample_sigma(std::uint64_t seed);
GradCheckResult check_sample_latent(std::uint64_t seed);
GradCheckResult check_point_cloud_loss(std::uint64_t seed);
/// dLoss/dsigma through point_alpha.
GradCheckResult check_point_loss_sigma(std::uint64_t seed);
GradCheckResult check_sparsity_loss(std::uint64_t seed);
/// Random image, depth and weight gradients on an 8^3 field rendered at
/// 4x4 with 8 samples per ray, against every raw parameter.
GradCheckResult check_render_jacobian(std::uint64_t seed);

std::vector<GradCheckResult> run_gradient_suites(std::uint64_t seed = 0);

} // namespace p23d
