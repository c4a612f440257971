#include "p23d/gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace p23d;

TEST_SUITE("gradcheck") {

TEST_CASE("relative error is norm-wise") {
  const std::vector<double> a{1.0, 0.0}, b{1.0, 1e-3};
  CHECK(gradient_relative_error(a, b) == doctest::Approx(1e-3 / std::sqrt(1.0 + 1e-6)));
  CHECK(gradient_relative_error(std::vector<double>{0, 0}, std::vector<double>{0, 0}) == 0.0);
  CHECK(gradient_relative_error(std::vector<double>{2, 0}, std::vector<double>{-2, 0}) == doctest::Approx(2.0));
}

TEST_CASE("central differences of a cubic") {
  std::vector<double> x{0.5, -1.0};
  const auto g = central_differences(x, 1e-5, [&] { return x[0] * x[0] * x[0] + 2.0 * x[1]; });
  CHECK(g[0] == doctest::Approx(0.75).epsilon(1e-9));
  CHECK(g[1] == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(x == std::vector<double>{0.5, -1.0});
}

TEST_CASE("every suite passes for several seeds") {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto results = run_gradient_suites(seed);
    REQUIRE(results.size() == 6);
    for (const auto &r : results) {
      INFO(r.name << " seed " << seed << " error " << r.max_rel_error);
      CHECK(r.checked > 0);
      CHECK(r.passed());
    }
  }
}

} // TEST_SUITE
