#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace p23d {

/// Error carrying a module and a kind tag. The CLI prints these as
/// `error:<module>:<kind>: <message>`.
class Error : public std::runtime_error {
public:
  Error(std::string module, std::string kind, const std::string &message)
      : std::runtime_error(message), module_(std::move(module)),
        kind_(std::move(kind)) {}

  const std::string &module() const noexcept { return module_; }
  const std::string &kind() const noexcept { return kind_; }

private:
  std::string module_;
  std::string kind_;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr Vec3() = default;
  constexpr Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double &operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

  constexpr Vec3 operator+(const Vec3 &o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Vec3 operator-(const Vec3 &o) const { return {x - o.x, y - o.y, z - o.z}; }
  constexpr Vec3 operator-() const { return {-x, -y, -z}; }
  constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  constexpr Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  constexpr Vec3 &operator+=(const Vec3 &o) {
    x += o.x; y += o.y; z += o.z;
    return *this;
  }
  constexpr Vec3 &operator-=(const Vec3 &o) {
    x -= o.x; y -= o.y; z -= o.z;
    return *this;
  }
  constexpr Vec3 &operator*=(double s) {
    x *= s; y *= s; z *= s;
    return *this;
  }
  constexpr bool operator==(const Vec3 &o) const = default;
};

constexpr Vec3 operator*(double s, const Vec3 &v) { return v * s; }
constexpr double dot(const Vec3 &a, const Vec3 &b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3 &a, const Vec3 &b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double length(const Vec3 &v) { return std::sqrt(dot(v, v)); }
inline Vec3 normalize(const Vec3 &v) { return v / length(v); }

/// Squared Euclidean distance, always summed x, y, z in that order so every
/// caller (index and brute-force oracle alike) gets identical bits.
constexpr double distance_sq(const Vec3 &a, const Vec3 &b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  const double dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

inline bool is_finite(const Vec3 &v) {
  return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

/// Axis-aligned box.
struct Aabb {
  Vec3 lo{-1.0, -1.0, -1.0};
  Vec3 hi{1.0, 1.0, 1.0};

  Vec3 extent() const { return hi - lo; }
  Vec3 center() const { return (lo + hi) * 0.5; }
  double max_extent() const {
    const Vec3 e = extent();
    return std::max({e.x, e.y, e.z});
  }
  bool contains(const Vec3 &p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z &&
           p.z <= hi.z;
  }
  static Aabb cube(double half) { return {{-half, -half, -half}, {half, half, half}}; }
  static Aabb of(const std::vector<Vec3> &pts);
};

inline Aabb Aabb::of(const std::vector<Vec3> &pts) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  Aabb box{{inf, inf, inf}, {-inf, -inf, -inf}};
  for (const Vec3 &p : pts) {
    for (int a = 0; a < 3; ++a) {
      box.lo[a] = std::min(box.lo[a], p[a]);
      box.hi[a] = std::max(box.hi[a], p[a]);
    }
  }
  return box;
}

// ---------------------------------------------------------------------------
// Random numbers. The conversions are written out rather than taken from
// <random> distributions so sequences are identical across standard libraries.

class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  /// splitmix64
  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  std::uint64_t state() const { return state_; }

private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Threading. Work is split into chunks whose boundaries depend only on the
// problem size, never on the thread count, so chunk-ordered reductions are
// reproducible for any thread configuration.

/// Number of worker threads used by parallel_for. 0 selects the hardware
/// default.
void set_thread_count(unsigned n);
unsigned thread_count();

/// Calls fn(begin, end) for consecutive ranges of at most `chunk` items.
void parallel_for(std::size_t n, std::size_t chunk,
                  const std::function<void(std::size_t, std::size_t)> &fn);

/// Pairwise (tree) sum; reduction order depends only on the input length.
double pairwise_sum(const double *v, std::size_t n);
inline double pairwise_sum(const std::vector<double> &v) { return pairwise_sum(v.data(), v.size()); }

inline double softplus(double x) {
  // log1p(exp(x)) without overflow
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}
/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) { return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y)); }

} // namespace p23d
