#pragma once

#include "p23d/common.hpp"
#include "p23d/ply.hpp"

#include <array>
#include <string>
#include <vector>

namespace p23d {

/// Ordered point set with optional per-point RGB in [0,1].
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<std::array<float, 3>> colors; // empty or one per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_colors() const { return !colors.empty() && colors.size() == points.size(); }
};

/// Maps p to (p - source_center) * scale + target_center.
struct NormalizationTransform {
  Vec3 source_center;
  Vec3 target_center;
  double scale = 1.0;

  Vec3 apply(const Vec3 &p) const { return (p - source_center) * scale + target_center; }
  Vec3 invert(const Vec3 &p) const { return (p - target_center) / scale + source_center; }
};

PointCloud load_point_cloud(const std::string &path);

/// Writes x,y,z as float and, when present, red/green/blue as uchar.
void save_point_cloud(const PointCloud &pc, const std::string &path,
                      ply::Format format = ply::Format::BinaryLittleEndian);

/// Centers the cloud on the box center and scales it uniformly so its largest
/// axis extent is margin times the box's largest extent.
std::pair<PointCloud, NormalizationTransform>
normalize_to_bounds(const PointCloud &pc, const Aabb &bounds, double margin = 0.9);

/// Greedy first-occurrence-wins deduplication. Two points are duplicates
/// when their L-infinity distance is <= epsilon; epsilon == 0 compares the
/// coordinate bit patterns.
PointCloud dedup(const PointCloud &pc, double epsilon);

/// Default dedup tolerance used by upsample: 1e-7 times the cloud's largest
/// bounding-box extent.
double default_dedup_epsilon(const PointCloud &pc);

/// Midpoint densification. Each of `iterations` rounds appends, for every
/// point in order, the midpoints to its q nearest neighbours (nearest first,
/// equidistant neighbours by lowest index), then deduplicates. Originals
/// stay in front in their input order. A negative epsilon selects
/// default_dedup_epsilon of the input cloud.
PointCloud upsample(const PointCloud &pc, int q = 20, int iterations = 2, double epsilon = -1.0);

} // namespace p23d
