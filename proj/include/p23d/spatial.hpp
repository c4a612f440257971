#pragma once

#include "p23d/common.hpp"
#include "p23d/pointcloud.hpp"

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace p23d {

struct Neighbor {
  double dist_sq = std::numeric_limits<double>::infinity();
  std::uint32_t index = std::numeric_limits<std::uint32_t>::max();

  /// Lexicographic on (dist_sq, index): equidistant points order by index.
  bool operator<(const Neighbor &o) const {
    return dist_sq < o.dist_sq || (dist_sq == o.dist_sq && index < o.index);
  }
};

/// Immutable exact nearest-neighbour index (kd-tree with leaf buckets).
/// Results equal a brute-force scan bit for bit, including the
/// lowest-index tie break. Safe for concurrent queries.
class NearestNeighborIndex {
public:
  explicit NearestNeighborIndex(std::span<const Vec3> points);
  explicit NearestNeighborIndex(const PointCloud &pc) : NearestNeighborIndex(std::span<const Vec3>(pc.points)) {}

  std::size_t size() const { return coords_.size() / 3; }
  const Aabb &bounds() const { return bounds_; }

  Neighbor nearest(const Vec3 &q) const;
  /// Nearest point with squared distance <= max_dist_sq, or
  /// {inf, kNoIndex} when there is none.
  Neighbor nearest_within(const Vec3 &q, double max_dist_sq) const;
  static constexpr std::uint32_t kNoIndex = std::numeric_limits<std::uint32_t>::max();

  /// Up to k nearest points sorted by (distance, index). Points whose index
  /// equals `exclude` are skipped.
  std::vector<Neighbor> knn(const Vec3 &q, std::size_t k,
                            std::uint32_t exclude = std::numeric_limits<std::uint32_t>::max()) const;

private:
  struct Node {
    Vec3 lo, hi;                      // tight box of the node's points
    std::uint32_t begin = 0, end = 0; // range into the reordered arrays
    std::int32_t left = -1, right = -1;
    bool leaf() const { return left < 0; }
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end, std::vector<std::uint32_t> &order,
                     std::span<const Vec3> points);
  void search_nearest(std::int32_t node, const Vec3 &q, Neighbor &best) const;
  template <class Heap>
  void search_knn(std::int32_t node, const Vec3 &q, Heap &heap, std::size_t k, std::uint32_t exclude) const;
  double box_mindist(const Node &node, const Vec3 &q) const;

  std::vector<Node> nodes_;
  std::vector<double> coords_;          // xyz of points in tree order
  std::vector<std::uint32_t> indices_;  // original index of each tree slot
  Aabb bounds_;
};

/// Build an index; an empty cloud is an error.
NearestNeighborIndex build_index(const PointCloud &pc);

/// Euclidean distances, one per query, aligned with the query order.
struct DistanceBatch {
  std::vector<double> distances;
};

DistanceBatch nearest_distance_batch(const NearestNeighborIndex &index, std::span<const Vec3> queries);
/// Exact distances up to max_distance; queries farther than that read +inf.
DistanceBatch nearest_distance_batch(const NearestNeighborIndex &index, std::span<const Vec3> queries,
                                     double max_distance);

/// D / (0.5 * largest axis length of query_bounds).
DistanceBatch normalize_distances(const DistanceBatch &d, const Aabb &query_bounds);

} // namespace p23d
