#include "p23d/spatial.hpp"

#include <algorithm>
#include <numeric>
#include <queue>

namespace p23d {

namespace {

constexpr std::uint32_t kLeafSize = 12;

} // namespace

NearestNeighborIndex::NearestNeighborIndex(std::span<const Vec3> points) {
  if (points.empty()) {
    throw Error("spatial", "empty", "cannot build a nearest-neighbour index over zero points");
  }
  if (points.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw Error("spatial", "too_large", "point count exceeds 32-bit index range");
  }
  const auto n = static_cast<std::uint32_t>(points.size());
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  bounds_ = Aabb::of(std::vector<Vec3>(points.begin(), points.end()));
  nodes_.reserve(2 * (n / kLeafSize + 1));
  build(0, n, order, points);
  coords_.resize(3 * std::size_t{n});
  indices_ = order;
  for (std::uint32_t i = 0; i < n; ++i) {
    const Vec3 &p = points[order[i]];
    coords_[3 * i + 0] = p.x;
    coords_[3 * i + 1] = p.y;
    coords_[3 * i + 2] = p.z;
  }
}

std::int32_t NearestNeighborIndex::build(std::uint32_t begin, std::uint32_t end,
                                         std::vector<std::uint32_t> &order,
                                         std::span<const Vec3> points) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.emplace_back();
  Vec3 lo = points[order[begin]], hi = lo;
  for (std::uint32_t i = begin + 1; i < end; ++i) {
    const Vec3 &p = points[order[i]];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  nodes_[id].lo = lo;
  nodes_[id].hi = hi;
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  if (end - begin <= kLeafSize) {
    return id;
  }
  const Vec3 ext = hi - lo;
  int axis = 0;
  if (ext.y > ext[axis]) {
    axis = 1;
  }
  if (ext.z > ext[axis]) {
    axis = 2;
  }
  if (ext[axis] == 0.0) {
    // All points coincide; no split separates them.
    return id;
  }
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order.begin() + begin, order.begin() + mid, order.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     const double pa = points[a][axis], pb = points[b][axis];
                     return pa < pb || (pa == pb && a < b);
                   });
  const std::int32_t left = build(begin, mid, order, points);
  const std::int32_t right = build(mid, end, order, points);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

// Each box coordinate is a coordinate of one of the node's points and
// rounding is monotonic, so this never exceeds the squared distance (summed
// in the same x, y, z order) of any point in the box. Pruning on a strict
// ">" is therefore exact, ties included.
double NearestNeighborIndex::box_mindist(const Node &node, const Vec3 &q) const {
  double sum = 0.0;
  for (int a = 0; a < 3; ++a) {
    double d = 0.0;
    if (q[a] < node.lo[a]) {
      d = q[a] - node.lo[a];
    } else if (q[a] > node.hi[a]) {
      d = q[a] - node.hi[a];
    }
    sum += d * d;
  }
  return sum;
}

void NearestNeighborIndex::search_nearest(std::int32_t node_id, const Vec3 &q, Neighbor &best) const {
  const Node &node = nodes_[node_id];
  if (node.leaf()) {
    for (std::uint32_t i = node.begin; i < node.end; ++i) {
      const double *p = &coords_[3 * std::size_t{i}];
      const double dx = q.x - p[0];
      const double dy = q.y - p[1];
      const double dz = q.z - p[2];
      const Neighbor cand{dx * dx + dy * dy + dz * dz, indices_[i]};
      if (cand < best) {
        best = cand;
      }
    }
    return;
  }
  const double dl = box_mindist(nodes_[node.left], q);
  const double dr = box_mindist(nodes_[node.right], q);
  const bool left_first = dl <= dr;
  const std::int32_t first = left_first ? node.left : node.right;
  const std::int32_t second = left_first ? node.right : node.left;
  const double d_first = left_first ? dl : dr;
  const double d_second = left_first ? dr : dl;
  if (d_first <= best.dist_sq) {
    search_nearest(first, q, best);
  }
  if (d_second <= best.dist_sq) {
    search_nearest(second, q, best);
  }
}

Neighbor NearestNeighborIndex::nearest(const Vec3 &q) const {
  Neighbor best;
  search_nearest(0, q, best);
  return best;
}

Neighbor NearestNeighborIndex::nearest_within(const Vec3 &q, double max_dist_sq) const {
  Neighbor best{max_dist_sq, kNoIndex};
  if (box_mindist(nodes_[0], q) <= max_dist_sq) {
    search_nearest(0, q, best);
  }
  if (best.index == kNoIndex) {
    return {std::numeric_limits<double>::infinity(), kNoIndex};
  }
  return best;
}

template <class Heap>
void NearestNeighborIndex::search_knn(std::int32_t node_id, const Vec3 &q, Heap &heap, std::size_t k,
                                      std::uint32_t exclude) const {
  const Node &node = nodes_[node_id];
  auto worst = [&] {
    return heap.size() < k ? std::numeric_limits<double>::infinity() : heap.top().dist_sq;
  };
  if (node.leaf()) {
    for (std::uint32_t i = node.begin; i < node.end; ++i) {
      if (indices_[i] == exclude) {
        continue;
      }
      const double *p = &coords_[3 * std::size_t{i}];
      const double dx = q.x - p[0];
      const double dy = q.y - p[1];
      const double dz = q.z - p[2];
      const Neighbor cand{dx * dx + dy * dy + dz * dz, indices_[i]};
      if (heap.size() < k) {
        heap.push(cand);
      } else if (cand < heap.top()) {
        heap.pop();
        heap.push(cand);
      }
    }
    return;
  }
  const double dl = box_mindist(nodes_[node.left], q);
  const double dr = box_mindist(nodes_[node.right], q);
  const bool left_first = dl <= dr;
  const std::int32_t first = left_first ? node.left : node.right;
  const std::int32_t second = left_first ? node.right : node.left;
  if ((left_first ? dl : dr) <= worst()) {
    search_knn(first, q, heap, k, exclude);
  }
  if ((left_first ? dr : dl) <= worst()) {
    search_knn(second, q, heap, k, exclude);
  }
}

std::vector<Neighbor> NearestNeighborIndex::knn(const Vec3 &q, std::size_t k, std::uint32_t exclude) const {
  std::vector<Neighbor> out;
  if (k == 0) {
    return out;
  }
  std::priority_queue<Neighbor> heap;
  search_knn(0, q, heap, k, exclude);
  out.resize(heap.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = heap.top();
    heap.pop();
  }
  return out;
}

NearestNeighborIndex build_index(const PointCloud &pc) { return NearestNeighborIndex(pc); }

DistanceBatch nearest_distance_batch(const NearestNeighborIndex &index, std::span<const Vec3> queries) {
  DistanceBatch out;
  out.distances.resize(queries.size());
  parallel_for(queries.size(), 2048, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      out.distances[i] = std::sqrt(index.nearest(queries[i]).dist_sq);
    }
  });
  return out;
}

DistanceBatch nearest_distance_batch(const NearestNeighborIndex &index, std::span<const Vec3> queries,
                                     double max_distance) {
  const double max_sq = max_distance * max_distance;
  DistanceBatch out;
  out.distances.resize(queries.size());
  parallel_for(queries.size(), 2048, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      out.distances[i] = std::sqrt(index.nearest_within(queries[i], max_sq).dist_sq);
    }
  });
  return out;
}

DistanceBatch normalize_distances(const DistanceBatch &d, const Aabb &query_bounds) {
  const double extent = query_bounds.max_extent();
  if (!(extent > 0.0) || !std::isfinite(extent)) {
    throw Error("spatial", "degenerate_bounds", "query bounds have zero extent");
  }
  const double half = 0.5 * extent;
  DistanceBatch out;
  out.distances.resize(d.distances.size());
  for (std::size_t i = 0; i < d.distances.size(); ++i) {
    out.distances[i] = d.distances[i] / half;
  }
  return out;
}

} // namespace p23d
