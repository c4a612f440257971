#include "p23d/pointcloud.hpp"

#include "p23d/spatial.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <unordered_map>
#include <unordered_set>

namespace p23d {

PointCloud load_point_cloud(const std::string &path) {
  const ply::File file = ply::read(path);
  const ply::Element *vertex = file.find("vertex");
  if (vertex == nullptr) {
    throw Error("pointcloud", "load", path + ": element 'vertex' missing");
  }
  if (vertex->count == 0) {
    throw Error("pointcloud", "load", path + ": element 'vertex' has zero entries");
  }
  int xyz[3];
  const char *names[3] = {"x", "y", "z"};
  for (int a = 0; a < 3; ++a) {
    xyz[a] = vertex->find(names[a]);
    if (xyz[a] < 0) {
      throw Error("pointcloud", "load", path + ": element 'vertex' lacks property '" + names[a] + "'");
    }
    const ply::Property &prop = vertex->properties[xyz[a]];
    if (prop.is_list || !ply::is_float_type(prop.type)) {
      throw Error("pointcloud", "load",
                  path + ": element 'vertex' property '" + names[a] + "' has non-float type '" +
                      ply::type_name(prop.type) + "'");
    }
  }
  PointCloud pc;
  pc.points.resize(vertex->count);
  for (std::size_t i = 0; i < vertex->count; ++i) {
    pc.points[i] = {vertex->columns[xyz[0]][i], vertex->columns[xyz[1]][i], vertex->columns[xyz[2]][i]};
    if (!is_finite(pc.points[i])) {
      throw Error("pointcloud", "load", path + ": element 'vertex' row " + std::to_string(i) +
                                            " has a non-finite coordinate");
    }
  }
  const int r = vertex->find("red"), g = vertex->find("green"), b = vertex->find("blue");
  if (r >= 0 && g >= 0 && b >= 0) {
    // uchar colours map to [0,1]; float colours are taken as already in [0,1].
    const double scale = ply::is_float_type(vertex->properties[r].type) ? 1.0 : 1.0 / 255.0;
    pc.colors.resize(vertex->count);
    for (std::size_t i = 0; i < vertex->count; ++i) {
      pc.colors[i] = {static_cast<float>(vertex->columns[r][i] * scale),
                      static_cast<float>(vertex->columns[g][i] * scale),
                      static_cast<float>(vertex->columns[b][i] * scale)};
    }
  }
  return pc;
}

void save_point_cloud(const PointCloud &pc, const std::string &path, ply::Format format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("pointcloud", "save", path + ": cannot open for writing");
  }
  const bool colors = pc.has_colors();
  out << "ply\nformat " << (format == ply::Format::Ascii ? "ascii" : "binary_little_endian")
      << " 1.0\nelement vertex " << pc.size()
      << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (colors) {
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  }
  out << "end_header\n";
  auto to_byte = [](float c) {
    return static_cast<unsigned char>(std::lround(std::clamp(c, 0.0f, 1.0f) * 255.0f));
  };
  if (format == ply::Format::Ascii) {
    out << std::setprecision(9);
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const Vec3 &p = pc.points[i];
      out << static_cast<float>(p.x) << ' ' << static_cast<float>(p.y) << ' ' << static_cast<float>(p.z);
      if (colors) {
        for (float c : pc.colors[i]) {
          out << ' ' << int{to_byte(c)};
        }
      }
      out << '\n';
    }
  } else {
    static_assert(std::endian::native == std::endian::little, "binary PLY writer assumes a little-endian host");
    std::vector<char> buf;
    const std::size_t stride = 12 + (colors ? 3 : 0);
    buf.resize(stride * pc.size());
    for (std::size_t i = 0; i < pc.size(); ++i) {
      char *dst = buf.data() + i * stride;
      const float f[3] = {static_cast<float>(pc.points[i].x), static_cast<float>(pc.points[i].y),
                          static_cast<float>(pc.points[i].z)};
      std::memcpy(dst, f, 12);
      if (colors) {
        for (int c = 0; c < 3; ++c) {
          dst[12 + c] = static_cast<char>(to_byte(pc.colors[i][c]));
        }
      }
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) {
    throw Error("pointcloud", "save", path + ": write failed");
  }
}

std::pair<PointCloud, NormalizationTransform>
normalize_to_bounds(const PointCloud &pc, const Aabb &bounds, double margin) {
  if (pc.empty()) {
    throw Error("pointcloud", "degenerate", "cannot normalize an empty cloud");
  }
  const Aabb box = Aabb::of(pc.points);
  const double extent = box.max_extent();
  if (!(extent > 0.0)) {
    throw Error("pointcloud", "degenerate", "all points are identical; cloud has zero extent");
  }
  NormalizationTransform t;
  t.source_center = box.center();
  t.target_center = bounds.center();
  t.scale = margin * bounds.max_extent() / extent;
  PointCloud out = pc;
  for (Vec3 &p : out.points) {
    p = t.apply(p);
  }
  return {std::move(out), t};
}

namespace {

struct BitKey {
  std::uint64_t x, y, z;
  bool operator==(const BitKey &) const = default;
};
struct BitKeyHash {
  std::size_t operator()(const BitKey &k) const {
    std::uint64_t h = k.x * 0x9e3779b97f4a7c15ULL;
    h ^= k.y + 0x7f4a7c159e3779b9ULL + (h << 6) + (h >> 2);
    h ^= k.z + 0x94d049bb133111ebULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};
struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey &) const = default;
};
struct CellKeyHash {
  std::size_t operator()(const CellKey &k) const {
    return static_cast<std::size_t>(k.x * 73856093LL ^ k.y * 19349663LL ^ k.z * 83492791LL);
  }
};

PointCloud take(const PointCloud &pc, const std::vector<std::size_t> &keep) {
  PointCloud out;
  out.points.reserve(keep.size());
  for (std::size_t i : keep) {
    out.points.push_back(pc.points[i]);
  }
  if (pc.has_colors()) {
    out.colors.reserve(keep.size());
    for (std::size_t i : keep) {
      out.colors.push_back(pc.colors[i]);
    }
  }
  return out;
}

} // namespace

PointCloud dedup(const PointCloud &pc, double epsilon) {
  if (epsilon < 0.0 || !std::isfinite(epsilon)) {
    throw Error("pointcloud", "argument", "dedup epsilon must be finite and >= 0");
  }
  std::vector<std::size_t> keep;
  keep.reserve(pc.size());
  if (epsilon == 0.0) {
    std::unordered_set<BitKey, BitKeyHash> seen;
    seen.reserve(pc.size());
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const Vec3 &p = pc.points[i];
      if (seen.insert({std::bit_cast<std::uint64_t>(p.x), std::bit_cast<std::uint64_t>(p.y),
                       std::bit_cast<std::uint64_t>(p.z)})
              .second) {
        keep.push_back(i);
      }
    }
    return take(pc, keep);
  }
  // Cells of edge epsilon: any point within epsilon (L-inf) of p sits in one
  // of the 27 cells around p's cell.
  std::unordered_map<CellKey, std::vector<std::uint32_t>, CellKeyHash> grid;
  grid.reserve(pc.size());
  auto cell_of = [&](const Vec3 &p) {
    return CellKey{static_cast<std::int64_t>(std::floor(p.x / epsilon)),
                   static_cast<std::int64_t>(std::floor(p.y / epsilon)),
                   static_cast<std::int64_t>(std::floor(p.z / epsilon))};
  };
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Vec3 &p = pc.points[i];
    const CellKey c = cell_of(p);
    bool duplicate = false;
    for (std::int64_t dz = -1; dz <= 1 && !duplicate; ++dz) {
      for (std::int64_t dy = -1; dy <= 1 && !duplicate; ++dy) {
        for (std::int64_t dx = -1; dx <= 1 && !duplicate; ++dx) {
          const auto it = grid.find({c.x + dx, c.y + dy, c.z + dz});
          if (it == grid.end()) {
            continue;
          }
          for (std::uint32_t j : it->second) {
            const Vec3 &o = pc.points[j];
            if (std::abs(o.x - p.x) <= epsilon && std::abs(o.y - p.y) <= epsilon &&
                std::abs(o.z - p.z) <= epsilon) {
              duplicate = true;
              break;
            }
          }
        }
      }
    }
    if (!duplicate) {
      keep.push_back(i);
      grid[c].push_back(static_cast<std::uint32_t>(i));
    }
  }
  return take(pc, keep);
}

double default_dedup_epsilon(const PointCloud &pc) {
  if (pc.empty()) {
    return 0.0;
  }
  return 1e-7 * Aabb::of(pc.points).max_extent();
}

PointCloud upsample(const PointCloud &pc, int q, int iterations, double epsilon) {
  if (q < 1 || iterations < 0) {
    throw Error("pointcloud", "argument", "upsample requires q >= 1 and n >= 0");
  }
  if (pc.empty()) {
    throw Error("pointcloud", "argument", "upsample requires a non-empty cloud");
  }
  const double eps = epsilon < 0.0 ? default_dedup_epsilon(pc) : epsilon;
  PointCloud cur = pc;
  for (int it = 0; it < iterations; ++it) {
    const std::size_t n = cur.size();
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(q), n - 1);
    if (k == 0) {
      break;
    }
    const NearestNeighborIndex index(cur);
    std::vector<std::uint32_t> nbrs(n * k);
    parallel_for(n, 256, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const auto found = index.knn(cur.points[i], k, static_cast<std::uint32_t>(i));
        for (std::size_t j = 0; j < k; ++j) {
          nbrs[i * k + j] = found[j].index;
        }
      }
    });
    PointCloud grown;
    grown.points.reserve(n * (k + 1));
    grown.points = cur.points;
    const bool colors = cur.has_colors();
    if (colors) {
      grown.colors.reserve(n * (k + 1));
      grown.colors = cur.colors;
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const std::uint32_t o = nbrs[i * k + j];
        grown.points.push_back((cur.points[i] + cur.points[o]) * 0.5);
        if (colors) {
          const auto &a = cur.colors[i];
          const auto &c = cur.colors[o];
          grown.colors.push_back({(a[0] + c[0]) * 0.5f, (a[1] + c[1]) * 0.5f, (a[2] + c[2]) * 0.5f});
        }
      }
    }
    cur = dedup(grown, eps);
  }
  return cur;
}

} // namespace p23d
