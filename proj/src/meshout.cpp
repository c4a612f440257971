#include "p23d/meshout.hpp"

#include "p23d/ply.hpp"
#include "p23d/spatial.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace p23d {

namespace {

// Cube faces as corner ids (x + 2y + 4z), counter-clockwise seen from outside.
constexpr int kFaces[6][4] = {
    {0, 4, 6, 2}, // -x
    {1, 3, 7, 5}, // +x
    {0, 1, 5, 4}, // -y
    {2, 6, 7, 3}, // +y
    {0, 2, 3, 1}, // -z
    {4, 5, 7, 6}, // +z
};

double triangle_area(const Vec3 &a, const Vec3 &b, const Vec3 &c) { return 0.5 * length(cross(b - a, c - a)); }

class Extractor {
public:
  Extractor(std::span<const double> values, const Resolution &res, const Aabb &bounds, double iso)
      : values_(values), res_(res), bounds_(bounds), iso_(iso) {
    for (int a = 0; a < 3; ++a) {
      step_[a] = (bounds.hi[a] - bounds.lo[a]) / static_cast<double>(res[a] - 1);
      pdim_[a] = static_cast<std::uint64_t>(res[a]) + 2;
    }
  }

  TriangleMesh run() {
    for (int k = -1; k < res_[2]; ++k) {
      for (int j = -1; j < res_[1]; ++j) {
        for (int i = -1; i < res_[0]; ++i) {
          cell(i, j, k);
        }
      }
    }
    return finish();
  }

private:
  double value(int i, int j, int k) const {
    if (i < 0 || j < 0 || k < 0 || i >= res_[0] || j >= res_[1] || k >= res_[2]) {
      return 0.0;
    }
    return values_[static_cast<std::size_t>(i) +
                   static_cast<std::size_t>(res_[0]) * (j + static_cast<std::size_t>(res_[1]) * k)];
  }

  std::uint64_t padded_index(int i, int j, int k) const {
    return static_cast<std::uint64_t>(i + 1) + pdim_[0] * (static_cast<std::uint64_t>(j + 1) +
                                                           pdim_[1] * static_cast<std::uint64_t>(k + 1));
  }

  Vec3 position(int i, int j, int k) const {
    return {bounds_.lo.x + i * step_[0], bounds_.lo.y + j * step_[1], bounds_.lo.z + k * step_[2]};
  }

  void cell(int i, int j, int k) {
    std::array<double, 8> f;
    unsigned mask = 0;
    for (int c = 0; c < 8; ++c) {
      ijk_[c] = {i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)};
      f[c] = value(ijk_[c][0], ijk_[c][1], ijk_[c][2]);
      if (f[c] > iso_) {
        mask |= 1u << c;
      }
    }
    if (mask == 0 || mask == 0xff) {
      return;
    }
    f_ = f;
    auto inside = [&](int c) { return ((mask >> c) & 1u) != 0; };

    // Oriented segments on the cube surface, each from an edge where the
    // boundary walk leaves the inside region to one where it enters.
    std::array<std::uint32_t, 12> from{}, to{};
    std::array<unsigned, 12> faces_of{};
    int nseg = 0;
    for (const auto &face : kFaces) {
      int exits[2], enters[2], nx = 0, ne = 0;
      int crossing = 0;
      for (int m = 0; m < 4; ++m) {
        const int a = face[m], b = face[(m + 1) % 4];
        if (inside(a) && !inside(b)) {
          exits[nx++] = m;
          ++crossing;
        } else if (!inside(a) && inside(b)) {
          enters[ne++] = m;
          ++crossing;
        }
      }
      if (crossing == 0) {
        continue;
      }
      auto point = [&](int m) { return edge_vertex(face[m], face[(m + 1) % 4]); };
      auto emit = [&](int m, int e) {
        from[nseg] = point(m);
        to[nseg] = point(e);
        faces_of[nseg] = edge_faces(face[m], face[(m + 1) % 4]);
        ++nseg;
      };
      if (crossing == 2) {
        emit(exits[0], enters[0]);
        continue;
      }
      // Ambiguous face: every edge crosses, exits and enters alternate.
      const bool joined = inside_connected(face);
      for (int x = 0; x < 2; ++x) {
        const int m = exits[x];
        emit(m, joined ? (m + 1) % 4 : (m + 3) % 4);
      }
    }

    // Chain segments into closed loops and fan-triangulate each.
    std::array<bool, 12> used{};
    for (int s = 0; s < nseg; ++s) {
      if (used[s]) {
        continue;
      }
      std::vector<std::uint32_t> loop;
      std::vector<unsigned> masks;
      int cur = s;
      while (!used[cur]) {
        used[cur] = true;
        loop.push_back(from[cur]);
        masks.push_back(faces_of[cur]);
        const std::uint32_t next = to[cur];
        int found = -1;
        for (int t = 0; t < nseg; ++t) {
          if (!used[t] && from[t] == next) {
            found = t;
            break;
          }
        }
        if (found < 0) {
          break;
        }
        cur = found;
      }
      triangulate(loop, masks);
    }
  }

  // Fan from an apex whose chords all cross the cell interior; a chord lying
  // on a cube face could coincide with one in the neighbouring cell. Loops
  // with no such apex are fanned around their centroid instead.
  void triangulate(const std::vector<std::uint32_t> &loop, const std::vector<unsigned> &masks) {
    const std::size_t n = loop.size();
    for (std::size_t a = 0; a < n; ++a) {
      bool ok = true;
      for (std::size_t d = 2; d + 1 < n && ok; ++d) {
        ok = (masks[a] & masks[(a + d) % n]) == 0;
      }
      if (!ok) {
        continue;
      }
      for (std::size_t d = 1; d + 1 < n; ++d) {
        triangles_.push_back({loop[a], loop[(a + d + 1) % n], loop[(a + d) % n]});
      }
      return;
    }
    Vec3 c{};
    for (auto v : loop) {
      c = c + vertices_[v];
    }
    const auto centre = static_cast<std::uint32_t>(vertices_.size());
    vertices_.push_back(c / static_cast<double>(n));
    for (std::size_t v = 0; v < n; ++v) {
      triangles_.push_back({centre, loop[(v + 1) % n], loop[v]});
    }
  }

  // Bit 2 * axis + side for each cube face containing the edge.
  static unsigned edge_faces(int ca, int cb) {
    unsigned mask = 0;
    for (int b = 0; b < 3; ++b) {
      if (((ca >> b) & 1) == ((cb >> b) & 1)) {
        mask |= 1u << (2 * b + ((ca >> b) & 1));
      }
    }
    return mask;
  }

  // Canonical over the face's corners sorted by grid index, so both cells
  // sharing the face reach the same decision.
  bool inside_connected(const int (&face)[4]) const {
    std::array<std::pair<std::uint64_t, double>, 4> c;
    for (int m = 0; m < 4; ++m) {
      const auto &g = ijk_[face[m]];
      c[m] = {padded_index(g[0], g[1], g[2]), f_[face[m]]};
    }
    std::sort(c.begin(), c.end());
    const double num = c[0].second * c[3].second - c[1].second * c[2].second;
    const double den = (c[0].second + c[3].second) - (c[1].second + c[2].second);
    return num / den > iso_;
  }

  std::uint32_t edge_vertex(int ca, int cb) {
    if (ca > cb) {
      std::swap(ca, cb);
    }
    const int axis = (cb - ca) == 1 ? 0 : (cb - ca) == 2 ? 1 : 2;
    const auto &ga = ijk_[ca];
    const auto &gb = ijk_[cb];
    const std::uint64_t key = padded_index(ga[0], ga[1], ga[2]) * 3 + static_cast<std::uint64_t>(axis);
    const auto [it, inserted] = edge_ids_.try_emplace(key, static_cast<std::uint32_t>(vertices_.size()));
    if (inserted) {
      const double fa = f_[ca], fb = f_[cb];
      const double t = (iso_ - fa) / (fb - fa);
      const Vec3 pa = position(ga[0], ga[1], ga[2]);
      const Vec3 pb = position(gb[0], gb[1], gb[2]);
      vertices_.push_back(pa + (pb - pa) * t);
    }
    return it->second;
  }

  TriangleMesh finish() {
    TriangleMesh mesh;
    std::vector<std::uint32_t> remap(vertices_.size(), std::numeric_limits<std::uint32_t>::max());
    for (const auto &t : triangles_) {
      std::array<std::uint32_t, 3> out;
      for (int c = 0; c < 3; ++c) {
        std::uint32_t &r = remap[t[c]];
        if (r == std::numeric_limits<std::uint32_t>::max()) {
          r = static_cast<std::uint32_t>(mesh.vertices.size());
          mesh.vertices.push_back(vertices_[t[c]]);
        }
        out[c] = r;
      }
      mesh.triangles.push_back(out);
    }
    return mesh;
  }

  std::span<const double> values_;
  Resolution res_;
  Aabb bounds_;
  double iso_;
  double step_[3];
  std::uint64_t pdim_[3];

  std::array<std::array<int, 3>, 8> ijk_{};
  std::array<double, 8> f_{};
  std::unordered_map<std::uint64_t, std::uint32_t> edge_ids_;
  std::vector<Vec3> vertices_;
  std::vector<std::array<std::uint32_t, 3>> triangles_;
};

[[noreturn]] void io_error(const std::string &path, const std::string &what) {
  throw Error("meshout", "io", path + ": " + what);
}

std::string lower_extension(const std::string &path) {
  const auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

void append_polygon(TriangleMesh &mesh, const std::vector<long long> &idx, const std::string &path) {
  for (long long v : idx) {
    if (v < 0 || static_cast<std::size_t>(v) >= mesh.vertices.size()) {
      throw Error("meshout", "load", path + ": face index " + std::to_string(v) + " out of range");
    }
  }
  for (std::size_t v = 1; v + 1 < idx.size(); ++v) {
    mesh.triangles.push_back({static_cast<std::uint32_t>(idx[0]), static_cast<std::uint32_t>(idx[v]),
                              static_cast<std::uint32_t>(idx[v + 1])});
  }
}

TriangleMesh load_obj(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    io_error(path, "cannot open");
  }
  TriangleMesh mesh;
  std::vector<Vec3> normals;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 v;
      ls >> v.x >> v.y >> v.z;
      mesh.vertices.push_back(v);
    } else if (tag == "vn") {
      Vec3 v;
      ls >> v.x >> v.y >> v.z;
      normals.push_back(v);
    } else if (tag == "f") {
      std::vector<long long> idx;
      std::string tok;
      while (ls >> tok) {
        const long long v = std::stoll(tok.substr(0, tok.find('/')));
        idx.push_back(v < 0 ? static_cast<long long>(mesh.vertices.size()) + v : v - 1);
      }
      append_polygon(mesh, idx, path);
    }
  }
  if (normals.size() == mesh.vertices.size()) {
    mesh.normals = std::move(normals);
  }
  return mesh;
}

TriangleMesh load_ply_mesh(const std::string &path) {
  const ply::File file = ply::read(path);
  const ply::Element *ve = file.find("vertex");
  if (ve == nullptr) {
    throw Error("meshout", "load", path + ": no vertex element");
  }
  const int px = ve->find("x"), py = ve->find("y"), pz = ve->find("z");
  if (px < 0 || py < 0 || pz < 0) {
    throw Error("meshout", "load", path + ": element 'vertex' lacks x/y/z");
  }
  TriangleMesh mesh;
  mesh.vertices.resize(ve->count);
  for (std::size_t i = 0; i < ve->count; ++i) {
    mesh.vertices[i] = {ve->columns[px][i], ve->columns[py][i], ve->columns[pz][i]};
  }
  const int nx = ve->find("nx"), ny = ve->find("ny"), nz = ve->find("nz");
  if (nx >= 0 && ny >= 0 && nz >= 0) {
    mesh.normals.resize(ve->count);
    for (std::size_t i = 0; i < ve->count; ++i) {
      mesh.normals[i] = {ve->columns[nx][i], ve->columns[ny][i], ve->columns[nz][i]};
    }
  }
  if (const ply::Element *fe = file.find("face")) {
    int pi = fe->find("vertex_indices");
    if (pi < 0) {
      pi = fe->find("vertex_index");
    }
    if (pi < 0 || !fe->properties[pi].is_list) {
      throw Error("meshout", "load", path + ": element 'face' lacks a vertex_indices list");
    }
    for (std::size_t r = 0; r < fe->count; ++r) {
      const auto &row = fe->lists[pi][r];
      std::vector<long long> idx(row.begin(), row.end());
      append_polygon(mesh, idx, path);
    }
  }
  return mesh;
}

} // namespace

void TriangleMesh::validate() const {
  for (const auto &t : triangles) {
    for (auto v : t) {
      if (v >= vertices.size()) {
        throw Error("meshout", "invalid", "triangle index " + std::to_string(v) + " out of range");
      }
    }
  }
  if (!normals.empty() && normals.size() != vertices.size()) {
    throw Error("meshout", "invalid", "normal count differs from vertex count");
  }
}

TriangleMesh marching_cubes(std::span<const double> values, const Resolution &res, const Aabb &bounds,
                            double iso) {
  if (!(iso > 0.0)) {
    throw Error("meshout", "iso", "iso must be > 0");
  }
  const std::size_t n = static_cast<std::size_t>(res[0]) * res[1] * res[2];
  if (values.size() != n || res[0] < 2 || res[1] < 2 || res[2] < 2) {
    throw Error("meshout", "shape", "value grid does not match its resolution");
  }
  return Extractor(values, res, bounds, iso).run();
}

TriangleMesh marching_cubes(const VoxelField &field, double iso) {
  std::vector<double> sigma(field.vertex_count());
  for (std::size_t v = 0; v < sigma.size(); ++v) {
    sigma[v] = vertex_sigma(field, v);
  }
  return marching_cubes(sigma, field.resolution(), field.bounds(), iso);
}

double default_iso(const VoxelField &field) { return iso_from_alpha(0.5, field.voxel_edge()); }

void compute_normals(TriangleMesh &mesh) {
  mesh.normals.assign(mesh.vertices.size(), Vec3{});
  for (const auto &t : mesh.triangles) {
    const Vec3 n = cross(mesh.vertices[t[1]] - mesh.vertices[t[0]], mesh.vertices[t[2]] - mesh.vertices[t[0]]);
    for (auto v : t) {
      mesh.normals[v] = mesh.normals[v] + n;
    }
  }
  for (auto &n : mesh.normals) {
    const double len = length(n);
    n = len > 0 ? n / len : Vec3{};
  }
}

MeshTopology mesh_topology(const TriangleMesh &mesh) {
  MeshTopology topo;
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> edges;
  std::vector<bool> used(mesh.vertices.size(), false);
  for (const auto &t : mesh.triangles) {
    for (int c = 0; c < 3; ++c) {
      used[t[c]] = true;
      std::uint32_t a = t[c], b = t[(c + 1) % 3];
      if (a > b) {
        std::swap(a, b);
      }
      ++edges[{a, b}];
    }
  }
  topo.vertices = static_cast<std::size_t>(std::count(used.begin(), used.end(), true));
  topo.edges = edges.size();
  topo.faces = mesh.triangles.size();
  for (const auto &[e, count] : edges) {
    if (count == 1) {
      ++topo.boundary_edges;
    } else if (count > 2) {
      ++topo.nonmanifold_edges;
    }
  }
  return topo;
}

double signed_volume(const TriangleMesh &mesh) {
  std::vector<double> parts;
  parts.reserve(mesh.triangles.size());
  for (const auto &t : mesh.triangles) {
    parts.push_back(dot(mesh.vertices[t[0]], cross(mesh.vertices[t[1]], mesh.vertices[t[2]])) / 6.0);
  }
  return pairwise_sum(parts);
}

double surface_area(const TriangleMesh &mesh) {
  std::vector<double> parts;
  parts.reserve(mesh.triangles.size());
  for (const auto &t : mesh.triangles) {
    parts.push_back(triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]));
  }
  return pairwise_sum(parts);
}

MeshFormat mesh_format_for(const std::string &path) {
  const std::string ext = lower_extension(path);
  if (ext == "obj") {
    return MeshFormat::Obj;
  }
  if (ext == "ply") {
    return MeshFormat::Ply;
  }
  throw Error("meshout", "format", path + ": unknown mesh extension (use .obj or .ply)");
}

void export_mesh(const TriangleMesh &mesh, const std::string &path) { export_mesh(mesh, path, mesh_format_for(path)); }

void export_mesh(const TriangleMesh &mesh, const std::string &path, MeshFormat format) {
  mesh.validate();
  const bool normals = !mesh.normals.empty();
  if (format == MeshFormat::Obj) {
    std::ofstream out(path);
    if (!out) {
      io_error(path, "cannot open for writing");
    }
    char buf[128];
    for (const auto &v : mesh.vertices) {
      std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", v.x, v.y, v.z);
      out << buf;
    }
    for (const auto &n : mesh.normals) {
      std::snprintf(buf, sizeof(buf), "vn %.9g %.9g %.9g\n", n.x, n.y, n.z);
      out << buf;
    }
    for (const auto &t : mesh.triangles) {
      if (normals) {
        out << "f " << t[0] + 1 << "//" << t[0] + 1 << ' ' << t[1] + 1 << "//" << t[1] + 1 << ' ' << t[2] + 1
            << "//" << t[2] + 1 << '\n';
      } else {
        out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
      }
    }
    if (!out) {
      io_error(path, "write failed");
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    io_error(path, "cannot open for writing");
  }
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << mesh.vertices.size()
      << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (normals) {
    out << "property float nx\nproperty float ny\nproperty float nz\n";
  }
  out << "element face " << mesh.triangles.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
  std::vector<char> buf;
  buf.reserve(mesh.vertices.size() * (normals ? 24 : 12) + mesh.triangles.size() * 13);
  auto put_f = [&](double d) {
    const float f = static_cast<float>(d);
    const char *p = reinterpret_cast<const char *>(&f);
    buf.insert(buf.end(), p, p + 4);
  };
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    put_f(mesh.vertices[i].x);
    put_f(mesh.vertices[i].y);
    put_f(mesh.vertices[i].z);
    if (normals) {
      put_f(mesh.normals[i].x);
      put_f(mesh.normals[i].y);
      put_f(mesh.normals[i].z);
    }
  }
  for (const auto &t : mesh.triangles) {
    buf.push_back(3);
    for (auto v : t) {
      const auto i = static_cast<std::int32_t>(v);
      const char *p = reinterpret_cast<const char *>(&i);
      buf.insert(buf.end(), p, p + 4);
    }
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) {
    io_error(path, "write failed");
  }
}

TriangleMesh load_mesh(const std::string &path) {
  TriangleMesh mesh = mesh_format_for(path) == MeshFormat::Obj ? load_obj(path) : load_ply_mesh(path);
  mesh.validate();
  return mesh;
}

std::vector<Vec3> sample_surface(const TriangleMesh &mesh, std::size_t count, std::uint64_t seed) {
  if (mesh.triangles.empty()) {
    throw Error("meshout", "empty", "cannot sample an empty mesh");
  }
  std::vector<double> cdf(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto &t = mesh.triangles[i];
    total += triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
    cdf[i] = total;
  }
  Rng rng(seed);
  std::vector<Vec3> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const double u = rng.uniform() * total;
    std::size_t ti = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    ti = std::min(ti, cdf.size() - 1);
    const auto &t = mesh.triangles[ti];
    const double r1 = std::sqrt(rng.uniform());
    const double r2 = rng.uniform();
    const Vec3 &a = mesh.vertices[t[0]], &b = mesh.vertices[t[1]], &c = mesh.vertices[t[2]];
    out.push_back(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
  }
  return out;
}

GeometryScore chamfer_and_fscore(std::span<const Vec3> a, std::span<const Vec3> b, double tau) {
  if (a.empty() || b.empty()) {
    throw Error("meshout", "empty", "chamfer/F-score need two non-empty point sets");
  }
  const NearestNeighborIndex ia(a), ib(b);
  const DistanceBatch ab = nearest_distance_batch(ib, a);
  const DistanceBatch ba = nearest_distance_batch(ia, b);
  GeometryScore s;
  s.chamfer = pairwise_sum(ab.distances) / static_cast<double>(a.size()) +
              pairwise_sum(ba.distances) / static_cast<double>(b.size());
  auto within = [tau](const std::vector<double> &d) {
    return static_cast<double>(std::count_if(d.begin(), d.end(), [tau](double x) { return x < tau; })) /
           static_cast<double>(d.size());
  };
  s.precision = within(ab.distances);
  s.recall = within(ba.distances);
  s.fscore = s.precision + s.recall > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

} // namespace p23d
