#pragma once

#include "p23d/common.hpp"
#include "p23d/field.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace p23d {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;
  std::vector<Vec3> normals; // empty or one per vertex

  bool empty() const { return triangles.empty(); }
  /// Throws unless every index is in range.
  void validate() const;
};

/// Density matching a point opacity alpha over a step delta.
inline double iso_from_alpha(double alpha, double delta) { return -std::log1p(-alpha) / delta; }

/// Marching cubes over vertex samples `values` (x-fastest, resolution
/// res) where "inside" means value > iso. Values outside the grid read 0, so
/// surfaces touching the bounds are closed against a virtual empty layer.
///
/// Faces with two inside and two outside corners on a diagonal are resolved
/// with the asymptotic decider (the surface connects the inside corners iff
/// the bilinear saddle value exceeds iso), computed identically for both
/// cells that share the face. Edge crossings are linearly interpolated and
/// shared between cells. Each cell's boundary loops are fanned from a vertex
/// whose chords cross the cell interior, or around an added centroid vertex
/// when there is none, so the result is a closed 2-manifold. Vertices are
/// numbered in order of first use when cells are visited x-fastest. Triangles
/// are wound counter-clockwise seen from the outside (normals point toward
/// lower values). Zero-area triangles are kept so that the surface stays
/// closed when a crossing lands exactly on a grid vertex.
TriangleMesh marching_cubes(std::span<const double> values, const Resolution &res, const Aabb &bounds,
                            double iso);
/// Over sigma at the field's vertices.
TriangleMesh marching_cubes(const VoxelField &field, double iso);
/// Default iso: alpha = 0.5 over one voxel edge, i.e. ln 2 / edge.
double default_iso(const VoxelField &field);

/// Area-weighted vertex normals (unit length; zero for isolated vertices).
void compute_normals(TriangleMesh &mesh);

struct MeshTopology {
  std::size_t vertices = 0, edges = 0, faces = 0;
  std::size_t boundary_edges = 0;    // used by one triangle
  std::size_t nonmanifold_edges = 0; // used by more than two
  long long euler() const {
    return static_cast<long long>(vertices) - static_cast<long long>(edges) + static_cast<long long>(faces);
  }
};
/// Counts only vertices referenced by a triangle.
MeshTopology mesh_topology(const TriangleMesh &mesh);
/// Signed enclosed volume (positive for outward winding).
double signed_volume(const TriangleMesh &mesh);
double surface_area(const TriangleMesh &mesh);

enum class MeshFormat { Obj, Ply };
/// Picks by extension (.obj / .ply).
MeshFormat mesh_format_for(const std::string &path);
/// OBJ with 1-based indices ("vn" lines when normals are present); PLY
/// binary little-endian with float x,y,z (+ nx,ny,nz) and uchar/int faces.
void export_mesh(const TriangleMesh &mesh, const std::string &path, MeshFormat format);
void export_mesh(const TriangleMesh &mesh, const std::string &path);
/// Reads files written by export_mesh (and plain triangle OBJ/PLY files).
TriangleMesh load_mesh(const std::string &path);

/// `count` points on the surface, triangles chosen proportionally to area.
std::vector<Vec3> sample_surface(const TriangleMesh &mesh, std::size_t count, std::uint64_t seed);

struct GeometryScore {
  double chamfer = 0.0;   // mean A->B + mean B->A
  double precision = 0.0; // fraction of A within tau of B
  double recall = 0.0;    // fraction of B within tau of A
  double fscore = 0.0;
};

/// Symmetric chamfer and F-score at threshold tau (distances strictly below
/// tau count as matched). Both sets must be non-empty.
GeometryScore chamfer_and_fscore(std::span<const Vec3> a, std::span<const Vec3> b, double tau);

/// Number of surface samples used when scoring a mesh.
inline constexpr std::size_t kMeshScoreSamples = 100000;

} // namespace p23d
