#pragma once

#include "volcap/common.hpp"

#include <filesystem>
#include <vector>

namespace volcap {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Vec3i> triangles;
  std::vector<Vec3> normals;   // per vertex, unit length; empty if not computed
  std::vector<Vec3f> colors;   // per vertex RGB in [0,1]; empty if uncolored

  bool empty() const { return triangles.empty(); }
  bool has_normals() const { return !normals.empty() && normals.size() == vertices.size(); }
  bool has_colors() const { return !colors.empty() && colors.size() == vertices.size(); }

  /// Checks index ranges, unit normals (1e-4) and triangle areas (> 1e-12 m^2).
  void validate() const;
};

double triangle_area(const TriangleMesh& mesh, std::size_t tri);

/// Area-weighted vertex normals from face orientation.
void compute_vertex_normals(TriangleMesh& mesh);

/// Merges bitwise-identical vertex positions, then drops triangles that
/// collapse or fall under the area tolerance. Unreferenced vertices are removed.
void weld_and_clean(TriangleMesh& mesh, double min_area = 1e-12);

/// Number of edges not shared by exactly two triangles.
std::size_t count_boundary_or_nonmanifold_edges(const TriangleMesh& mesh);
inline bool is_watertight(const TriangleMesh& mesh) {
  return !mesh.empty() && count_boundary_or_nonmanifold_edges(mesh) == 0;
}

/// Per-triangle component labels (triangles sharing a vertex are connected).
std::vector<int> connected_components(const TriangleMesh& mesh, int* count = nullptr);
int count_components(const TriangleMesh& mesh, std::size_t min_triangles = 1);

void transform_mesh(TriangleMesh& mesh, const Mat3& rotation, const Vec3& translation);

void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh, bool binary = true);
TriangleMesh read_ply(const std::filesystem::path& path);
void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh);

}  // namespace volcap
