#pragma once

#include "volcap/mesh.hpp"

#include <array>
#include <unordered_map>

namespace volcap {

namespace detail {
extern const int kMcTriTable[256][16];
}

/// Regular lattice of sample points: point(i,j,k) = origin + spacing * (i,j,k).
struct LatticeGeometry {
  Vec3 origin = Vec3::Zero();
  double spacing = 1.0;
  Vec3i dims = Vec3i::Zero();  // sample points per axis

  Vec3 point(int i, int j, int k) const { return origin + spacing * Vec3(i, j, k); }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * static_cast<std::size_t>(dims.y()) + static_cast<std::size_t>(j)) *
               static_cast<std::size_t>(dims.x()) +
           static_cast<std::size_t>(i);
  }
  std::size_t point_count() const {
    return static_cast<std::size_t>(dims.x()) * static_cast<std::size_t>(dims.y()) * static_cast<std::size_t>(dims.z());
  }
};

/// Incremental marching cubes over a lattice. The surface separates
/// {value < iso} (inside) from {value >= iso}; triangles wind counter-clockwise
/// when seen from the >= side. Vertices on shared lattice edges are emitted once.
template <class ValueFn>
class MarchingCubes {
 public:
  MarchingCubes(const LatticeGeometry& lattice, ValueFn value, double iso)
      : lattice_(lattice), value_(std::move(value)), iso_(iso) {}

  /// Polygonizes the cell whose minimum corner is (i,j,k).
  void add_cell(int i, int j, int k) {
    static constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                          {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
    // (corner a, corner b) for the 12 cube edges.
    static constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {3, 2}, {0, 3}, {4, 5}, {5, 6},
                                         {7, 6}, {4, 7}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
    std::array<double, 8> v{};
    int cube = 0;
    for (int c = 0; c < 8; ++c) {
      v[static_cast<std::size_t>(c)] = value_(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2]);
      if (v[static_cast<std::size_t>(c)] < iso_) cube |= 1 << c;
    }
    if (cube == 0 || cube == 255) return;
    const int* row = detail::kMcTriTable[cube];
    for (int t = 0; row[t] != -1; t += 3) {
      Vec3i tri;
      for (int s = 0; s < 3; ++s) {
        const int e = row[t + s];
        const int a = kEdge[e][0], b = kEdge[e][1];
        tri[s] = edge_vertex(i + kCorner[a][0], j + kCorner[a][1], k + kCorner[a][2], i + kCorner[b][0],
                             j + kCorner[b][1], k + kCorner[b][2], v[static_cast<std::size_t>(a)],
                             v[static_cast<std::size_t>(b)]);
      }
      // The table winds towards the inside; flip so the front faces outward.
      mesh_.triangles.emplace_back(tri[0], tri[2], tri[1]);
    }
  }

  void add_all_cells() {
    for (int k = 0; k + 1 < lattice_.dims.z(); ++k)
      for (int j = 0; j + 1 < lattice_.dims.y(); ++j)
        for (int i = 0; i + 1 < lattice_.dims.x(); ++i) add_cell(i, j, k);
  }

  /// Returns the welded mesh (degenerate triangles removed, no normals).
  TriangleMesh finish() {
    TriangleMesh out = std::move(mesh_);
    mesh_ = TriangleMesh{};
    edge_index_.clear();
    weld_and_clean(out);
    return out;
  }

 private:
  int edge_vertex(int ia, int ja, int ka, int ib, int jb, int kb, double va, double vb) {
    // Edges always run from the lower to the upper lattice point along one axis.
    const int axis = ib != ia ? 0 : (jb != ja ? 1 : 2);
    const std::uint64_t key = static_cast<std::uint64_t>(lattice_.index(ia, ja, ka)) * 3u + static_cast<std::uint64_t>(axis);
    auto [it, inserted] = edge_index_.try_emplace(key, static_cast<int>(mesh_.vertices.size()));
    if (inserted) {
      const double denom = vb - va;
      const double t = denom != 0.0 ? (iso_ - va) / denom : 0.5;
      const Vec3 pa = lattice_.point(ia, ja, ka), pb = lattice_.point(ib, jb, kb);
      mesh_.vertices.push_back(pa + t * (pb - pa));
    }
    return it->second;
  }

  LatticeGeometry lattice_;
  ValueFn value_;
  double iso_;
  TriangleMesh mesh_;
  std::unordered_map<std::uint64_t, int> edge_index_;
};

template <class ValueFn>
MarchingCubes<ValueFn> make_marching_cubes(const LatticeGeometry& lattice, ValueFn value, double iso) {
  return MarchingCubes<ValueFn>(lattice, std::move(value), iso);
}

}  // namespace volcap
