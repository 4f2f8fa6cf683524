#pragma once

#include "volcap/marching_cubes.hpp"
#include "volcap/mesh.hpp"
#include "volcap/sensor_io.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace volcap {

struct TsdfSample {
  double tsdf = 0;
  double weight = 0;
};

/// Dense voxel grid of normalized truncated signed distances (positive in
/// free space, negative behind the surface) with per-voxel weights.
/// Voxel (i,j,k) is centered at origin + voxel_size * (i,j,k).
class TsdfVolume {
 public:
  static constexpr float kDefaultMaxWeight = 64.0f;

  TsdfVolume() = default;
  /// truncation <= 0 selects the default of 4 voxels.
  TsdfVolume(const Vec3& origin, double voxel_size, const Vec3i& dims, double truncation = 0.0,
             float max_weight = kDefaultMaxWeight);

  /// Cube of `dims` voxels per axis centered on `center`.
  static TsdfVolume centered(const Vec3& center, double voxel_size, int dims, double truncation = 0.0);

  const Vec3& origin() const { return lattice_.origin; }
  double voxel_size() const { return lattice_.spacing; }
  const Vec3i& dims() const { return lattice_.dims; }
  double truncation() const { return truncation_; }
  float max_weight() const { return max_weight_; }
  const LatticeGeometry& lattice() const { return lattice_; }
  std::size_t voxel_count() const { return tsdf_.size(); }

  std::size_t index(int i, int j, int k) const { return lattice_.index(i, j, k); }
  Vec3i coords(std::size_t idx) const;
  Vec3 voxel_center(int i, int j, int k) const { return lattice_.point(i, j, k); }
  Vec3 voxel_center(std::size_t idx) const {
    const Vec3i c = coords(idx);
    return voxel_center(c.x(), c.y(), c.z());
  }
  bool contains(const Vec3& p) const;

  float tsdf(std::size_t idx) const { return tsdf_[idx]; }
  float weight(std::size_t idx) const { return weight_[idx]; }
  void set_voxel(std::size_t idx, float tsdf, float weight) {
    tsdf_[idx] = tsdf;
    weight_[idx] = weight;
  }
  const std::vector<float>& tsdf_values() const { return tsdf_; }
  const std::vector<float>& weight_values() const { return weight_; }

  /// Observed and inside the truncated band of the surface.
  bool in_band(std::size_t idx) const { return weight_[idx] > 0.0f && std::abs(tsdf_[idx]) < 1.0f; }

  /// Running-average update with one projective signed distance sample
  /// (meters). Returns false when the sample lies deeper than the truncation
  /// behind the surface and is therefore ignored.
  bool fuse_sample(std::size_t idx, double signed_distance);

  /// Projective TSDF integration of one depth frame.
  void integrate(const DepthFrame& frame);
  void integrate(std::span<const DepthFrame> frames);

  /// Projective signed distance d - z for a point seen from `frame`, or nullopt.
  static std::optional<double> projective_distance(const Vec3& point, const DepthFrame& frame);

  /// Trilinear interpolation; nullopt outside the grid or next to unobserved voxels.
  std::optional<TsdfSample> query(const Vec3& p) const;

  /// Marching cubes at level 0, skipping cells with an unobserved corner.
  /// Normals come from the central-difference TSDF gradient.
  TriangleMesh extract_mesh() const;

  // Raw little-endian float32 tsdf array then weight array, plus a JSON
  // sidecar (<path>.json) with origin, voxel_size, dims, truncation.
  void write_dump(const std::filesystem::path& path) const;
  static TsdfVolume read_dump(const std::filesystem::path& path);

 private:
  Vec3 gradient(const Vec3& p) const;

  LatticeGeometry lattice_;
  double truncation_ = 0;
  float max_weight_ = kDefaultMaxWeight;
  std::vector<float> tsdf_;
  std::vector<float> weight_;
};

}  // namespace volcap
