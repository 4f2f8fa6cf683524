#pragma once

#include "volcap/mesh.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace volcap {

/// Raised when a metric is requested on an empty mesh.
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Closest point on triangle (a, b, c) to p. `bary` receives the barycentric
/// coordinates of the result when non-null.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c, Vec3* bary = nullptr);

struct ClosestHit {
  std::size_t triangle = 0;
  Vec3 point = Vec3::Zero();
  Vec3 bary = Vec3::Zero();
  double distance = 0;
};

/// Axis-aligned bounding-volume hierarchy over the triangles of a mesh.
/// The mesh must outlive the tree.
class TriangleBvh {
 public:
  explicit TriangleBvh(const TriangleMesh& mesh);

  ClosestHit closest(const Vec3& p) const;
  /// Reference implementation scanning every triangle.
  ClosestHit closest_brute_force(const Vec3& p) const;

  /// Normal of the surface at a hit: interpolated vertex normals when present,
  /// the face normal otherwise.
  Vec3 normal_at(const ClosestHit& hit) const;

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1, right = -1;  // children, or -1 for a leaf
    std::uint32_t first = 0, count = 0;
  };

  int build(std::uint32_t first, std::uint32_t count, int depth);
  void leaf_test(const Node& node, const Vec3& p, ClosestHit& best, double& best_sq) const;

  const TriangleMesh* mesh_;
  std::vector<std::uint32_t> order_;
  std::vector<Vec3> centroids_;
  std::vector<Node> nodes_;
};

struct SurfaceSample {
  Vec3 point;
  Vec3 normal;
  std::size_t triangle;
};

/// Uniform area sampling; reproducible for a fixed seed.
std::vector<SurfaceSample> sample_surface(const TriangleMesh& mesh, std::size_t n_samples, std::uint64_t seed);

inline constexpr std::size_t kDefaultMetricSamples = 100000;
inline constexpr std::uint64_t kDefaultMetricSeed = 0x5eed;

/// Mean distance from points sampled on `source` to the surface of `target`.
double point_to_surface(const TriangleMesh& source, const TriangleMesh& target,
                        std::size_t n_samples = kDefaultMetricSamples, std::uint64_t seed = kDefaultMetricSeed);

double chamfer(const TriangleMesh& a, const TriangleMesh& b, std::size_t n_samples = kDefaultMetricSamples,
               std::uint64_t seed = kDefaultMetricSeed);

/// Mean cosine between sampled normals and the normals at the nearest points
/// on the other mesh, averaged over both directions.
double normal_consistency(const TriangleMesh& a, const TriangleMesh& b, std::size_t n_samples = kDefaultMetricSamples,
                          std::uint64_t seed = kDefaultMetricSeed);

struct MeshMetrics {
  double p2s = 0;
  double chamfer = 0;
  double normal_consistency = 0;
};

MeshMetrics evaluate_mesh(const TriangleMesh& prediction, const TriangleMesh& ground_truth,
                          std::size_t n_samples = kDefaultMetricSamples, std::uint64_t seed = kDefaultMetricSeed);

/// Symmetric Hausdorff distance between two point sets (hash-grid accelerated).
double point_set_hausdorff(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

}  // namespace volcap
