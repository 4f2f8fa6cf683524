#pragma once

#include "volcap/marching_cubes.hpp"
#include "volcap/mesh.hpp"

#include <array>
#include <memory>
#include <mutex>
#include <optional>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace volcap {

class TsdfVolume;

/// Embedded-deformation node: a rigid transform acting about `position`.
struct GraphNode {
  Vec3 position = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double radius = 0.05;  // influence radius d

  Vec3 transform(const Vec3& x) const { return rotation * (x - position) + position + translation; }
  Vec3 live_position() const { return position + translation; }
};

/// exp(-|v - g|^2 / (2 d^2)).
double blend_weight(const Vec3& v, const GraphNode& node);

/// Greedy coverage sampling: a vertex becomes a node when it is farther than
/// `radius` from every accepted node. Every input ends within `radius` of a node.
std::vector<GraphNode> sample_nodes(const std::vector<Vec3>& vertices, double radius);

/// K nearest nodes of a point with their raw (unnormalized) blend weights,
/// ordered by distance with ties broken by node index.
struct NodeNeighbors {
  static constexpr int kMax = 4;
  std::array<int, kMax> index{};
  std::array<double, kMax> weight{};
  int count = 0;

  double weight_sum() const {
    double s = 0;
    for (int i = 0; i < count; ++i) s += weight[static_cast<std::size_t>(i)];
    return s;
  }
};

inline constexpr double kMinWeightSum = 1e-12;

class DeformationGraph {
 public:
  static constexpr int kNeighbors = NodeNeighbors::kMax;
  static constexpr int kDefaultEdgeCount = 8;

  DeformationGraph() = default;
  explicit DeformationGraph(std::vector<GraphNode> nodes, int k_edge = kDefaultEdgeCount);

  DeformationGraph(const DeformationGraph& other);
  DeformationGraph& operator=(const DeformationGraph& other);
  DeformationGraph(DeformationGraph&&) noexcept = default;
  DeformationGraph& operator=(DeformationGraph&&) noexcept = default;

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  const std::vector<GraphNode>& nodes() const { return nodes_; }
  const GraphNode& node(std::size_t j) const { return nodes_[j]; }
  /// Changing transforms is allowed; positions and radii must stay fixed.
  GraphNode& node(std::size_t j) { return nodes_[j]; }
  const std::vector<std::vector<int>>& edges() const { return edges_; }
  int edge_count_param() const { return k_edge_; }

  /// Symmetric k-nearest-neighbour edges among node positions.
  void build_edges(int k_edge);

  /// Exact K nearest nodes (grid accelerated, identical to brute force).
  NodeNeighbors knn(const Vec3& p) const;
  NodeNeighbors knn_brute_force(const Vec3& p) const;

  /// Blend of node transforms with normalized weights; nullopt when the point
  /// has no node influence (weight sum below 1e-12).
  std::optional<Vec3> warp_point(const Vec3& v) const;
  std::optional<Vec3> warp_normal(const Vec3& v, const Vec3& n) const;
  Vec3 warp_with(const NodeNeighbors& nb, const Vec3& v) const;
  /// Normalized blend of node rotations projected back onto SO(3).
  Mat3 blended_rotation(const NodeNeighbors& nb) const;

  /// Nodes moved to their live positions with identity transforms.
  DeformationGraph to_live() const;
  /// Approximate inverse warp: nodes at live positions carrying R^T and -t.
  DeformationGraph inverted() const;

  /// Binds the per-voxel KNN field to a volume lattice. Entries are computed
  /// lazily per 8^3 block on first access.
  void attach_knn_field(const LatticeGeometry& lattice);
  bool has_knn_field() const { return static_cast<bool>(field_); }
  const NodeNeighbors& voxel_neighbors(std::size_t voxel_index) const;
  /// Fills every block now (same values as lazy filling).
  void fill_knn_field() const;
  std::size_t knn_blocks_filled() const;

  /// Largest distance from any point to its nearest node.
  double max_coverage_distance(const std::vector<Vec3>& points) const;

  nlohmann::json to_json() const;

 private:
  struct KnnField {
    static constexpr int kBlock = 8;
    LatticeGeometry lattice;
    Vec3i blocks = Vec3i::Zero();
    std::vector<std::unique_ptr<std::array<NodeNeighbors, kBlock * kBlock * kBlock>>> data;
    std::unique_ptr<std::once_flag[]> once;
  };

  void build_grid();
  void fill_block(std::size_t block) const;

  std::vector<GraphNode> nodes_;
  std::vector<std::vector<int>> edges_;
  int k_edge_ = kDefaultEdgeCount;

  // Uniform grid over node positions for nearest-neighbour queries.
  double cell_ = 0.05;
  std::unordered_map<std::uint64_t, std::vector<int>> grid_;
  Vec3i grid_min_ = Vec3i::Zero(), grid_max_ = Vec3i::Zero();

  std::unique_ptr<KnnField> field_;
};

struct TopologyInitStats {
  std::size_t kept = 0;
  std::size_t deleted_far = 0;         // |tsdf| > delta_t
  std::size_t deleted_unobserved = 0;  // no observation at the node
  std::size_t appended = 0;
};

/// Per-frame graph initialization from the previous frame's live graph:
/// deletes nodes whose TSDF magnitude exceeds delta_t (or which are
/// unobserved), samples new nodes over uncovered surface vertices, rebuilds
/// edges and binds the KNN field to the volume.
DeformationGraph initialize_topology_aware(const DeformationGraph& prev_live, const TsdfVolume& volume,
                                           const TriangleMesh& surface, double delta_t, double radius,
                                           int k_edge = DeformationGraph::kDefaultEdgeCount,
                                           TopologyInitStats* stats = nullptr);

}  // namespace volcap
