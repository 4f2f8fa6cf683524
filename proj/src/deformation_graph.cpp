#include "volcap/deformation_graph.hpp"

#include "volcap/tsdf_volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace volcap {

double blend_weight(const Vec3& v, const GraphNode& node) {
  return std::exp(-(v - node.position).squaredNorm() / (2.0 * node.radius * node.radius));
}

namespace {

std::uint64_t cell_key(const Vec3i& c) {
  constexpr std::int64_t kOffset = 1 << 20;
  return (static_cast<std::uint64_t>(c.x() + kOffset) << 42) | (static_cast<std::uint64_t>(c.y() + kOffset) << 21) |
         static_cast<std::uint64_t>(c.z() + kOffset);
}

Vec3i cell_of(const Vec3& p, double cell) { return Vec3i((p / cell).array().floor().cast<int>()); }

// Sorted (distance^2, index) list of at most k entries.
using Candidates = std::vector<std::pair<double, int>>;

void offer(Candidates& best, std::size_t k, double d2, int idx) {
  const std::pair<double, int> c{d2, idx};
  if (best.size() == k && !(c < best.back())) return;
  best.insert(std::upper_bound(best.begin(), best.end(), c), c);
  if (best.size() > k) best.pop_back();
}

}  // namespace

std::vector<GraphNode> sample_nodes(const std::vector<Vec3>& vertices, double radius) {
  if (!(radius > 0)) throw ConfigError("node sampling radius must be positive");
  std::vector<GraphNode> nodes;
  std::unordered_map<std::uint64_t, std::vector<int>> grid;
  const double r2 = radius * radius;
  for (const Vec3& v : vertices) {
    const Vec3i c = cell_of(v, radius);
    bool covered = false;
    for (int dz = -1; dz <= 1 && !covered; ++dz)
      for (int dy = -1; dy <= 1 && !covered; ++dy)
        for (int dx = -1; dx <= 1 && !covered; ++dx) {
          const auto it = grid.find(cell_key(c + Vec3i(dx, dy, dz)));
          if (it == grid.end()) continue;
          for (int j : it->second)
            if ((nodes[static_cast<std::size_t>(j)].position - v).squaredNorm() <= r2) {
              covered = true;
              break;
            }
        }
    if (covered) continue;
    GraphNode n;
    n.position = v;
    n.radius = radius;
    grid[cell_key(c)].push_back(static_cast<int>(nodes.size()));
    nodes.push_back(n);
  }
  return nodes;
}

DeformationGraph::DeformationGraph(std::vector<GraphNode> nodes, int k_edge) : nodes_(std::move(nodes)) {
  for (const GraphNode& n : nodes_) {
    if (!(n.radius > 0)) throw ConfigError("node influence radius must be positive");
    if (!is_rotation(n.rotation)) throw ConfigError("node rotation is not orthonormal");
  }
  build_grid();
  build_edges(k_edge);
}

DeformationGraph::DeformationGraph(const DeformationGraph& other)
    : nodes_(other.nodes_), edges_(other.edges_), k_edge_(other.k_edge_), cell_(other.cell_), grid_(other.grid_),
      grid_min_(other.grid_min_), grid_max_(other.grid_max_) {
  // The KNN field is a cache; the copy gets a fresh, empty one.
  if (other.field_) attach_knn_field(other.field_->lattice);
}

DeformationGraph& DeformationGraph::operator=(const DeformationGraph& other) {
  if (this != &other) {
    DeformationGraph tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

void DeformationGraph::build_grid() {
  grid_.clear();
  if (nodes_.empty()) return;
  double r = 0;
  for (const GraphNode& n : nodes_) r += n.radius;
  cell_ = r / static_cast<double>(nodes_.size());
  grid_min_ = Vec3i::Constant(std::numeric_limits<int>::max());
  grid_max_ = Vec3i::Constant(std::numeric_limits<int>::min());
  for (std::size_t j = 0; j < nodes_.size(); ++j) {
    const Vec3i c = cell_of(nodes_[j].position, cell_);
    grid_min_ = grid_min_.cwiseMin(c);
    grid_max_ = grid_max_.cwiseMax(c);
    grid_[cell_key(c)].push_back(static_cast<int>(j));
  }
}

namespace {

// Ring-by-ring search over the node grid; stops once the k-th best distance
// cannot be beaten by cells further out.
template <class Grid>
Candidates grid_knn(const Grid& grid, const std::vector<GraphNode>& nodes, double cell, const Vec3i& gmin,
                    const Vec3i& gmax, const Vec3& p, std::size_t k) {
  Candidates best;
  if (nodes.empty() || k == 0) return best;
  const Vec3i c = cell_of(p, cell);
  const Vec3i below = (gmin - c).cwiseMax(0);
  const Vec3i above = (c - gmax).cwiseMax(0);
  const int r_min = std::max(below.maxCoeff(), above.maxCoeff());
  const int r_max = std::max((c - gmin).cwiseAbs().maxCoeff(), (gmax - c).cwiseAbs().maxCoeff());
  for (int r = r_min; r <= r_max; ++r) {
    for (int dz = -r; dz <= r; ++dz)
      for (int dy = -r; dy <= r; ++dy) {
        const bool face = std::abs(dz) == r || std::abs(dy) == r;
        for (int dx = -r; dx <= r; dx += face ? 1 : 2 * std::max(r, 1)) {
          const auto it = grid.find(cell_key(c + Vec3i(dx, dy, dz)));
          if (it == grid.end()) continue;
          for (int j : it->second) offer(best, k, (nodes[static_cast<std::size_t>(j)].position - p).squaredNorm(), j);
        }
      }
    // Any node in ring r+1 or beyond is at least r * cell away.
    if (best.size() == k && best.back().first <= (r * cell) * (r * cell)) break;
  }
  return best;
}

}  // namespace

void DeformationGraph::build_edges(int k_edge) {
  if (k_edge < 1) throw ConfigError("graph edge count must be at least 1");
  k_edge_ = k_edge;
  edges_.assign(nodes_.size(), {});
  for (std::size_t j = 0; j < nodes_.size(); ++j) {
    const Candidates c = grid_knn(grid_, nodes_, cell_, grid_min_, grid_max_, nodes_[j].position,
                                  static_cast<std::size_t>(k_edge) + 1);
    int added = 0;
    for (const auto& [d2, idx] : c) {
      if (idx == static_cast<int>(j) || added == k_edge) continue;
      edges_[j].push_back(idx);
      ++added;
    }
  }
  // Symmetrize.
  std::vector<std::vector<int>> sym = edges_;
  for (std::size_t j = 0; j < edges_.size(); ++j)
    for (int k : edges_[j]) sym[static_cast<std::size_t>(k)].push_back(static_cast<int>(j));
  for (auto& e : sym) {
    std::sort(e.begin(), e.end());
    e.erase(std::unique(e.begin(), e.end()), e.end());
  }
  edges_ = std::move(sym);
}

NodeNeighbors DeformationGraph::knn(const Vec3& p) const {
  const Candidates c = grid_knn(grid_, nodes_, cell_, grid_min_, grid_max_, p, kNeighbors);
  NodeNeighbors nb;
  for (const auto& [d2, idx] : c) {
    nb.index[static_cast<std::size_t>(nb.count)] = idx;
    nb.weight[static_cast<std::size_t>(nb.count)] = blend_weight(p, nodes_[static_cast<std::size_t>(idx)]);
    ++nb.count;
  }
  return nb;
}

NodeNeighbors DeformationGraph::knn_brute_force(const Vec3& p) const {
  Candidates best;
  for (std::size_t j = 0; j < nodes_.size(); ++j)
    offer(best, kNeighbors, (nodes_[j].position - p).squaredNorm(), static_cast<int>(j));
  NodeNeighbors nb;
  for (const auto& [d2, idx] : best) {
    nb.index[static_cast<std::size_t>(nb.count)] = idx;
    nb.weight[static_cast<std::size_t>(nb.count)] = blend_weight(p, nodes_[static_cast<std::size_t>(idx)]);
    ++nb.count;
  }
  return nb;
}

Vec3 DeformationGraph::warp_with(const NodeNeighbors& nb, const Vec3& v) const {
  // Written as v plus the blended displacement, which equals the blend of the
  // transformed points (weights sum to one) and is exact for identity nodes.
  const double sum = nb.weight_sum();
  Vec3 disp = Vec3::Zero();
  for (int i = 0; i < nb.count; ++i) {
    const auto s = static_cast<std::size_t>(i);
    const GraphNode& n = nodes_[static_cast<std::size_t>(nb.index[s])];
    const Vec3 rel = v - n.position;
    disp += (nb.weight[s] / sum) * (n.rotation * rel - rel + n.translation);
  }
  return v + disp;
}

Mat3 DeformationGraph::blended_rotation(const NodeNeighbors& nb) const {
  const double sum = nb.weight_sum();
  Mat3 r = Mat3::Zero();
  for (int i = 0; i < nb.count; ++i) {
    const auto s = static_cast<std::size_t>(i);
    r += (nb.weight[s] / sum) * nodes_[static_cast<std::size_t>(nb.index[s])].rotation;
  }
  return nearest_rotation(r);
}

std::optional<Vec3> DeformationGraph::warp_point(const Vec3& v) const {
  const NodeNeighbors nb = knn(v);
  if (nb.count == 0 || nb.weight_sum() < kMinWeightSum) return std::nullopt;
  return warp_with(nb, v);
}

std::optional<Vec3> DeformationGraph::warp_normal(const Vec3& v, const Vec3& n) const {
  const NodeNeighbors nb = knn(v);
  if (nb.count == 0 || nb.weight_sum() < kMinWeightSum) return std::nullopt;
  return Vec3((blended_rotation(nb) * n).normalized());
}

DeformationGraph DeformationGraph::to_live() const {
  std::vector<GraphNode> live = nodes_;
  for (GraphNode& n : live) {
    n.position = n.live_position();
    n.rotation = Mat3::Identity();
    n.translation = Vec3::Zero();
  }
  return DeformationGraph(std::move(live), k_edge_);
}

DeformationGraph DeformationGraph::inverted() const {
  std::vector<GraphNode> inv = nodes_;
  for (GraphNode& n : inv) {
    n.position = n.live_position();
    n.rotation.transposeInPlace();
    n.translation = -n.translation;
  }
  return DeformationGraph(std::move(inv), k_edge_);
}

void DeformationGraph::attach_knn_field(const LatticeGeometry& lattice) {
  auto f = std::make_unique<KnnField>();
  f->lattice = lattice;
  f->blocks = (lattice.dims + Vec3i::Constant(KnnField::kBlock - 1)) / KnnField::kBlock;
  const auto n = static_cast<std::size_t>(f->blocks.prod());
  f->data.resize(n);
  f->once = std::make_unique<std::once_flag[]>(n);
  field_ = std::move(f);
}

void DeformationGraph::fill_block(std::size_t block) const {
  KnnField& f = *field_;
  constexpr int b = KnnField::kBlock;
  auto cells = std::make_unique<std::array<NodeNeighbors, b * b * b>>();
  const auto bx = static_cast<std::size_t>(f.blocks.x()), by = static_cast<std::size_t>(f.blocks.y());
  const Vec3i base(static_cast<int>(block % bx) * b, static_cast<int>((block / bx) % by) * b,
                   static_cast<int>(block / (bx * by)) * b);
  for (int k = 0; k < b; ++k)
    for (int j = 0; j < b; ++j)
      for (int i = 0; i < b; ++i) {
        const Vec3i v = base + Vec3i(i, j, k);
        if ((v.array() >= f.lattice.dims.array()).any()) continue;
        (*cells)[static_cast<std::size_t>((k * b + j) * b + i)] = knn(f.lattice.point(v.x(), v.y(), v.z()));
      }
  f.data[block] = std::move(cells);
}

const NodeNeighbors& DeformationGraph::voxel_neighbors(std::size_t voxel_index) const {
  if (!field_) throw std::logic_error("KNN field not attached");
  const KnnField& f = *field_;
  constexpr int b = KnnField::kBlock;
  const auto nx = static_cast<std::size_t>(f.lattice.dims.x()), ny = static_cast<std::size_t>(f.lattice.dims.y());
  const auto i = static_cast<int>(voxel_index % nx), j = static_cast<int>((voxel_index / nx) % ny),
             k = static_cast<int>(voxel_index / (nx * ny));
  const std::size_t block =
      (static_cast<std::size_t>(k / b) * static_cast<std::size_t>(f.blocks.y()) + static_cast<std::size_t>(j / b)) *
          static_cast<std::size_t>(f.blocks.x()) +
      static_cast<std::size_t>(i / b);
  std::call_once(f.once[block], [this, block] { fill_block(block); });
  return (*f.data[block])[static_cast<std::size_t>(((k % b) * b + (j % b)) * b + (i % b))];
}

void DeformationGraph::fill_knn_field() const {
  if (!field_) throw std::logic_error("KNN field not attached");
  for (std::size_t blk = 0; blk < field_->data.size(); ++blk)
    std::call_once(field_->once[blk], [this, blk] { fill_block(blk); });
}

std::size_t DeformationGraph::knn_blocks_filled() const {
  if (!field_) return 0;
  return static_cast<std::size_t>(
      std::count_if(field_->data.begin(), field_->data.end(), [](const auto& p) { return static_cast<bool>(p); }));
}

double DeformationGraph::max_coverage_distance(const std::vector<Vec3>& points) const {
  double worst = 0;
  for (const Vec3& p : points) {
    const Candidates c = grid_knn(grid_, nodes_, cell_, grid_min_, grid_max_, p, 1);
    worst = std::max(worst, c.empty() ? std::numeric_limits<double>::infinity() : std::sqrt(c.front().first));
  }
  return worst;
}

nlohmann::json DeformationGraph::to_json() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (const GraphNode& n : nodes_) {
    std::vector<double> r(9);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) r[static_cast<std::size_t>(a * 3 + b)] = n.rotation(a, b);
    nodes.push_back({{"position", {n.position.x(), n.position.y(), n.position.z()}},
                     {"rotation", r},
                     {"translation", {n.translation.x(), n.translation.y(), n.translation.z()}},
                     {"radius", n.radius}});
  }
  return {{"nodes", nodes}, {"edges", edges_}};
}

namespace {

// Trilinear TSDF at a node. Nodes sampled from the extracted surface often sit
// exactly on a lattice plane, where the interpolation stencil can tip into a
// cell with an unobserved corner; the nearest voxel is used in that case.
std::optional<double> tsdf_at_node(const TsdfVolume& volume, const Vec3& p) {
  if (const auto q = volume.query(p)) return q->tsdf;
  if (!volume.contains(p)) return std::nullopt;
  const Vec3 g = (p - volume.origin()) / volume.voxel_size();
  const Vec3i c = g.array().round().cast<int>().cwiseMax(0).cwiseMin(volume.dims().array() - 1);
  const std::size_t idx = volume.index(c.x(), c.y(), c.z());
  if (volume.weight(idx) <= 0.0f) return std::nullopt;
  return static_cast<double>(volume.tsdf(idx));
}

}  // namespace

DeformationGraph initialize_topology_aware(const DeformationGraph& prev_live, const TsdfVolume& volume,
                                           const TriangleMesh& surface, double delta_t, double radius, int k_edge,
                                           TopologyInitStats* stats) {
  TopologyInitStats st;
  if (surface.vertices.empty()) {
    if (stats) *stats = st;
    return DeformationGraph({}, k_edge);
  }
  std::vector<GraphNode> kept;
  for (const GraphNode& n : prev_live.nodes()) {
    GraphNode live = n;
    live.position = n.live_position();
    live.rotation = Mat3::Identity();
    live.translation = Vec3::Zero();
    const auto q = tsdf_at_node(volume, live.position);
    if (!q) {
      ++st.deleted_unobserved;
    } else if (std::abs(*q) > delta_t) {
      ++st.deleted_far;
    } else {
      kept.push_back(live);
    }
  }
  st.kept = kept.size();

  // Vertices farther than `radius` from every surviving node seed new nodes.
  const DeformationGraph survivors(kept, k_edge);
  std::vector<Vec3> uncovered;
  for (const Vec3& v : surface.vertices) {
    if (survivors.empty() || survivors.max_coverage_distance({v}) > radius) uncovered.push_back(v);
  }
  std::vector<GraphNode> added = sample_nodes(uncovered, radius);
  st.appended = added.size();
  kept.insert(kept.end(), added.begin(), added.end());

  DeformationGraph graph(std::move(kept), k_edge);
  graph.attach_knn_field(volume.lattice());
  if (stats) *stats = st;
  return graph;
}

}  // namespace volcap
