#include "volcap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_map>

namespace volcap {

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c, Vec3* bary) {
  // Voronoi-region walk over vertices, edges and the face interior.
  auto done = [bary](const Vec3& q, double u, double v, double w) {
    if (bary) *bary = Vec3(u, v, w);
    return q;
  };
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return done(a, 1, 0, 0);

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return done(b, 0, 1, 0);

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    const double v = d1 / (d1 - d3);
    return done(a + v * ab, 1 - v, v, 0);
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return done(c, 0, 0, 1);

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    const double w = d2 / (d2 - d6);
    return done(a + w * ac, 1 - w, 0, w);
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return done(b + w * (c - b), 0, 1 - w, w);
  }

  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return done(a + v * ab + w * ac, 1 - v - w, v, w);
}

namespace {
constexpr std::uint32_t kLeafSize = 4;
}

TriangleBvh::TriangleBvh(const TriangleMesh& mesh) : mesh_(&mesh) {
  if (mesh.triangles.empty()) throw MetricError("cannot build a BVH over an empty mesh");
  const auto n = static_cast<std::uint32_t>(mesh.triangles.size());
  order_.resize(n);
  std::iota(order_.begin(), order_.end(), 0u);
  centroids_.resize(n);
  for (std::uint32_t t = 0; t < n; ++t) {
    const Vec3i& tri = mesh.triangles[t];
    centroids_[t] = (mesh.vertices[tri[0]] + mesh.vertices[tri[1]] + mesh.vertices[tri[2]]) / 3.0;
  }
  nodes_.reserve(2 * n / kLeafSize + 1);
  build(0, n, 0);
}

int TriangleBvh::build(std::uint32_t first, std::uint32_t count, int depth) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  Eigen::AlignedBox3d box;
  for (std::uint32_t i = first; i < first + count; ++i) {
    const Vec3i& tri = mesh_->triangles[order_[i]];
    for (int s = 0; s < 3; ++s) box.extend(mesh_->vertices[tri[s]]);
  }
  nodes_[id].box = box;
  if (count <= kLeafSize || depth > 60) {
    nodes_[id].first = first;
    nodes_[id].count = count;
    return id;
  }
  Eigen::AlignedBox3d cbox;
  for (std::uint32_t i = first; i < first + count; ++i) cbox.extend(centroids_[order_[i]]);
  int axis = 0;
  cbox.sizes().maxCoeff(&axis);
  const std::uint32_t mid = first + count / 2;
  std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                   [&](std::uint32_t x, std::uint32_t y) {
                     const double cx = centroids_[x][axis], cy = centroids_[y][axis];
                     return cx < cy || (cx == cy && x < y);
                   });
  const int left = build(first, mid - first, depth + 1);
  const int right = build(mid, first + count - mid, depth + 1);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void TriangleBvh::leaf_test(const Node& node, const Vec3& p, ClosestHit& best, double& best_sq) const {
  for (std::uint32_t i = node.first; i < node.first + node.count; ++i) {
    const std::uint32_t t = order_[i];
    const Vec3i& tri = mesh_->triangles[t];
    Vec3 bary;
    const Vec3 q = closest_point_on_triangle(p, mesh_->vertices[tri[0]], mesh_->vertices[tri[1]],
                                             mesh_->vertices[tri[2]], &bary);
    const double d = (q - p).squaredNorm();
    if (d < best_sq || (d == best_sq && t < best.triangle)) {
      best_sq = d;
      best.triangle = t;
      best.point = q;
      best.bary = bary;
    }
  }
}

ClosestHit TriangleBvh::closest(const Vec3& p) const {
  ClosestHit best;
  best.triangle = std::numeric_limits<std::size_t>::max();
  double best_sq = std::numeric_limits<double>::infinity();
  int stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& node = nodes_[static_cast<std::size_t>(stack[--top])];
    if (node.box.squaredExteriorDistance(p) > best_sq) continue;
    if (node.left < 0) {
      leaf_test(node, p, best, best_sq);
      continue;
    }
    const double dl = nodes_[static_cast<std::size_t>(node.left)].box.squaredExteriorDistance(p);
    const double dr = nodes_[static_cast<std::size_t>(node.right)].box.squaredExteriorDistance(p);
    // Visit the nearer child first.
    if (dl < dr) {
      stack[top++] = node.right;
      stack[top++] = node.left;
    } else {
      stack[top++] = node.left;
      stack[top++] = node.right;
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

ClosestHit TriangleBvh::closest_brute_force(const Vec3& p) const {
  ClosestHit best;
  best.triangle = std::numeric_limits<std::size_t>::max();
  double best_sq = std::numeric_limits<double>::infinity();
  Node all;
  all.first = 0;
  all.count = static_cast<std::uint32_t>(order_.size());
  // order_ is a permutation, so scanning it covers every triangle.
  leaf_test(all, p, best, best_sq);
  best.distance = std::sqrt(best_sq);
  return best;
}

Vec3 TriangleBvh::normal_at(const ClosestHit& hit) const {
  const Vec3i& tri = mesh_->triangles[hit.triangle];
  if (mesh_->has_normals()) {
    const Vec3 n = hit.bary[0] * mesh_->normals[tri[0]] + hit.bary[1] * mesh_->normals[tri[1]] +
                   hit.bary[2] * mesh_->normals[tri[2]];
    if (n.norm() > 1e-12) return n.normalized();
  }
  const Vec3& a = mesh_->vertices[tri[0]];
  return (mesh_->vertices[tri[1]] - a).cross(mesh_->vertices[tri[2]] - a).normalized();
}

std::vector<SurfaceSample> sample_surface(const TriangleMesh& mesh, std::size_t n_samples, std::uint64_t seed) {
  if (mesh.triangles.empty()) throw MetricError("cannot sample an empty mesh");
  std::vector<double> cdf(mesh.triangles.size());
  double total = 0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    total += triangle_area(mesh, t);
    cdf[t] = total;
  }
  if (!(total > 0)) throw MetricError("mesh has zero surface area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SurfaceSample> out;
  out.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const double pick = u(rng) * total;
    const double r1 = u(rng), r2 = u(rng);
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), pick);
    const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
    const Vec3i& tri = mesh.triangles[t];
    const double sq = std::sqrt(r1);
    const Vec3 bary(1 - sq, sq * (1 - r2), sq * r2);
    const Vec3& a = mesh.vertices[tri[0]];
    const Vec3& b = mesh.vertices[tri[1]];
    const Vec3& c = mesh.vertices[tri[2]];
    SurfaceSample smp{bary[0] * a + bary[1] * b + bary[2] * c, Vec3::Zero(), t};
    Vec3 n = Vec3::Zero();
    if (mesh.has_normals())
      n = bary[0] * mesh.normals[tri[0]] + bary[1] * mesh.normals[tri[1]] + bary[2] * mesh.normals[tri[2]];
    if (n.norm() <= 1e-12) n = (b - a).cross(c - a);
    smp.normal = n.normalized();
    out.push_back(smp);
  }
  return out;
}

namespace {

void require_nonempty(const TriangleMesh& m, const char* what) {
  if (m.triangles.empty()) throw MetricError(std::string("undefined metric: ") + what + " mesh is empty");
}

// Sum in index order so that results do not depend on the thread count.
double ordered_mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

double point_to_surface(const TriangleMesh& source, const TriangleMesh& target, std::size_t n_samples,
                        std::uint64_t seed) {
  require_nonempty(source, "source");
  require_nonempty(target, "target");
  const auto samples = sample_surface(source, n_samples, seed);
  const TriangleBvh bvh(target);
  std::vector<double> d(samples.size());
  const auto n = static_cast<std::int64_t>(samples.size());
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = bvh.closest(samples[static_cast<std::size_t>(i)].point).distance;
  return ordered_mean(d);
}

double chamfer(const TriangleMesh& a, const TriangleMesh& b, std::size_t n_samples, std::uint64_t seed) {
  return 0.5 * (point_to_surface(a, b, n_samples, seed) + point_to_surface(b, a, n_samples, seed));
}

namespace {

double one_sided_normal_consistency(const TriangleMesh& a, const TriangleMesh& b, std::size_t n_samples,
                                    std::uint64_t seed) {
  const auto samples = sample_surface(a, n_samples, seed);
  const TriangleBvh bvh(b);
  std::vector<double> c(samples.size());
  const auto n = static_cast<std::int64_t>(samples.size());
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    c[static_cast<std::size_t>(i)] = s.normal.dot(bvh.normal_at(bvh.closest(s.point)));
  }
  return ordered_mean(c);
}

}  // namespace

double normal_consistency(const TriangleMesh& a, const TriangleMesh& b, std::size_t n_samples, std::uint64_t seed) {
  require_nonempty(a, "first");
  require_nonempty(b, "second");
  return 0.5 * (one_sided_normal_consistency(a, b, n_samples, seed) +
                one_sided_normal_consistency(b, a, n_samples, seed));
}

MeshMetrics evaluate_mesh(const TriangleMesh& prediction, const TriangleMesh& ground_truth, std::size_t n_samples,
                          std::uint64_t seed) {
  MeshMetrics m;
  m.p2s = point_to_surface(prediction, ground_truth, n_samples, seed);
  m.chamfer = 0.5 * (m.p2s + point_to_surface(ground_truth, prediction, n_samples, seed));
  m.normal_consistency = normal_consistency(prediction, ground_truth, n_samples, seed);
  return m;
}

namespace {

struct CellKeyHash {
  std::size_t operator()(const Vec3i& k) const {
    return static_cast<std::size_t>(k.x()) * 73856093u ^ static_cast<std::size_t>(k.y()) * 19349663u ^
           static_cast<std::size_t>(k.z()) * 83492791u;
  }
};

double directed_hausdorff(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  Eigen::AlignedBox3d box;
  for (const Vec3& p : to) box.extend(p);
  const double cell = std::max(box.sizes().maxCoeff() / 64.0, 1e-9);
  auto key = [cell](const Vec3& p) { return Vec3i((p / cell).array().floor().cast<int>()); };
  std::unordered_map<Vec3i, std::vector<std::size_t>, CellKeyHash> grid;
  for (std::size_t i = 0; i < to.size(); ++i) grid[key(to[i])].push_back(i);

  double worst = 0;
  for (const Vec3& p : from) {
    const Vec3i k = key(p);
    double best = std::numeric_limits<double>::infinity();
    // Grow the search shell until the best hit is provably the nearest.
    for (int r = 0;; ++r) {
      for (int dz = -r; dz <= r; ++dz)
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
            const auto it = grid.find(k + Vec3i(dx, dy, dz));
            if (it == grid.end()) continue;
            for (std::size_t i : it->second) best = std::min(best, (to[i] - p).norm());
          }
      if (best <= r * cell) break;
      if (r > 256) {
        for (const Vec3& q : to) best = std::min(best, (q - p).norm());
        break;
      }
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace

double point_set_hausdorff(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
  return std::max(directed_hausdorff(a, b), directed_hausdorff(b, a));
}

}  // namespace volcap
