#include "volcap/nonrigid_tracking.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <map>
#include <ostream>

#include "json.hpp"

namespace volcap {

void TrackingParams::validate() const {
  if (!(lambda_data >= 0) || !(lambda_reg >= 0)) throw ConfigError("tracking lambdas must be non-negative");
  if (max_gn_iters < 0) throw ConfigError("max_gn_iters must be non-negative");
  if (!(pcg_tol > 0) || pcg_max_iters < 1) throw ConfigError("PCG tolerance and iteration cap must be positive");
  if (!(dist_reject > 0)) throw ConfigError("dist_reject must be positive");
  if (!(normal_reject > -1 && normal_reject <= 1)) throw ConfigError("normal_reject must be a cosine");
  if (max_halvings < 0 || !(damping >= 0)) throw ConfigError("invalid step control parameters");
}

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

Mat3 exp_so3(const Vec3& w) {
  const double a = w.norm();
  if (a < 1e-12) return Mat3::Identity() + skew(w);
  return Eigen::AngleAxisd(a, w / a).toRotationMatrix();
}

std::optional<Vec3> depth_point(const DepthFrame& f, const Vec2& px) {
  const auto d = sample_depth_bilinear(f, px);
  if (!d) return std::nullopt;
  return unproject(px, *d, f.intrinsics, f.pose);
}

// Normal of the depth map at a pixel from central differences, oriented
// towards the camera.
std::optional<Vec3> depth_normal(const DepthFrame& f, const Vec2& px, const Vec3& p) {
  const auto xp = depth_point(f, px + Vec2(1, 0)), xm = depth_point(f, px - Vec2(1, 0));
  const auto yp = depth_point(f, px + Vec2(0, 1)), ym = depth_point(f, px - Vec2(0, 1));
  if (!xp || !xm || !yp || !ym) return std::nullopt;
  Vec3 n = (*xp - *xm).cross(*yp - *ym);
  const double len = n.norm();
  if (!(len > 0)) return std::nullopt;
  n /= len;
  if (n.dot(f.pose.center() - p) < 0) n = -n;
  return n;
}

}  // namespace

std::vector<NodeNeighbors> vertex_neighbors(const DeformationGraph& graph, const TriangleMesh& mesh) {
  std::vector<NodeNeighbors> out(mesh.vertices.size());
  const auto n = static_cast<std::int64_t>(mesh.vertices.size());
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < n; ++i) {
    NodeNeighbors nb = graph.knn(mesh.vertices[static_cast<std::size_t>(i)]);
    if (nb.weight_sum() < kMinWeightSum) nb.count = 0;
    out[static_cast<std::size_t>(i)] = nb;
  }
  return out;
}

std::vector<Correspondence> find_correspondences(const TriangleMesh& mesh, const DeformationGraph& graph,
                                                 std::span<const DepthFrame> frames, const TrackingParams& params) {
  return find_correspondences(mesh, graph, vertex_neighbors(graph, mesh), frames, params);
}

std::vector<Correspondence> find_correspondences(const TriangleMesh& mesh, const DeformationGraph& graph,
                                                 const std::vector<NodeNeighbors>& neighbors,
                                                 std::span<const DepthFrame> frames, const TrackingParams& params) {
  TriangleMesh with_normals;
  const TriangleMesh* m = &mesh;
  if (!mesh.has_normals()) {
    with_normals = mesh;
    compute_vertex_normals(with_normals);
    m = &with_normals;
  }
  const auto nv = static_cast<std::int64_t>(m->vertices.size());
  std::vector<std::vector<Correspondence>> per_vertex(m->vertices.size());
#pragma omp parallel for schedule(dynamic, 256) num_threads(thread_count())
  for (std::int64_t i = 0; i < nv; ++i) {
    const auto vi = static_cast<std::size_t>(i);
    const NodeNeighbors& nb = neighbors[vi];
    if (nb.count == 0) continue;
    const Vec3& v = m->vertices[vi];
    const Vec3 vw = graph.warp_with(nb, v);
    const Vec3 nw = graph.blended_rotation(nb) * m->normals[vi];
    for (std::size_t view = 0; view < frames.size(); ++view) {
      const DepthFrame& f = frames[view];
      const auto proj = project(vw, f.intrinsics, f.pose);
      if (!proj) continue;
      const auto p = depth_point(f, proj->pixel);
      if (!p || (*p - vw).norm() > params.dist_reject) continue;
      const auto pn = depth_normal(f, proj->pixel, *p);
      if (!pn || nw.dot(*pn) < params.normal_reject) continue;
      per_vertex[vi].push_back(Correspondence{static_cast<int>(vi), v, *p, *pn, static_cast<int>(view), nb});
    }
  }
  std::vector<Correspondence> out;
  for (auto& list : per_vertex) out.insert(out.end(), list.begin(), list.end());
  return out;
}

double point_to_plane_residual(const DeformationGraph& graph, const Correspondence& c) {
  const NodeNeighbors nb = c.neighbors.count > 0 ? c.neighbors : graph.knn(c.v);
  const double r = c.pn.dot(graph.warp_with(nb, c.v) - c.p);
  return r * r;
}

TrackingEnergy energy(const DeformationGraph& graph, std::span<const Correspondence> correspondences,
                      const TrackingParams& params) {
  TrackingEnergy e;
  for (const Correspondence& c : correspondences) e.data += point_to_plane_residual(graph, c);
  for (std::size_t j = 0; j < graph.size(); ++j) {
    const GraphNode& nj = graph.node(j);
    for (int k : graph.edges()[j]) {
      const GraphNode& nk = graph.node(static_cast<std::size_t>(k));
      e.reg += (nj.transform(nk.position) - nk.transform(nk.position)).squaredNorm();
    }
  }
  e.total = params.lambda_data * e.data + params.lambda_reg * e.reg;
  if (!std::isfinite(e.total)) throw SolverDiverged("tracking energy is not finite");
  return e;
}

NormalEquations build_normal_equations(const DeformationGraph& graph, std::span<const Correspondence> correspondences,
                                       const TrackingParams& params) {
  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Row6 = Eigen::Matrix<double, 1, 6>;
  using Mat36 = Eigen::Matrix<double, 3, 6>;
  const auto n = static_cast<int>(graph.size());
  std::map<std::pair<int, int>, Mat6> blocks;
  auto block = [&blocks](int a, int b) -> Mat6& {
    auto [it, inserted] = blocks.try_emplace({a, b});
    if (inserted) it->second.setZero();
    return it->second;
  };
  NormalEquations ne;
  ne.gradient = Eigen::VectorXd::Zero(6 * n);

  for (const Correspondence& c : correspondences) {
    const NodeNeighbors nb = c.neighbors.count > 0 ? c.neighbors : graph.knn(c.v);
    const double sum = nb.weight_sum();
    if (sum < kMinWeightSum) continue;
    const double r = c.pn.dot(graph.warp_with(nb, c.v) - c.p);
    std::array<Row6, NodeNeighbors::kMax> jac;
    for (int a = 0; a < nb.count; ++a) {
      const auto s = static_cast<std::size_t>(a);
      const GraphNode& node = graph.node(static_cast<std::size_t>(nb.index[s]));
      const double w = nb.weight[s] / sum;
      const Vec3 arm = node.rotation * (c.v - node.position);
      jac[s].head<3>() = w * arm.cross(c.pn).transpose();
      jac[s].tail<3>() = w * c.pn.transpose();
    }
    for (int a = 0; a < nb.count; ++a) {
      const auto sa = static_cast<std::size_t>(a);
      ne.gradient.segment<6>(6 * nb.index[sa]) += params.lambda_data * r * jac[sa].transpose();
      for (int b = 0; b < nb.count; ++b) {
        const auto sb = static_cast<std::size_t>(b);
        block(nb.index[sa], nb.index[sb]) += params.lambda_data * jac[sa].transpose() * jac[sb];
      }
    }
  }

  for (int j = 0; j < n; ++j) {
    const GraphNode& nj = graph.node(static_cast<std::size_t>(j));
    for (int k : graph.edges()[static_cast<std::size_t>(j)]) {
      const GraphNode& nk = graph.node(static_cast<std::size_t>(k));
      const Vec3 arm = nj.rotation * (nk.position - nj.position);
      const Vec3 e = arm + nj.position + nj.translation - nk.position - nk.translation;
      Mat36 jj, jk;
      jj.leftCols<3>() = -skew(arm);
      jj.rightCols<3>() = Mat3::Identity();
      jk.leftCols<3>().setZero();
      jk.rightCols<3>() = -Mat3::Identity();
      const double l = params.lambda_reg;
      ne.gradient.segment<6>(6 * j) += l * jj.transpose() * e;
      ne.gradient.segment<6>(6 * k) += l * jk.transpose() * e;
      block(j, j) += l * jj.transpose() * jj;
      block(j, k) += l * jj.transpose() * jk;
      block(k, j) += l * jk.transpose() * jj;
      block(k, k) += l * jk.transpose() * jk;
    }
  }

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(blocks.size() * 36);
  for (const auto& [key, m] : blocks)
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < 6; ++b)
        if (m(a, b) != 0.0) trip.emplace_back(6 * key.first + a, 6 * key.second + b, m(a, b));
  ne.jtj.resize(6 * n, 6 * n);
  ne.jtj.setFromTriplets(trip.begin(), trip.end());
  return ne;
}

void apply_increment(DeformationGraph& graph, const Eigen::VectorXd& delta, double scale) {
  if (delta.size() != static_cast<Eigen::Index>(6 * graph.size())) throw std::invalid_argument("increment size mismatch");
  for (std::size_t j = 0; j < graph.size(); ++j) {
    GraphNode& n = graph.node(j);
    const auto base = static_cast<Eigen::Index>(6 * j);
    n.rotation = nearest_rotation(exp_so3(scale * delta.segment<3>(base)) * n.rotation);
    n.translation += scale * delta.segment<3>(base + 3);
  }
}

PcgResult pcg_solve(const Eigen::SparseMatrix<double>& a, const Eigen::VectorXd& b, Eigen::VectorXd& x, double tol,
                    int max_iters) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n || b.size() != n || n % 6 != 0) throw std::invalid_argument("pcg: shape mismatch");
  // Inverse 6x6 diagonal blocks.
  const Eigen::Index nb = n / 6;
  std::vector<Eigen::Matrix<double, 6, 6>> inv(static_cast<std::size_t>(nb), Eigen::Matrix<double, 6, 6>::Zero());
  for (Eigen::Index col = 0; col < n; ++col)
    for (Eigen::SparseMatrix<double>::InnerIterator it(a, col); it; ++it)
      if (it.row() / 6 == col / 6) inv[static_cast<std::size_t>(col / 6)](it.row() % 6, col % 6) = it.value();
  for (auto& m : inv) {
    Eigen::LDLT<Eigen::Matrix<double, 6, 6>> ldlt(m);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive() && m.diagonal().minCoeff() > 0) {
      m = ldlt.solve(Eigen::Matrix<double, 6, 6>::Identity());
    } else {
      m.setIdentity();
    }
  }
  auto precond = [&](const Eigen::VectorXd& r) {
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < nb; ++i) z.segment<6>(6 * i) = inv[static_cast<std::size_t>(i)] * r.segment<6>(6 * i);
    return z;
  };

  if (x.size() != n) x = Eigen::VectorXd::Zero(n);
  PcgResult res;
  const double bnorm = b.norm();
  if (bnorm == 0) {
    x.setZero();
    return res;
  }
  Eigen::VectorXd r = b - a * x;
  Eigen::VectorXd z = precond(r);
  Eigen::VectorXd p = z;
  double rz = r.dot(z);
  res.relative_residual = r.norm() / bnorm;
  while (res.iterations < max_iters && res.relative_residual > tol) {
    const Eigen::VectorXd ap = a * p;
    const double pap = p.dot(ap);
    if (!(pap > 0)) break;
    const double alpha = rz / pap;
    x += alpha * p;
    r -= alpha * ap;
    ++res.iterations;
    res.relative_residual = r.norm() / bnorm;
    z = precond(r);
    const double rz_next = r.dot(z);
    p = z + (rz_next / rz) * p;
    rz = rz_next;
  }
  return res;
}

TrackingReport solve_gauss_newton(DeformationGraph& graph, const TriangleMesh& mesh, std::span<const DepthFrame> frames,
                                  const TrackingParams& params, std::ostream* diagnostics) {
  params.validate();
  TrackingReport report;
  const std::vector<NodeNeighbors> nbs = vertex_neighbors(graph, mesh);
  std::vector<std::pair<Mat3, Vec3>> backup(graph.size());

  for (int it = 0; it < params.max_gn_iters && !graph.empty(); ++it) {
    const auto corr = find_correspondences(mesh, graph, nbs, frames, params);
    GaussNewtonIteration rec;
    rec.iteration = it;
    rec.correspondences = corr.size();
    if (corr.empty()) break;
    const TrackingEnergy e0 = energy(graph, corr, params);
    rec.energy_before = e0.total;

    NormalEquations ne = build_normal_equations(graph, corr, params);
    const double mean_diag = ne.jtj.diagonal().mean();
    Eigen::SparseMatrix<double> eye(ne.jtj.rows(), ne.jtj.cols());
    eye.setIdentity();
    const Eigen::SparseMatrix<double> h = ne.jtj + (params.damping * mean_diag + 1e-12) * eye;
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(h.rows());
    const PcgResult pcg = pcg_solve(h, -ne.gradient, delta, params.pcg_tol, params.pcg_max_iters);
    rec.pcg_iterations = pcg.iterations;
    rec.pcg_residual = pcg.relative_residual;

    for (std::size_t j = 0; j < graph.size(); ++j) backup[j] = {graph.node(j).rotation, graph.node(j).translation};
    double scale = 1.0;
    TrackingEnergy e1 = e0;
    for (int h_i = 0; h_i <= params.max_halvings; ++h_i) {
      apply_increment(graph, delta, scale);
      e1 = energy(graph, corr, params);
      if (e1.total <= e0.total) {
        rec.accepted = true;
        rec.halvings = h_i;
        break;
      }
      for (std::size_t j = 0; j < graph.size(); ++j) {
        graph.node(j).rotation = backup[j].first;
        graph.node(j).translation = backup[j].second;
      }
      scale *= 0.5;
    }
    if (!rec.accepted) {
      e1 = e0;
      rec.halvings = params.max_halvings;
    }
    rec.energy_after = e1.total;
    rec.data_after = e1.data;
    rec.reg_after = e1.reg;
    report.iterations.push_back(rec);
    if (diagnostics) {
      nlohmann::json line = {{"iteration", rec.iteration},     {"correspondences", rec.correspondences},
                             {"energy_before", rec.energy_before}, {"energy_after", rec.energy_after},
                             {"data", rec.data_after},          {"reg", rec.reg_after},
                             {"pcg_iterations", rec.pcg_iterations}, {"pcg_residual", rec.pcg_residual},
                             {"halvings", rec.halvings},        {"accepted", rec.accepted}};
      *diagnostics << line.dump() << '\n';
    }
    if (!rec.accepted) break;
    if (e0.total - e1.total <= params.convergence_tol * e0.total) break;
  }
  report.final_correspondences = find_correspondences(mesh, graph, nbs, frames, params);
  report.final_energy = energy(graph, report.final_correspondences, params);
  return report;
}

}  // namespace volcap
