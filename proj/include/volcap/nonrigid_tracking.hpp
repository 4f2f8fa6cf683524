#pragma once

#include "volcap/deformation_graph.hpp"
#include "volcap/mesh.hpp"
#include "volcap/sensor_io.hpp"

#include <Eigen/Sparse>

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

namespace volcap {

/// Raised when the tracking energy becomes non-finite.
class SolverDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Correspondence {
  int vertex_index = 0;
  Vec3 v = Vec3::Zero();   // reference vertex
  Vec3 p = Vec3::Zero();   // matched point on the live depth map
  Vec3 pn = Vec3::Zero();  // unit normal at p, facing the camera
  int view_index = 0;
  NodeNeighbors neighbors;  // KNN of v in the graph, with raw blend weights
};

struct TrackingParams {
  double lambda_data = 1.0;
  double lambda_reg = 5.0;
  int max_gn_iters = 8;
  double pcg_tol = 1e-4;
  int pcg_max_iters = 500;
  double dist_reject = 0.03;   // m
  double normal_reject = 0.5;  // cos 60 deg
  int max_halvings = 4;
  double convergence_tol = 1e-5;  // stop when an accepted step gains less than this fraction
  double damping = 1e-3;  // Levenberg term, relative to the mean diagonal of the normal matrix

  void validate() const;
};

/// Per-vertex KNN of the reference mesh; entries with no node influence have count 0.
std::vector<NodeNeighbors> vertex_neighbors(const DeformationGraph& graph, const TriangleMesh& mesh);

/// Projective point-to-plane data association of the warped mesh against the
/// given views. At most one correspondence per (vertex, view).
std::vector<Correspondence> find_correspondences(const TriangleMesh& mesh, const DeformationGraph& graph,
                                                 std::span<const DepthFrame> frames, const TrackingParams& params);
std::vector<Correspondence> find_correspondences(const TriangleMesh& mesh, const DeformationGraph& graph,
                                                 const std::vector<NodeNeighbors>& neighbors,
                                                 std::span<const DepthFrame> frames, const TrackingParams& params);

/// Squared point-to-plane residual of one correspondence under the graph.
double point_to_plane_residual(const DeformationGraph& graph, const Correspondence& c);

struct TrackingEnergy {
  double total = 0;
  double data = 0;
  double reg = 0;
};

/// E = lambda_data * sum_i (pn_i . (warp(v_i) - p_i))^2
///   + lambda_reg  * sum over directed graph edges (j,k) |T_j(g_k) - T_k(g_k)|^2.
TrackingEnergy energy(const DeformationGraph& graph, std::span<const Correspondence> correspondences,
                      const TrackingParams& params);

/// Gauss-Newton system for the 6N increments (omega_j, tau_j); rotations update
/// as R <- exp(omega) R and translations as t <- t + tau.
/// `gradient` is J^T r with the lambdas applied, so dE/dx = 2 * gradient.
struct NormalEquations {
  Eigen::SparseMatrix<double> jtj;
  Eigen::VectorXd gradient;
};

NormalEquations build_normal_equations(const DeformationGraph& graph, std::span<const Correspondence> correspondences,
                                       const TrackingParams& params);

/// Applies `scale * delta` to every node transform.
void apply_increment(DeformationGraph& graph, const Eigen::VectorXd& delta, double scale = 1.0);

struct PcgResult {
  int iterations = 0;
  double relative_residual = 0;
};

/// Conjugate gradients with a 6x6 block-Jacobi preconditioner.
PcgResult pcg_solve(const Eigen::SparseMatrix<double>& a, const Eigen::VectorXd& b, Eigen::VectorXd& x, double tol,
                    int max_iters);

struct GaussNewtonIteration {
  int iteration = 0;
  std::size_t correspondences = 0;
  double energy_before = 0;
  double energy_after = 0;
  double data_after = 0;
  double reg_after = 0;
  int pcg_iterations = 0;
  double pcg_residual = 0;
  int halvings = 0;
  bool accepted = false;
};

struct TrackingReport {
  std::vector<GaussNewtonIteration> iterations;
  std::vector<Correspondence> final_correspondences;  // searched with the final graph
  TrackingEnergy final_energy;
};

/// Tracks the reference mesh to the target views by updating the graph's node
/// transforms in place. Per-iteration diagnostics go to `diagnostics` as JSON
/// lines when non-null.
TrackingReport solve_gauss_newton(DeformationGraph& graph, const TriangleMesh& mesh, std::span<const DepthFrame> frames,
                                  const TrackingParams& params, std::ostream* diagnostics = nullptr);

}  // namespace volcap
