#include "volcap/sliding_fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace volcap {

void FusionGateParams::validate() const {
  if (std::isnan(delta_e) || delta_e < 0) throw ConfigError("delta_e must be non-negative");
  if (neighbor_radius < 0) throw ConfigError("neighbor radius must be non-negative");
  if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
}

void SlidingFusionParams::validate() const {
  if (!(voxel_size > 0)) throw ConfigError("voxel size must be positive");
  if (volume_dims.minCoeff() < 2) throw ConfigError("volume needs at least 2 voxels per axis");
  if (!(delta_t > 0)) throw ConfigError("delta_t must be positive");
  if (!(node_radius > 0)) throw ConfigError("node radius must be positive");
  if (edge_count < 1) throw ConfigError("edge count must be positive");
  tracking.validate();
  gate.validate();
}

std::vector<double> node_tracking_error(std::span<const Correspondence> correspondences, const DeformationGraph& graph,
                                        double epsilon) {
  // Accumulate in a canonical order so the result does not depend on how the
  // correspondences were listed.
  std::vector<std::size_t> order(correspondences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Correspondence& ca = correspondences[a];
    const Correspondence& cb = correspondences[b];
    if (ca.vertex_index != cb.vertex_index) return ca.vertex_index < cb.vertex_index;
    return ca.view_index < cb.view_index;
  });

  std::vector<double> num(graph.size(), 0.0), den(graph.size(), 0.0);
  for (std::size_t i : order) {
    const Correspondence& c = correspondences[i];
    const double r = point_to_plane_residual(graph, c);
    for (int s = 0; s < c.neighbors.count; ++s) {
      const auto j = static_cast<std::size_t>(c.neighbors.index[static_cast<std::size_t>(s)]);
      num[j] += r;
      den[j] += c.neighbors.weight[static_cast<std::size_t>(s)];
    }
  }
  std::vector<double> e(graph.size());
  for (std::size_t j = 0; j < e.size(); ++j) e[j] = num[j] / (den[j] + epsilon);
  return e;
}

double voxel_tracking_error(const NodeNeighbors& nb, const std::vector<double>& node_errors, bool normalized) {
  double e = 0;
  for (int s = 0; s < nb.count; ++s)
    e += nb.weight[static_cast<std::size_t>(s)] * node_errors.at(static_cast<std::size_t>(nb.index[static_cast<std::size_t>(s)]));
  if (normalized) {
    const double ws = nb.weight_sum();
    return ws > kMinWeightSum ? e / ws : 0.0;
  }
  return e;
}

double voxel_tracking_error(const Vec3& x, const DeformationGraph& graph, const std::vector<double>& node_errors,
                            bool normalized) {
  return voxel_tracking_error(graph.knn(x), node_errors, normalized);
}

std::vector<char> dilated_band_mask(const TsdfVolume& observation, int radius) {
  const Vec3i n = observation.dims();
  const std::size_t count = observation.voxel_count();
  std::vector<char> mask(count, 0);
  for (std::size_t idx = 0; idx < count; ++idx) mask[idx] = observation.in_band(idx) ? 1 : 0;
  if (radius == 0) return mask;

  // Chebyshev dilation as three separable running-max passes.
  std::vector<char> tmp(count);
  const std::size_t stride[3] = {1, static_cast<std::size_t>(n.x()),
                                 static_cast<std::size_t>(n.x()) * static_cast<std::size_t>(n.y())};
  for (int axis = 0; axis < 3; ++axis) {
    const int len = n[axis];
    const std::size_t st = stride[axis];
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::int64_t base = 0; base < static_cast<std::int64_t>(count); ++base) {
      const Vec3i c = observation.coords(static_cast<std::size_t>(base));
      const int pos = c[axis];
      const int lo = std::max(0, pos - radius), hi = std::min(len - 1, pos + radius);
      char v = 0;
      for (int q = lo; q <= hi && !v; ++q)
        v = mask[static_cast<std::size_t>(base) + st * static_cast<std::size_t>(q) - st * static_cast<std::size_t>(pos)];
      tmp[static_cast<std::size_t>(base)] = v;
    }
    mask.swap(tmp);
  }
  return mask;
}

FusionReport fuse_observation_consistent(TsdfVolume& volume, const TsdfVolume& observation,
                                         const DeformationGraph& graph, const std::vector<double>& node_errors,
                                         std::span<const DepthFrame> frames, const FusionGateParams& params) {
  params.validate();
  if (volume.dims() != observation.dims() || volume.origin() != observation.origin() ||
      volume.voxel_size() != observation.voxel_size())
    throw ConfigError("observation volume must share the fused volume's lattice");
  if (node_errors.size() != graph.size()) throw ConfigError("node error count does not match the graph");
  FusionReport report;
  if (graph.empty()) return report;
  if (!graph.has_knn_field()) throw ConfigError("graph has no KNN field bound to the volume");

  const std::vector<char> band = dilated_band_mask(observation, params.neighbor_radius);
  const Vec3i n = volume.dims();
  std::vector<std::vector<std::size_t>> written(static_cast<std::size_t>(n.z()));
  std::vector<std::size_t> updated(static_cast<std::size_t>(n.z()), 0), candidates(updated), uncovered(updated);

#pragma omp parallel for schedule(dynamic, 1) num_threads(thread_count())
  for (int k = 0; k < n.z(); ++k) {
    const auto kk = static_cast<std::size_t>(k);
    for (int j = 0; j < n.y(); ++j)
      for (int i = 0; i < n.x(); ++i) {
        const std::size_t idx = volume.index(i, j, k);
        // Neighbourhood gate first: it is cheap and keeps the lazy KNN field
        // confined to blocks near the observed surface.
        if (!band[idx]) continue;
        ++candidates[kk];
        const NodeNeighbors& nb = graph.voxel_neighbors(idx);
        if (!(voxel_tracking_error(nb, node_errors, params.normalized_weights) < params.delta_e)) continue;
        written[kk].push_back(idx);
        if (nb.weight_sum() < kMinWeightSum) {
          ++uncovered[kk];
          continue;
        }
        const Vec3 x = graph.warp_with(nb, volume.voxel_center(i, j, k));
        bool changed = false;
        for (const DepthFrame& f : frames)
          if (const auto s = TsdfVolume::projective_distance(x, f)) changed |= volume.fuse_sample(idx, *s);
        if (changed) ++updated[kk];
      }
  }
  for (std::size_t k = 0; k < written.size(); ++k) {
    report.write_set.insert(report.write_set.end(), written[k].begin(), written[k].end());
    report.updated += updated[k];
    report.band_candidates += candidates[k];
    report.uncovered += uncovered[k];
  }
  return report;
}

namespace {

void write_step_diagnostics(std::ostream& os, int t, const WindowStepReport& r) {
  nlohmann::json j = {{"event", "window_step"},
                      {"frame", t},
                      {"nodes", r.nodes},
                      {"nodes_kept", r.init.kept},
                      {"nodes_deleted_far", r.init.deleted_far},
                      {"nodes_deleted_unobserved", r.init.deleted_unobserved},
                      {"nodes_appended", r.init.appended},
                      {"gn_iterations", r.tracking.iterations.size()},
                      {"correspondences", r.tracking.final_correspondences.size()},
                      {"fused_previous", r.fused_previous.write_set.size()},
                      {"fused_next", r.fused_next.write_set.size()},
                      {"band_candidates", r.fused_next.band_candidates}};
  os << j.dump() << '\n';
}

}  // namespace

SlidingWindowState step_window(const SlidingWindowState* prev, std::span<const DepthFrame> frames_prev,
                               std::span<const DepthFrame> frames_t, std::span<const DepthFrame> frames_next,
                               const SlidingFusionParams& params, WindowStepReport* report, std::ostream* diagnostics) {
  params.validate();
  if (frames_t.empty()) throw ConfigError("window step needs at least one view of the current frame");
  WindowStepReport local;
  WindowStepReport& rep = report ? *report : local;
  rep = WindowStepReport{};

  SlidingWindowState out;
  out.frame_index = prev ? prev->frame_index + 1 : 0;
  out.observation = params.make_volume();
  out.observation.integrate(frames_t);
  const TriangleMesh reference = out.observation.extract_mesh();

  if (prev && !prev->graph.empty()) {
    out.graph = initialize_topology_aware(prev->graph, out.observation, reference, params.delta_t, params.node_radius,
                                          params.edge_count, &rep.init);
  } else {
    out.graph = DeformationGraph(sample_nodes(reference.vertices, params.node_radius), params.edge_count);
    out.graph.attach_knn_field(out.observation.lattice());
    rep.init.appended = out.graph.size();
  }
  rep.nodes = out.graph.size();
  out.volume = out.observation;

  if (params.fuse_previous && prev && !prev->graph.empty() && !frames_prev.empty()) {
    DeformationGraph back = prev->graph.inverted();
    back.attach_knn_field(out.volume.lattice());
    rep.fused_previous =
        fuse_observation_consistent(out.volume, out.observation, back, prev->node_errors, frames_prev, params.gate);
  }

  out.node_errors.assign(out.graph.size(), 0.0);
  if (!frames_next.empty() && !out.graph.empty()) {
    rep.tracking = solve_gauss_newton(out.graph, reference, frames_next, params.tracking, diagnostics);
    out.node_errors = node_tracking_error(rep.tracking.final_correspondences, out.graph, params.gate.epsilon);
    if (params.fuse_next)
      rep.fused_next =
          fuse_observation_consistent(out.volume, out.observation, out.graph, out.node_errors, frames_next, params.gate);
  }

  out.mesh = out.volume.extract_mesh();
  if (diagnostics) write_step_diagnostics(*diagnostics, out.frame_index, rep);
  return out;
}

SlidingFusion::SlidingFusion(SlidingFusionParams params, std::ostream* diagnostics)
    : params_(std::move(params)), diagnostics_(diagnostics) {
  params_.validate();
}

std::optional<SlidingWindowState> SlidingFusion::push(std::vector<DepthFrame> frames, WindowStepReport* report) {
  if (frames.empty()) throw ConfigError("frame has no views");
  window_.push_back(std::move(frames));
  if (window_.size() > 3) window_.pop_front();
  ++received_;
  if (received_ < 2) return std::nullopt;

  const std::size_t w = window_.size();
  std::span<const DepthFrame> prev_frames;
  if (w == 3) prev_frames = window_[0];
  SlidingWindowState state = step_window(last_ ? &*last_ : nullptr, prev_frames, window_[w - 2], window_[w - 1],
                                         params_, report, diagnostics_);
  // Only the graph and its errors are needed by the next step.
  SlidingWindowState carry;
  carry.frame_index = state.frame_index;
  carry.graph = state.graph;
  carry.node_errors = state.node_errors;
  last_ = std::move(carry);
  return state;
}

}  // namespace volcap
