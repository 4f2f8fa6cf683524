#pragma once

#include "volcap/deformation_graph.hpp"
#include "volcap/nonrigid_tracking.hpp"
#include "volcap/tsdf_volume.hpp"

#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace volcap {

struct FusionGateParams {
  double delta_e = 0.1;         // squared meters
  int neighbor_radius = 3;      // voxels, Chebyshev
  double epsilon = 1e-6;
  bool normalized_weights = false;  // normalize the voxel-error interpolation weights

  void validate() const;
};

/// e(n_j) = sum_{i in C_j} r_i / (sum_{i in C_j} w(v_i, n_j) + epsilon), where
/// C_j holds the correspondences whose vertex has node j among its neighbours
/// and r_i is the squared point-to-plane residual under `graph`.
std::vector<double> node_tracking_error(std::span<const Correspondence> correspondences, const DeformationGraph& graph,
                                        double epsilon = 1e-6);

/// e(x) = sum over the K nearest nodes of w(x, n_j) e(n_j).
double voxel_tracking_error(const Vec3& x, const DeformationGraph& graph, const std::vector<double>& node_errors,
                            bool normalized = false);
double voxel_tracking_error(const NodeNeighbors& nb, const std::vector<double>& node_errors, bool normalized = false);

/// Voxels within Chebyshev `radius` of an observed band voxel
/// (weight > 0 and |tsdf| < 1) of `observation`.
std::vector<char> dilated_band_mask(const TsdfVolume& observation, int radius);

struct FusionReport {
  std::vector<std::size_t> write_set;  // voxels that passed both gates and entered the update, sorted
  std::size_t updated = 0;             // voxels whose value changed
  std::size_t band_candidates = 0;     // voxels passing the neighbourhood gate
  std::size_t uncovered = 0;           // passed both gates but no node influence
};

/// Observation-consistent fusion: a voxel of `volume` is updated from the
/// given frames only if its interpolated tracking error is below delta_e and
/// a band voxel of `observation` lies within the neighbour radius. Passing
/// voxel centers are warped by `graph` and fused projectively.
/// `graph` must have a KNN field attached to the volume lattice.
FusionReport fuse_observation_consistent(TsdfVolume& volume, const TsdfVolume& observation,
                                         const DeformationGraph& graph, const std::vector<double>& node_errors,
                                         std::span<const DepthFrame> frames, const FusionGateParams& params);

struct SlidingFusionParams {
  Vec3 volume_origin = Vec3::Constant(-1.28);
  double voxel_size = 0.01;
  Vec3i volume_dims = Vec3i::Constant(256);
  double truncation = 0.0;  // 0 selects 4 voxels
  double delta_t = 0.5;
  double node_radius = 0.05;
  int edge_count = DeformationGraph::kDefaultEdgeCount;
  TrackingParams tracking;
  FusionGateParams gate;
  bool fuse_previous = true;  // fuse frame t-1 through the inverted previous warp
  bool fuse_next = true;

  void validate() const;
  TsdfVolume make_volume() const { return TsdfVolume(volume_origin, voxel_size, volume_dims, truncation); }
};

struct SlidingWindowState {
  int frame_index = -1;
  TsdfVolume observation;  // frame t alone
  TsdfVolume volume;       // fused result for frame t
  DeformationGraph graph;  // nodes in frame t, transforms tracked to frame t+1
  std::vector<double> node_errors;
  TriangleMesh mesh;       // extracted from `volume`
};

struct WindowStepReport {
  TopologyInitStats init;
  TrackingReport tracking;
  FusionReport fused_previous;
  FusionReport fused_next;
  std::size_t nodes = 0;
};

/// One step of the 3-frame window for frame t. `prev` is the state of frame
/// t-1 (nullptr at the start of a sequence); `frames_prev` may be empty. The
/// previous state's tracked graph carries frame t-1 into frame t.
SlidingWindowState step_window(const SlidingWindowState* prev, std::span<const DepthFrame> frames_prev,
                               std::span<const DepthFrame> frames_t, std::span<const DepthFrame> frames_next,
                               const SlidingFusionParams& params, WindowStepReport* report = nullptr,
                               std::ostream* diagnostics = nullptr);

/// Streaming driver. Each push of frame k returns the finished state of
/// frame k-1, so output lags the newest input by exactly one frame.
class SlidingFusion {
 public:
  explicit SlidingFusion(SlidingFusionParams params, std::ostream* diagnostics = nullptr);

  std::optional<SlidingWindowState> push(std::vector<DepthFrame> frames, WindowStepReport* report = nullptr);
  int frames_received() const { return received_; }

 private:
  SlidingFusionParams params_;
  std::ostream* diagnostics_;
  std::deque<std::vector<DepthFrame>> window_;  // at most frames t-1, t, t+1
  std::optional<SlidingWindowState> last_;
  int received_ = 0;
};

}  // namespace volcap
