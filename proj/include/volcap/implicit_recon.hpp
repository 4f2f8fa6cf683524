#pragma once

#include "volcap/mesh.hpp"
#include "volcap/nn.hpp"
#include "volcap/sensor_io.hpp"
#include "volcap/synth_scenes.hpp"

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace volcap {

enum class PsdfMode { truncated, untruncated, none };
enum class ColorAggregation { attention, mean };

std::string to_string(PsdfMode mode);
PsdfMode parse_psdf_mode(const std::string& s);
std::string to_string(ColorAggregation mode);
ColorAggregation parse_color_aggregation(const std::string& s);

/// Projective signed distance z_cam(q) - D(pi(q)), clamped to [-delta_p, delta_p]
/// when `truncate` is set. Positive behind the observed surface. nullopt when
/// q is behind the camera, outside the image or over a depth hole.
std::optional<double> truncated_psdf(const Vec3& q, const DepthFrame& depth, double delta_p, bool truncate = true);

struct ImplicitConfig {
  double delta_p = 0.01;
  PsdfMode psdf_mode = PsdfMode::truncated;
  /// Appends the query's normalized camera depth to every view token.
  bool depth_encoding = true;
  double depth_reference = 2.0;  // m, subtracted from depths before encoding
  double depth_scale = 0.5;      // m

  std::vector<int> encoder_channels = {16, 16, 32, 32, 32, 32};
  std::vector<int> encoder_strides = {2, 1, 2, 1, 2, 1};
  std::vector<int> color_encoder_channels = {16, 16, 32, 32, 32, 32};

  std::vector<int> hidden = {128, 128, 128, 128, 128};
  int aggregation_layer = 3;  // hidden layers run per view before aggregation
  bool skip = true;

  bool color_enabled = true;
  ColorAggregation color_aggregation = ColorAggregation::attention;
  int attention_dim = 64;
  int attention_heads = 8;
  int attention_layers = 2;
  int score_hidden = 32;

  void validate() const;
  int stride() const;
  int geo_token_dim() const;
  int color_token_dim() const;

  nlohmann::json to_json() const;
  static ImplicitConfig from_json(const nlohmann::json& j);
  /// Reduced widths for desk-scale toy training.
  static ImplicitConfig toy();
};

/// Encoder outputs and source frames of one view.
struct EncodedView {
  DepthFrame depth;
  ColorFrame color;
  bool has_color = false;
  nn::Tensor3 geo_features;
  nn::Tensor3 color_features;
};

class ImplicitModel {
 public:
  ImplicitModel() = default;
  explicit ImplicitModel(const ImplicitConfig& config, std::uint64_t seed = 0);

  const ImplicitConfig& config() const { return config_; }
  nn::ParamList params();
  nn::ParamList geo_params();
  nn::ParamList color_params();

  void save(const std::filesystem::path& path);
  static ImplicitModel load(const std::filesystem::path& path);

  /// Encoder input tensors: depth channels [normalized depth, valid]; color
  /// channels [r, g, b, normalized depth, valid].
  nn::Tensor3 geo_input(const DepthFrame& depth) const;
  nn::Tensor3 color_input(const ColorFrame& color, const DepthFrame& depth) const;

  /// Runs the encoders. `colors` may be empty (geometry only).
  std::vector<EncodedView> encode_views(std::span<const DepthFrame> depths, std::span<const ColorFrame> colors = {}) const;

  /// Occupancy logits; sigmoid(logit) > 0.5 is inside.
  Eigen::VectorXd geo_logits(const std::vector<EncodedView>& views, std::span<const Vec3> points) const;
  std::vector<double> geo_occupancy(const std::vector<EncodedView>& views, std::span<const Vec3> points) const;
  std::vector<Vec3f> color_query(const std::vector<EncodedView>& views, std::span<const Vec3> points) const;

  /// Mean squared occupancy error over the batch; accumulates gradients into
  /// the geometry parameters when `backward` is set. Views are encoded inside.
  double geo_loss(std::span<const DepthFrame> depths, std::span<const Vec3> points, std::span<const double> targets,
                  bool backward);
  /// Mean absolute rgb error; gradients reach the color parameters only.
  double color_loss(std::span<const DepthFrame> depths, std::span<const ColorFrame> colors,
                    std::span<const Vec3> points, std::span<const Vec3f> targets, bool backward);

 private:
  struct ViewTap {
    bool valid = false;
    nn::BilinearTap tap;
    double psdf = 0;
    double z = 0;
    Vec3f rgb = Vec3f::Zero();
  };
  ViewTap make_tap(const Vec3& q, const EncodedView& view) const;
  void geo_token(const ViewTap& t, const EncodedView& view, Eigen::Ref<nn::RowVec, 0, Eigen::InnerStride<>> row) const;
  void color_token(const ViewTap& t, const EncodedView& view, Eigen::Ref<nn::RowVec, 0, Eigen::InnerStride<>> row) const;

  void build();

  ImplicitConfig config_;
  nn::ConvEncoder geo_encoder_;
  nn::Mlp geo_trunk_, geo_head_;
  nn::ConvEncoder color_encoder_;
  nn::AttentionAggregator color_attention_;
  nn::Mlp color_trunk_, color_head_;
};

/// Black-box occupancy in [0,1] (inside > 0.5).
class OccupancyField {
 public:
  virtual ~OccupancyField() = default;
  virtual void evaluate(std::span<const Vec3> points, std::span<double> occupancy) const = 0;
};

class NetworkOccupancy : public OccupancyField {
 public:
  NetworkOccupancy(const ImplicitModel& model, std::vector<EncodedView> views)
      : model_(model), views_(std::move(views)) {}
  void evaluate(std::span<const Vec3> points, std::span<double> occupancy) const override;

 private:
  const ImplicitModel& model_;
  std::vector<EncodedView> views_;
};

/// Decoder stub: occupancy = sigmoid(-sdf(p) / tau).
class AnalyticOccupancy : public OccupancyField {
 public:
  AnalyticOccupancy(std::function<double(const Vec3&)> sdf, double tau = 0.02) : sdf_(std::move(sdf)), tau_(tau) {}
  void evaluate(std::span<const Vec3> points, std::span<double> occupancy) const override;

 private:
  std::function<double(const Vec3&)> sdf_;
  double tau_;
};

struct ExtractionParams {
  Vec3 bounds_min = Vec3::Constant(-0.55);
  Vec3 bounds_max = Vec3::Constant(0.55);
  int coarse_resolution = 64;  // cells per axis at the first level
  int levels = 2;              // each level halves the cell size
  double beta = 0.15;          // refine cells with a corner occupancy within beta of 0.5
  bool filter = true;          // depth-based candidate filter
  double carve_margin = 0.02;  // m in front of the observed depth counted as free space
  int hull_dilation = 2;       // px tolerance of the silhouette and free-space tests

  void validate() const;
  int final_resolution() const { return coarse_resolution << levels; }
};

struct ExtractionStats {
  std::size_t evaluations = 0;  // decoder queries
  std::size_t carved = 0;       // lattice points rejected by the filter
  std::size_t refined_cells = 0;
  double seconds = 0;
};

/// Lattice-point candidate test shared by the octree and dense paths: a point
/// is rejected when some view sees it outside the silhouette, or clearly in
/// front of the observed surface, or when no view sees it at all.
class CandidateFilter {
 public:
  CandidateFilter(std::span<const DepthFrame> frames, double margin, int dilation);
  bool keep(const Vec3& p) const;

 private:
  struct View {
    CameraIntrinsics intrinsics;
    CameraPose pose;
    Image<float> min_depth;  // dilated minimum of valid depth, 0 where no valid pixel is near
  };
  std::vector<View> views_;
  double margin_;
};

/// Coarse-to-fine extraction: occupancies on the coarse lattice, then cells
/// whose corners straddle 0.5 or come within beta of it are split level by
/// level down to the final resolution; marching cubes at 0.5 runs on the
/// finest refined cells. Cells that are not split hold no surface.
TriangleMesh extract_surface(const OccupancyField& field, std::span<const DepthFrame> frames,
                             const ExtractionParams& params, ExtractionStats* stats = nullptr);
/// Same lattice evaluated everywhere (oracle for the octree path).
TriangleMesh extract_surface_dense(const OccupancyField& field, std::span<const DepthFrame> frames,
                                   const ExtractionParams& params, ExtractionStats* stats = nullptr);

struct TrainingItem {
  std::shared_ptr<const AnalyticScene> scene;
  int t = 0;
  std::vector<DepthFrame> depths;
  std::vector<ColorFrame> colors;
};

struct TrainConfig {
  int steps = 5000;
  int batch = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  double uniform_fraction = 0.2;
  double near_fraction = 0.5;   // the rest is curvature-adaptive
  double near_sigma = 0.02;     // m
  int surface_pool = 8192;      // surface samples per item for near and adaptive draws
  bool train_geometry = true;
  bool train_color = false;
  int log_every = 100;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainReport {
  int steps = 0;
  std::vector<double> geo_loss;    // mean over each logging window
  std::vector<double> color_loss;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::vector<double> last_losses)
      : std::runtime_error(what), last_losses_(std::move(last_losses)) {}
  const std::vector<double>& last_losses() const { return last_losses_; }

 private:
  std::vector<double> last_losses_;
};

/// Builds a training item by rendering the scene at frame t (noise free).
TrainingItem make_training_item(std::shared_ptr<const AnalyticScene> scene, int t, const std::vector<Camera>& cameras);

/// Adam on mean squared occupancy error (geometry) and L1 rgb error (color).
/// Query points mix uniform samples in the scene bounds, Gaussian offsets of
/// surface samples and curvature-weighted surface samples; color points are
/// drawn on the surface weighted by the local color gradient. Deterministic
/// given the seed. Writes one JSON line per logging window to `curve`.
TrainReport train_toy(ImplicitModel& model, const std::vector<TrainingItem>& items, const TrainConfig& config,
                      std::ostream* curve = nullptr);

/// Points in the scene bounds with their inside/outside labels, for held-out evaluation.
struct LabeledPoints {
  std::vector<Vec3> points;
  std::vector<double> occupancy;
};
LabeledPoints sample_labeled_points(const AnalyticScene& scene, int t, std::size_t n, std::uint64_t seed,
                                    double near_fraction = 0.5, double near_sigma = 0.02);

}  // namespace volcap
