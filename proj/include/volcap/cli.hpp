#pragma once

#include "volcap/implicit_recon.hpp"
#include "volcap/sliding_fusion.hpp"
#include "volcap/synth_scenes.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace volcap {

struct SceneSpec {
  std::string name = "static_sphere";
  nlohmann::json params = nlohmann::json::object();
  std::vector<int> frames = {0};  // used by training and ablation scene lists

  AnalyticScene build() const { return build_scene(name, params); }
};

/// Paired truncated-PSDF vs. no-PSDF trainings scored on held-out scenes.
struct AblationConfig {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<SceneSpec> train_scenes;
  std::vector<SceneSpec> held_out;
  int chamfer_samples = 20000;
  int gt_resolution = 192;
};

/// Everything a pipeline command needs. Serialized as one JSON document; all
/// keys are optional on input and unknown keys are rejected.
struct PipelineConfig {
  std::uint64_t seed = 1;
  int threads = 0;  // 0 keeps the OpenMP default
  bool deterministic = false;
  std::string output_dir = "volcap_out";
  std::string frames_dir;  // empty: <output_dir>/frames

  SceneSpec scene;
  int frames = 10;
  RigParams rig;
  NoiseParams noise;

  SlidingFusionParams fusion;
  bool rerender = true;

  ImplicitConfig model = ImplicitConfig::toy();
  std::string model_path;               // empty: <output_dir>/model/weights.bin
  std::string decoder = "network";      // network | analytic
  std::string recon_input = "rerendered";  // rerendered | raw
  ExtractionParams extraction;

  TrainConfig train;
  std::vector<SceneSpec> train_scenes = {SceneSpec{}};
  RigParams train_rig;

  std::string eval_prediction = "reconstruct";  // reconstruct | fuse
  int eval_samples = 100000;
  int gt_resolution = 256;

  AblationConfig ablation;

  PipelineConfig();

  void validate() const;
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);

  std::filesystem::path frames_path() const;
  std::filesystem::path fused_path() const { return std::filesystem::path(output_dir) / "fused"; }
  std::filesystem::path recon_path() const { return std::filesystem::path(output_dir) / "recon"; }
  std::filesystem::path eval_path() const { return std::filesystem::path(output_dir) / "eval"; }
  std::filesystem::path model_file() const;
  std::filesystem::path ablation_path() const { return std::filesystem::path(output_dir) / "ablation"; }
};

/// Applies "a.b.c=value" to a JSON tree; the value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Sequence layout: depth_<view>_<frame>.png, color_<view>_<frame>.png and calibration.json.
std::string depth_name(int view, int frame);
std::string color_name(int view, int frame);
std::string mesh_name(int frame);

struct FrameSet {
  std::vector<DepthFrame> depths;
  std::vector<ColorFrame> colors;
};
/// Number of consecutive frames (from 0) present for view 0.
int count_frames(const std::filesystem::path& dir);
FrameSet load_frame_set(const std::filesystem::path& dir, const std::vector<Camera>& cameras, int frame);

// Pipeline commands. Each writes under config.output_dir and logs progress to `log`.
void cmd_simulate(const PipelineConfig& config, std::ostream& log);
void cmd_fuse(const PipelineConfig& config, std::ostream& log);
void cmd_reconstruct(const PipelineConfig& config, std::ostream& log);
nlohmann::json cmd_evaluate(const PipelineConfig& config, std::ostream& log);
void cmd_train_toy(const PipelineConfig& config, std::ostream& log);
nlohmann::json cmd_ablate_psdf(const PipelineConfig& config, std::ostream& log);

struct PsdfAblationResult {
  std::vector<std::uint64_t> seeds;
  std::vector<double> with_psdf;     // mean held-out Chamfer per seed
  std::vector<double> without_psdf;
  int wins = 0;                      // seeds where the truncated-PSDF model is strictly better
  nlohmann::json to_json() const;
};
PsdfAblationResult run_psdf_ablation(const PipelineConfig& config, std::ostream* log = nullptr);

/// Renders noise-free training items for every scene and listed frame.
std::vector<TrainingItem> make_training_items(const std::vector<SceneSpec>& scenes, const RigParams& rig);

/// Mean Chamfer of the network reconstruction over scenes (infinite for an empty mesh).
double held_out_chamfer(const ImplicitModel& model, const std::vector<SceneSpec>& scenes, const RigParams& rig,
                        const ExtractionParams& extraction, int gt_resolution, int samples);

}  // namespace volcap
