#include "volcap/cli.hpp"

#include "volcap/frame_io.hpp"
#include "volcap/metrics.hpp"
#include "volcap/rerender.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>

namespace volcap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads keys from one JSON object into existing defaults and rejects keys
// nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j.is_object()) throw ConfigError(context_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path(key) + " has the wrong type");
    }
  }

  void get_vec3(const char* key, Vec3& out) {
    std::vector<double> v = {out.x(), out.y(), out.z()};
    get(key, v);
    if (v.size() != 3) throw ConfigError(path(key) + " needs 3 numbers");
    out = Vec3(v[0], v[1], v[2]);
  }

  void get_vec3i(const char* key, Vec3i& out) {
    std::vector<int> v = {out.x(), out.y(), out.z()};
    get(key, v);
    if (v.size() != 3) throw ConfigError(path(key) + " needs 3 integers");
    out = Vec3i(v[0], v[1], v[2]);
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return context_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown config key '" + path(item.key()) + "'");
  }

 private:
  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
json vec3i_json(const Vec3i& v) { return json::array({v.x(), v.y(), v.z()}); }

json rig_to_json(const RigParams& r) {
  return {{"views", r.views},
          {"width", r.width},
          {"height", r.height},
          {"radius", r.radius},
          {"half_fov_deg", r.half_fov_deg},
          {"elevation_deg", r.elevation_deg},
          {"target", vec3_json(r.target)}};
}

void rig_from_json(const json& j, const std::string& ctx, RigParams& r) {
  Fields f(j, ctx);
  f.get("views", r.views);
  f.get("width", r.width);
  f.get("height", r.height);
  f.get("radius", r.radius);
  f.get("half_fov_deg", r.half_fov_deg);
  f.get("elevation_deg", r.elevation_deg);
  f.get_vec3("target", r.target);
  f.finish();
}

json scene_to_json(const SceneSpec& s) { return {{"name", s.name}, {"params", s.params}, {"frames", s.frames}}; }

SceneSpec scene_from_json(const json& j, const std::string& ctx) {
  SceneSpec s;
  Fields f(j, ctx);
  f.get("name", s.name);
  f.get("params", s.params);
  f.get("frames", s.frames);
  f.finish();
  return s;
}

json scenes_to_json(const std::vector<SceneSpec>& v) {
  json a = json::array();
  for (const SceneSpec& s : v) a.push_back(scene_to_json(s));
  return a;
}

std::vector<SceneSpec> scenes_from_json(const json& j, const std::string& ctx) {
  if (!j.is_array()) throw ConfigError(ctx + " must be a list of scenes");
  std::vector<SceneSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(scene_from_json(j[i], ctx + "[" + std::to_string(i) + "]"));
  return out;
}

json tracking_to_json(const TrackingParams& t) {
  return {{"lambda_data", t.lambda_data},       {"lambda_reg", t.lambda_reg},
          {"max_gn_iters", t.max_gn_iters},     {"pcg_tol", t.pcg_tol},
          {"pcg_max_iters", t.pcg_max_iters},   {"dist_reject", t.dist_reject},
          {"normal_reject", t.normal_reject},   {"max_halvings", t.max_halvings},
          {"convergence_tol", t.convergence_tol}, {"damping", t.damping}};
}

void tracking_from_json(const json& j, TrackingParams& t) {
  Fields f(j, "fusion.tracking");
  f.get("lambda_data", t.lambda_data);
  f.get("lambda_reg", t.lambda_reg);
  f.get("max_gn_iters", t.max_gn_iters);
  f.get("pcg_tol", t.pcg_tol);
  f.get("pcg_max_iters", t.pcg_max_iters);
  f.get("dist_reject", t.dist_reject);
  f.get("normal_reject", t.normal_reject);
  f.get("max_halvings", t.max_halvings);
  f.get("convergence_tol", t.convergence_tol);
  f.get("damping", t.damping);
  f.finish();
}

json extraction_to_json(const ExtractionParams& e) {
  return {{"bounds_min", vec3_json(e.bounds_min)},
          {"bounds_max", vec3_json(e.bounds_max)},
          {"coarse_resolution", e.coarse_resolution},
          {"levels", e.levels},
          {"beta", e.beta},
          {"filter", e.filter},
          {"carve_margin", e.carve_margin},
          {"hull_dilation", e.hull_dilation}};
}

void extraction_from_json(const json& j, ExtractionParams& e) {
  Fields f(j, "implicit.extraction");
  f.get_vec3("bounds_min", e.bounds_min);
  f.get_vec3("bounds_max", e.bounds_max);
  f.get("coarse_resolution", e.coarse_resolution);
  f.get("levels", e.levels);
  f.get("beta", e.beta);
  f.get("filter", e.filter);
  f.get("carve_margin", e.carve_margin);
  f.get("hull_dilation", e.hull_dilation);
  f.finish();
}

json train_to_json(const TrainConfig& t) {
  json j = t.to_json();
  j.erase("seed");  // derived from the global seed
  return j;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

std::string padded(int v, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << v;
  return os.str();
}

void clamp_colors(TriangleMesh& mesh) {
  for (Vec3f& c : mesh.colors) c = c.cwiseMax(0.0f).cwiseMin(1.0f);
}

ExtractionParams bounds_for(const AnalyticScene& scene, ExtractionParams e) {
  const double r = 1.1 * scene.bounds_radius;
  e.bounds_min = scene.bounds_center - Vec3::Constant(r);
  e.bounds_max = scene.bounds_center + Vec3::Constant(r);
  return e;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

PipelineConfig::PipelineConfig() {
  rig.width = rig.height = 128;
  train_rig = rig;
  ablation.train_scenes = {SceneSpec{"wrinkled_sphere", {{"frequency", 16.0}, {"amplitude", 0.02}}, {0}},
                           SceneSpec{"wrinkled_sphere", {{"frequency", 24.0}, {"amplitude", 0.02}}, {0}}};
  ablation.held_out = {SceneSpec{"wrinkled_sphere", {{"frequency", 20.0}, {"amplitude", 0.02}}, {0}}};
}

void PipelineConfig::validate() const {
  if (threads < 0) throw ConfigError("threads must be non-negative");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (frames < 1) throw ConfigError("frames must be at least 1");
  if (rig.views < 1 || rig.width < 1 || rig.height < 1) throw ConfigError("rig needs views and a positive image size");
  if (train_rig.views < 1 || train_rig.width < 1 || train_rig.height < 1)
    throw ConfigError("training rig needs views and a positive image size");
  if (noise.sigma_base < 0 || noise.sigma_quadratic < 0 || noise.dropout_probability < 0 ||
      noise.dropout_probability > 1 || !(noise.edge_threshold > 0))
    throw ConfigError("noise parameters out of range");
  fusion.validate();
  model.validate();
  extraction.validate();
  train.validate();
  if (decoder != "network" && decoder != "analytic") throw ConfigError("decoder must be network or analytic");
  if (recon_input != "rerendered" && recon_input != "raw") throw ConfigError("implicit input must be rerendered or raw");
  if (eval_prediction != "reconstruct" && eval_prediction != "fuse")
    throw ConfigError("evaluate.prediction must be reconstruct or fuse");
  if (eval_samples < 1 || gt_resolution < 8) throw ConfigError("evaluation samples/resolution too small");
  if (ablation.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (ablation.chamfer_samples < 1 || ablation.gt_resolution < 8) throw ConfigError("ablation metric settings too small");
  const auto names = scene_names();
  auto check = [&names](const SceneSpec& s) {
    if (std::find(names.begin(), names.end(), s.name) == names.end()) throw ConfigError("unknown scene '" + s.name + "'");
    if (s.frames.empty()) throw ConfigError("scene '" + s.name + "' lists no frames");
  };
  check(scene);
  for (const SceneSpec& s : train_scenes) check(s);
  for (const SceneSpec& s : ablation.train_scenes) check(s);
  for (const SceneSpec& s : ablation.held_out) check(s);
  if (train_scenes.empty()) throw ConfigError("training needs at least one scene");
}

json PipelineConfig::to_json() const {
  json fusion_j = {{"volume_origin", vec3_json(fusion.volume_origin)},
                   {"voxel_size", fusion.voxel_size},
                   {"volume_dims", vec3i_json(fusion.volume_dims)},
                   {"truncation", fusion.truncation},
                   {"delta_t", fusion.delta_t},
                   {"delta_e", fusion.gate.delta_e},
                   {"neighbor_radius", fusion.gate.neighbor_radius},
                   {"epsilon", fusion.gate.epsilon},
                   {"normalized_weights", fusion.gate.normalized_weights},
                   {"node_radius", fusion.node_radius},
                   {"edge_count", fusion.edge_count},
                   {"fuse_previous", fusion.fuse_previous},
                   {"fuse_next", fusion.fuse_next},
                   {"rerender", rerender},
                   {"tracking", tracking_to_json(fusion.tracking)}};
  json train_j = train_to_json(train);
  train_j["scenes"] = scenes_to_json(train_scenes);
  train_j["rig"] = rig_to_json(train_rig);
  return {{"seed", seed},
          {"threads", threads},
          {"deterministic", deterministic},
          {"output_dir", output_dir},
          {"frames_dir", frames_dir},
          {"scene", scene_to_json(scene)},
          {"frames", frames},
          {"rig", rig_to_json(rig)},
          {"noise",
           {{"sigma_base", noise.sigma_base},
            {"sigma_quadratic", noise.sigma_quadratic},
            {"dropout_probability", noise.dropout_probability},
            {"edge_threshold", noise.edge_threshold}}},
          {"fusion", fusion_j},
          {"implicit",
           {{"model", model.to_json()},
            {"model_path", model_path},
            {"decoder", decoder},
            {"input", recon_input},
            {"extraction", extraction_to_json(extraction)}}},
          {"train", train_j},
          {"evaluate", {{"prediction", eval_prediction}, {"samples", eval_samples}, {"gt_resolution", gt_resolution}}},
          {"ablation",
           {{"seeds", ablation.seeds},
            {"train_scenes", scenes_to_json(ablation.train_scenes)},
            {"held_out", scenes_to_json(ablation.held_out)},
            {"chamfer_samples", ablation.chamfer_samples},
            {"gt_resolution", ablation.gt_resolution}}}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  Fields f(j, "config");
  f.get("seed", c.seed);
  f.get("threads", c.threads);
  f.get("deterministic", c.deterministic);
  f.get("output_dir", c.output_dir);
  f.get("frames_dir", c.frames_dir);
  if (const json* s = f.sub("scene")) c.scene = scene_from_json(*s, "config.scene");
  f.get("frames", c.frames);
  if (const json* r = f.sub("rig")) rig_from_json(*r, "config.rig", c.rig);
  if (const json* n = f.sub("noise")) {
    Fields nf(*n, "config.noise");
    nf.get("sigma_base", c.noise.sigma_base);
    nf.get("sigma_quadratic", c.noise.sigma_quadratic);
    nf.get("dropout_probability", c.noise.dropout_probability);
    nf.get("edge_threshold", c.noise.edge_threshold);
    nf.finish();
  }
  if (const json* fu = f.sub("fusion")) {
    Fields ff(*fu, "config.fusion");
    ff.get_vec3("volume_origin", c.fusion.volume_origin);
    ff.get("voxel_size", c.fusion.voxel_size);
    ff.get_vec3i("volume_dims", c.fusion.volume_dims);
    ff.get("truncation", c.fusion.truncation);
    ff.get("delta_t", c.fusion.delta_t);
    ff.get("delta_e", c.fusion.gate.delta_e);
    ff.get("neighbor_radius", c.fusion.gate.neighbor_radius);
    ff.get("epsilon", c.fusion.gate.epsilon);
    ff.get("normalized_weights", c.fusion.gate.normalized_weights);
    ff.get("node_radius", c.fusion.node_radius);
    ff.get("edge_count", c.fusion.edge_count);
    ff.get("fuse_previous", c.fusion.fuse_previous);
    ff.get("fuse_next", c.fusion.fuse_next);
    ff.get("rerender", c.rerender);
    if (const json* t = ff.sub("tracking")) tracking_from_json(*t, c.fusion.tracking);
    ff.finish();
  }
  if (const json* im = f.sub("implicit")) {
    Fields imf(*im, "config.implicit");
    if (const json* m = imf.sub("model")) {
      // Start from the current model so partial overrides keep the other sizes.
      json merged = c.model.to_json();
      merged.update(*m);
      c.model = ImplicitConfig::from_json(merged);
      for (const auto& item : m->items())
        if (!c.model.to_json().contains(item.key()))
          throw ConfigError("unknown config key 'config.implicit.model." + item.key() + "'");
    }
    imf.get("model_path", c.model_path);
    imf.get("decoder", c.decoder);
    imf.get("input", c.recon_input);
    if (const json* e = imf.sub("extraction")) extraction_from_json(*e, c.extraction);
    imf.finish();
  }
  if (const json* tr = f.sub("train")) {
    json rest = *tr;
    if (rest.contains("scenes")) {
      c.train_scenes = scenes_from_json(rest.at("scenes"), "config.train.scenes");
      rest.erase("scenes");
    }
    if (rest.contains("rig")) {
      rig_from_json(rest.at("rig"), "config.train.rig", c.train_rig);
      rest.erase("rig");
    }
    if (rest.contains("seed")) throw ConfigError("config.train.seed is derived from the global seed; set 'seed' instead");
    json merged = train_to_json(c.train);
    for (const auto& item : rest.items())
      if (!merged.contains(item.key())) throw ConfigError("unknown config key 'config.train." + item.key() + "'");
    merged.update(rest);
    c.train = TrainConfig::from_json(merged);
  }
  if (const json* ev = f.sub("evaluate")) {
    Fields ef(*ev, "config.evaluate");
    ef.get("prediction", c.eval_prediction);
    ef.get("samples", c.eval_samples);
    ef.get("gt_resolution", c.gt_resolution);
    ef.finish();
  }
  if (const json* ab = f.sub("ablation")) {
    Fields af(*ab, "config.ablation");
    af.get("seeds", c.ablation.seeds);
    if (const json* s = af.sub("train_scenes")) c.ablation.train_scenes = scenes_from_json(*s, "config.ablation.train_scenes");
    if (const json* s = af.sub("held_out")) c.ablation.held_out = scenes_from_json(*s, "config.ablation.held_out");
    af.get("chamfer_samples", c.ablation.chamfer_samples);
    af.get("gt_resolution", c.ablation.gt_resolution);
    af.finish();
  }
  f.finish();
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

fs::path PipelineConfig::frames_path() const {
  return frames_dir.empty() ? fs::path(output_dir) / "frames" : fs::path(frames_dir);
}

fs::path PipelineConfig::model_file() const {
  return model_path.empty() ? fs::path(output_dir) / "model" / "weights.bin" : fs::path(model_path);
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Frame files

std::string depth_name(int view, int frame) { return "depth_" + std::to_string(view) + "_" + padded(frame, 4) + ".png"; }
std::string color_name(int view, int frame) { return "color_" + std::to_string(view) + "_" + padded(frame, 4) + ".png"; }
std::string mesh_name(int frame) { return "mesh_" + padded(frame, 4) + ".ply"; }

int count_frames(const fs::path& dir) {
  int n = 0;
  while (fs::exists(dir / depth_name(0, n))) ++n;
  return n;
}

FrameSet load_frame_set(const fs::path& dir, const std::vector<Camera>& cameras, int frame) {
  FrameSet out;
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    const Camera& cam = cameras[v];
    DepthFrame d(cam.intrinsics, cam.pose, frame);
    d.depth = read_depth_png(dir / depth_name(static_cast<int>(v), frame));
    ColorFrame c(cam.intrinsics, cam.pose, frame);
    c.color = read_color_png(dir / color_name(static_cast<int>(v), frame));
    if (d.depth.width() != cam.intrinsics.width || d.depth.height() != cam.intrinsics.height ||
        c.color.width() != cam.intrinsics.width || c.color.height() != cam.intrinsics.height)
      throw IoError("calibration mismatch: view " + std::to_string(v) + " frame " + std::to_string(frame) + " is " +
                    std::to_string(d.depth.width()) + "x" + std::to_string(d.depth.height()) +
                    " but the calibration says " + std::to_string(cam.intrinsics.width) + "x" +
                    std::to_string(cam.intrinsics.height));
    out.depths.push_back(std::move(d));
    out.colors.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_simulate(const PipelineConfig& config, std::ostream& log) {
  const AnalyticScene scene = config.scene.build();
  const std::vector<Camera> cameras = make_ring_rig(config.rig);
  const fs::path dir = config.frames_path();
  ensure_dir(dir);
  write_calibration(dir / "calibration.json", cameras);
  for (int t = 0; t < config.frames; ++t) {
    const auto views = render_scene_views(scene, t, cameras, config.noise,
                                          derive_seed(config.seed, "simulate/frame/" + std::to_string(t)));
    for (std::size_t v = 0; v < views.size(); ++v) {
      write_depth_png(dir / depth_name(static_cast<int>(v), t), views[v].depth);
      write_color_png(dir / color_name(static_cast<int>(v), t), views[v].color);
    }
    log << "simulate: frame " << t << " (" << views.size() << " views)\n";
  }
}

void cmd_fuse(const PipelineConfig& config, std::ostream& log) {
  const fs::path in = config.frames_path();
  const std::vector<Camera> cameras = read_calibration(in / "calibration.json");
  const int n = count_frames(in);
  if (n == 0) throw IoError("no frames found in " + in.string() + " (expected " + depth_name(0, 0) + ")");
  const fs::path out = config.fused_path();
  const fs::path rr = out / "rerender";
  ensure_dir(out);
  if (config.rerender) {
    ensure_dir(rr);
    write_calibration(rr / "calibration.json", cameras);
  }
  std::ofstream diagnostics(out / "diagnostics.jsonl");
  if (!diagnostics) throw IoError("cannot write diagnostics in " + out.string());
  SlidingFusion driver(config.fusion, &diagnostics);
  std::deque<FrameSet> held;  // frames t and t+1 awaiting output
  for (int t = 0; t < n; ++t) {
    held.push_back(load_frame_set(in, cameras, t));
    WindowStepReport report;
    auto state = driver.push(held.back().depths, &report);
    if (!state) continue;
    const FrameSet& frame = held.front();
    TriangleMesh mesh = state->mesh;
    const ColorProjectionStats cs = project_colors_to_mesh(mesh, frame.colors, frame.depths);
    write_ply(out / mesh_name(state->frame_index), mesh);
    if (config.rerender) {
      const auto views = rerender_views(mesh, cameras);
      for (std::size_t v = 0; v < views.size(); ++v) {
        write_depth_png(rr / depth_name(static_cast<int>(v), state->frame_index), views[v].depth);
        write_color_png(rr / color_name(static_cast<int>(v), state->frame_index), views[v].color);
      }
    }
    log << "fuse: frame " << state->frame_index << " nodes " << report.nodes << " triangles " << mesh.triangles.size()
        << " uncolored " << cs.uncolored << "\n";
    held.pop_front();
  }
  if (n == 1) log << "fuse: a single frame produces no output (the window needs frame t+1)\n";
}

void cmd_reconstruct(const PipelineConfig& config, std::ostream& log) {
  const fs::path in = config.recon_input == "rerendered" ? config.fused_path() / "rerender" : config.frames_path();
  if (!fs::exists(in / "calibration.json"))
    throw IoError("no input frames in " + in.string() +
                  (config.recon_input == "rerendered" ? " (run fuse first)" : " (run simulate first)"));
  const std::vector<Camera> cameras = read_calibration(in / "calibration.json");
  const int n = count_frames(in);
  if (n == 0) throw IoError("no frames found in " + in.string());

  std::unique_ptr<ImplicitModel> model;
  std::optional<AnalyticScene> scene;
  if (config.decoder == "network") {
    if (!fs::exists(config.model_file()))
      throw ConfigError("no model weights at " + config.model_file().string() + "; run `volcap train-toy` first");
    model = std::make_unique<ImplicitModel>(ImplicitModel::load(config.model_file()));
  } else {
    scene = config.scene.build();
  }
  const fs::path out = config.recon_path();
  ensure_dir(out);
  for (int t = 0; t < n; ++t) {
    const FrameSet frames = load_frame_set(in, cameras, t);
    ExtractionStats stats;
    TriangleMesh mesh;
    if (model) {
      const NetworkOccupancy field(*model, model->encode_views(frames.depths));
      mesh = extract_surface(field, frames.depths, config.extraction, &stats);
    } else {
      const AnalyticOccupancy field([&scene, t](const Vec3& p) { return scene->sdf(t, p); });
      mesh = extract_surface(field, frames.depths, config.extraction, &stats);
    }
    if (model && model->config().color_enabled) {
      mesh.colors = model->color_query(model->encode_views(frames.depths, frames.colors), mesh.vertices);
    } else {
      project_colors_to_mesh(mesh, frames.colors, frames.depths);
    }
    clamp_colors(mesh);
    write_ply(out / mesh_name(t), mesh);
    log << "reconstruct: frame " << t << " evaluations " << stats.evaluations << " carved " << stats.carved
        << " triangles " << mesh.triangles.size() << "\n";
  }
}

json cmd_evaluate(const PipelineConfig& config, std::ostream& log) {
  const fs::path in = config.eval_prediction == "reconstruct" ? config.recon_path() : config.fused_path();
  std::vector<int> frames;
  for (int t = 0; t < 100000; ++t) {
    if (fs::exists(in / mesh_name(t))) frames.push_back(t);
    else if (t > config.frames + 1) break;
  }
  if (frames.empty()) throw IoError("no predicted meshes in " + in.string());
  const AnalyticScene scene = config.scene.build();
  const std::uint64_t seed = derive_seed(config.seed, "evaluate");
  json rows = json::array();
  MeshMetrics sum;
  int ok = 0;
  for (int t : frames) {
    const TriangleMesh pred = read_ply(in / mesh_name(t));
    if (pred.empty()) {
      rows.push_back({{"frame", t}, {"status", "failed"}, {"reason", "empty mesh"}});
      continue;
    }
    const TriangleMesh gt = ground_truth_mesh(scene, t, config.gt_resolution);
    const MeshMetrics m = evaluate_mesh(pred, gt, static_cast<std::size_t>(config.eval_samples), seed);
    rows.push_back({{"frame", t},
                    {"status", "ok"},
                    {"p2s", m.p2s},
                    {"chamfer", m.chamfer},
                    {"normal_consistency", m.normal_consistency}});
    sum.p2s += m.p2s;
    sum.chamfer += m.chamfer;
    sum.normal_consistency += m.normal_consistency;
    ++ok;
  }
  json mean = {{"frames_ok", ok}, {"frames_failed", static_cast<int>(frames.size()) - ok}};
  if (ok > 0) {
    mean["p2s"] = sum.p2s / ok;
    mean["chamfer"] = sum.chamfer / ok;
    mean["normal_consistency"] = sum.normal_consistency / ok;
  }
  const json report = {{"prediction", in.string()}, {"frames", rows}, {"mean", mean}};

  std::ostringstream table;
  table << std::left << std::setw(8) << "frame" << std::setw(14) << "p2s_m" << std::setw(14) << "chamfer_m"
        << "normal_consistency\n";
  table << std::scientific << std::setprecision(4);
  for (const json& r : rows) {
    table << std::left << std::setw(8) << r.at("frame").get<int>();
    if (r.at("status") == "ok")
      table << std::setw(14) << r.at("p2s").get<double>() << std::setw(14) << r.at("chamfer").get<double>()
            << std::fixed << std::setprecision(4) << r.at("normal_consistency").get<double>() << std::scientific << "\n";
    else
      table << "FAILED (" << r.at("reason").get<std::string>() << ")\n";
  }
  table << std::left << std::setw(8) << "mean";
  if (ok > 0)
    table << std::setw(14) << mean.at("p2s").get<double>() << std::setw(14) << mean.at("chamfer").get<double>()
          << std::fixed << std::setprecision(4) << mean.at("normal_consistency").get<double>() << "\n";
  else
    table << "no successful frames\n";

  const fs::path out = config.eval_path();
  ensure_dir(out);
  std::ofstream(out / "report.json") << report.dump(2) << '\n';
  std::ofstream(out / "report.txt") << table.str();
  log << table.str();
  return report;
}

std::vector<TrainingItem> make_training_items(const std::vector<SceneSpec>& scenes, const RigParams& rig) {
  const std::vector<Camera> cameras = make_ring_rig(rig);
  std::vector<TrainingItem> items;
  for (const SceneSpec& s : scenes) {
    auto scene = std::make_shared<const AnalyticScene>(s.build());
    for (int t : s.frames) items.push_back(make_training_item(scene, t, cameras));
  }
  return items;
}

void cmd_train_toy(const PipelineConfig& config, std::ostream& log) {
  const auto items = make_training_items(config.train_scenes, config.train_rig);
  ImplicitModel model(config.model, derive_seed(config.seed, "model"));
  TrainConfig tc = config.train;
  tc.seed = derive_seed(config.seed, "train");
  const fs::path weights = config.model_file();
  ensure_dir(weights.parent_path().empty() ? fs::path(".") : weights.parent_path());
  const fs::path curve_path = weights.parent_path() / (weights.stem().string() + ".curve.jsonl");
  std::ofstream curve(curve_path);
  if (!curve) throw IoError("cannot write " + curve_path.string());
  const TrainReport r = train_toy(model, items, tc, &curve);
  model.save(weights);
  log << "train-toy: " << r.steps << " steps";
  if (!r.geo_loss.empty()) log << ", final geometry loss " << r.geo_loss.back();
  if (config.train.train_color && !r.color_loss.empty()) log << ", final color loss " << r.color_loss.back();
  log << "; weights written to " << weights.string() << "\n";
}

double held_out_chamfer(const ImplicitModel& model, const std::vector<SceneSpec>& scenes, const RigParams& rig,
                        const ExtractionParams& extraction, int gt_resolution, int samples) {
  const std::vector<Camera> cameras = make_ring_rig(rig);
  double sum = 0;
  int count = 0;
  for (const SceneSpec& s : scenes) {
    const AnalyticScene scene = s.build();
    for (int t : s.frames) {
      std::vector<DepthFrame> depths;
      for (auto& f : render_scene_views(scene, t, cameras, NoiseParams::none(), 0)) depths.push_back(std::move(f.depth));
      const NetworkOccupancy field(model, model.encode_views(depths));
      const TriangleMesh mesh = extract_surface(field, depths, bounds_for(scene, extraction));
      ++count;
      if (mesh.empty()) return std::numeric_limits<double>::infinity();
      const TriangleMesh gt = ground_truth_mesh(scene, t, gt_resolution);
      sum += chamfer(mesh, gt, static_cast<std::size_t>(samples), kDefaultMetricSeed);
    }
  }
  return sum / std::max(1, count);
}

json PsdfAblationResult::to_json() const {
  json runs = json::array();
  for (std::size_t i = 0; i < seeds.size(); ++i)
    runs.push_back({{"seed", seeds[i]},
                    {"chamfer_truncated_psdf", with_psdf[i]},
                    {"chamfer_no_psdf", without_psdf[i]},
                    {"psdf_better", with_psdf[i] < without_psdf[i]}});
  return {{"runs", runs}, {"wins", wins}, {"seeds", seeds.size()}};
}

PsdfAblationResult run_psdf_ablation(const PipelineConfig& config, std::ostream* log) {
  const auto items = make_training_items(config.ablation.train_scenes, config.train_rig);
  PsdfAblationResult result;
  for (std::uint64_t seed : config.ablation.seeds) {
    double chamfers[2] = {0, 0};
    const PsdfMode modes[2] = {PsdfMode::truncated, PsdfMode::none};
    for (int m = 0; m < 2; ++m) {
      ImplicitConfig mc = config.model;
      mc.psdf_mode = modes[m];
      ImplicitModel model(mc, derive_seed(seed, "ablation/model"));
      TrainConfig tc = config.train;
      tc.seed = derive_seed(seed, "ablation/train");
      train_toy(model, items, tc);
      chamfers[m] = held_out_chamfer(model, config.ablation.held_out, config.train_rig, config.extraction,
                                     config.ablation.gt_resolution, config.ablation.chamfer_samples);
      if (log) *log << "ablate-psdf: seed " << seed << " psdf " << to_string(modes[m]) << " chamfer " << chamfers[m] << "\n";
    }
    result.seeds.push_back(seed);
    result.with_psdf.push_back(chamfers[0]);
    result.without_psdf.push_back(chamfers[1]);
    if (chamfers[0] < chamfers[1]) ++result.wins;
  }
  return result;
}

json cmd_ablate_psdf(const PipelineConfig& config, std::ostream& log) {
  const PsdfAblationResult r = run_psdf_ablation(config, &log);
  const json report = r.to_json();
  ensure_dir(config.ablation_path());
  std::ofstream(config.ablation_path() / "report.json") << report.dump(2) << '\n';
  log << "ablate-psdf: truncated PSDF better in " << r.wins << " of " << r.seeds.size() << " seeds\n";
  return report;
}

}  // namespace volcap
