#include "doctest.h"

#include "volcap/cli.hpp"
#include "volcap/frame_io.hpp"
#include "volcap/metrics.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace volcap;
namespace fs = std::filesystem;

namespace {

PipelineConfig small_config(const std::string& dir) {
  const nlohmann::json j = {
      {"output_dir", dir},
      {"frames", 3},
      {"scene", {{"name", "static_sphere"}, {"params", {{"radius", 0.3}}}}},
      {"rig", {{"width", 48}, {"height", 48}}},
      {"fusion",
       {{"volume_origin", {-0.5, -0.5, -0.5}}, {"voxel_size", 0.025}, {"volume_dims", {41, 41, 41}}, {"node_radius", 0.12}}},
      {"implicit", {{"decoder", "analytic"}, {"extraction", {{"coarse_resolution", 12}, {"levels", 1}}}}},
      {"train",
       {{"steps", 0}, {"rig", {{"width", 32}, {"height", 32}}}, {"scenes", {{{"name", "static_sphere"}, {"params", {{"radius", 0.3}}}}}}}},
      {"evaluate", {{"samples", 3000}, {"gt_resolution", 48}}}};
  return PipelineConfig::from_json(j);
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("volcap_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

// Relative path -> contents for every file under root.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

}  // namespace

TEST_CASE("pipeline config: defaults, round trip, overrides and strictness") {
  const PipelineConfig d;
  CHECK(d.fusion.delta_t == 0.5);
  CHECK(d.fusion.gate.delta_e == 0.1);
  CHECK(d.model.delta_p == 0.01);
  const nlohmann::json j = d.to_json();
  CHECK(PipelineConfig::from_json(j).to_json() == j);

  nlohmann::json o = nlohmann::json::object();
  apply_override(o, "fusion.delta_e=0.05");
  apply_override(o, "scene.name=wrinkled_sphere");
  apply_override(o, "implicit.model.psdf_mode=none");
  const PipelineConfig c = PipelineConfig::from_json(o);
  CHECK(c.fusion.gate.delta_e == 0.05);
  CHECK(c.scene.name == "wrinkled_sphere");
  CHECK(c.model.psdf_mode == PsdfMode::none);
  CHECK(c.model.hidden == ImplicitConfig::toy().hidden);
  CHECK(PipelineConfig::from_json(c.to_json()).to_json() == c.to_json());

  CHECK_THROWS_AS(PipelineConfig::from_json({{"fusion", {{"delta_x", 1}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"frames", "many"}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"scene", {{"name", "teapot"}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"fusion", {{"voxel_size", -1}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"train", {{"seed", 3}}}}), ConfigError);
  nlohmann::json bad;
  CHECK_THROWS_AS(apply_override(bad, "novalue"), ConfigError);
}

TEST_CASE("simulate: file-count contract, directory creation and determinism") {
  const fs::path a = temp_dir("sim_a") / "nested", b = temp_dir("sim_b");
  PipelineConfig ca = small_config(a.string()), cb = small_config(b.string());
  ca.frames = cb.frames = 10;
  std::ostringstream log;
  cmd_simulate(ca, log);
  cmd_simulate(cb, log);
  int depth = 0, color = 0, calib = 0;
  for (const auto& e : fs::directory_iterator(ca.frames_path())) {
    const std::string n = e.path().filename().string();
    depth += n.starts_with("depth_");
    color += n.starts_with("color_");
    calib += n == "calibration.json";
  }
  CHECK(depth == 30);
  CHECK(color == 30);
  CHECK(calib == 1);
  CHECK(snapshot(ca.frames_path()) == snapshot(cb.frames_path()));
  fs::remove_all(a.parent_path());
  fs::remove_all(b);
}

TEST_CASE("fuse, reconstruct and evaluate on a short static sequence") {
  const fs::path dir = temp_dir("pipeline");
  PipelineConfig c = small_config(dir.string());
  c.noise = NoiseParams::none();
  std::ostringstream log;
  cmd_simulate(c, log);
  cmd_fuse(c, log);
  CHECK(fs::exists(c.fused_path() / mesh_name(0)));
  CHECK(fs::exists(c.fused_path() / mesh_name(1)));
  CHECK(!fs::exists(c.fused_path() / mesh_name(2)));  // N frames -> N-1 outputs
  CHECK(fs::exists(c.fused_path() / "rerender" / depth_name(2, 1)));

  // Static scene: consecutive outputs agree well below the voxel size.
  const TriangleMesh m0 = read_ply(c.fused_path() / mesh_name(0)), m1 = read_ply(c.fused_path() / mesh_name(1));
  CHECK(chamfer(m0, m1, 20000, 1) < c.fusion.voxel_size / 10);

  cmd_reconstruct(c, log);
  const TriangleMesh r0 = read_ply(c.recon_path() / mesh_name(0));
  REQUIRE(!r0.empty());
  REQUIRE(r0.has_colors());
  for (const Vec3f& col : r0.colors) CHECK((col.minCoeff() >= 0 && col.maxCoeff() <= 1));

  const nlohmann::json report = cmd_evaluate(c, log);
  REQUIRE(report.at("frames").size() == 2);
  CHECK(report.at("mean").contains("chamfer"));
  // Plumbing identity with a direct library call.
  const TriangleMesh gt = ground_truth_mesh(c.scene.build(), 0, c.gt_resolution);
  const MeshMetrics m = evaluate_mesh(r0, gt, static_cast<std::size_t>(c.eval_samples), derive_seed(c.seed, "evaluate"));
  CHECK(report.at("frames")[0].at("chamfer").get<double>() == m.chamfer);
  CHECK(read_file(c.eval_path() / "report.txt").find("mean") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("evaluate: ground truth scores ideally and empty meshes are failed frames") {
  const fs::path dir = temp_dir("evaluate");
  PipelineConfig c = small_config(dir.string());
  fs::create_directories(c.recon_path());
  write_ply(c.recon_path() / mesh_name(0), ground_truth_mesh(c.scene.build(), 0, c.gt_resolution));
  write_ply(c.recon_path() / mesh_name(1), TriangleMesh{});
  std::ostringstream log;
  const nlohmann::json r = cmd_evaluate(c, log);
  const auto& f0 = r.at("frames")[0];
  // PLY vertices are float32, so "zero" is at storage precision.
  CHECK(f0.at("p2s").get<double>() < 1e-6);
  CHECK(f0.at("chamfer").get<double>() < 1e-6);
  CHECK(f0.at("normal_consistency").get<double>() > 0.999);
  CHECK(r.at("frames")[1].at("status") == "failed");
  CHECK(r.at("mean").at("frames_failed") == 1);
  fs::remove_all(dir);
}

TEST_CASE("train-toy: zero steps store the initialization, reconstruct needs weights") {
  const fs::path dir = temp_dir("train");
  PipelineConfig c = small_config(dir.string());
  c.decoder = "network";
  std::ostringstream log;
  cmd_simulate(c, log);
  c.recon_input = "raw";
  CHECK_THROWS_AS(cmd_reconstruct(c, log), ConfigError);
  cmd_train_toy(c, log);
  ImplicitModel init(c.model, derive_seed(c.seed, "model"));
  const fs::path ref = dir / "init.bin";
  init.save(ref);
  CHECK(read_file(ref) == read_file(c.model_file()));
  cmd_reconstruct(c, log);
  CHECK(fs::exists(c.recon_path() / mesh_name(2)));
  fs::remove_all(dir);
}

TEST_CASE("fuse reports calibration mismatches") {
  const fs::path dir = temp_dir("mismatch");
  PipelineConfig c = small_config(dir.string());
  std::ostringstream log;
  cmd_simulate(c, log);
  PipelineConfig other = c;
  other.rig.width = other.rig.height = 32;
  write_calibration(c.frames_path() / "calibration.json", make_ring_rig(other.rig));
  CHECK_THROWS_AS(cmd_fuse(c, log), IoError);
  fs::remove_all(dir);
}
