#include "doctest.h"

#include "volcap/implicit_recon.hpp"
#include "volcap/metrics.hpp"
#include "volcap/synth_scenes.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

using namespace volcap;

namespace {

DepthFrame plane_frame(int w, int h, double depth) {
  DepthFrame f;
  f.intrinsics = CameraIntrinsics{60, 60, (w - 1) / 2.0, (h - 1) / 2.0, w, h};
  f.depth = Image<float>(w, h, static_cast<float>(depth));
  return f;
}

ImplicitConfig tiny_config() {
  ImplicitConfig c;
  c.encoder_channels = {3, 3};
  c.encoder_strides = {2, 1};
  c.color_encoder_channels = {3, 2};
  c.hidden = {6, 6, 5};
  c.aggregation_layer = 2;
  c.attention_dim = 8;
  c.attention_heads = 2;
  c.attention_layers = 1;
  c.score_hidden = 4;
  return c;
}

struct SphereViews {
  std::shared_ptr<const AnalyticScene> scene;
  std::vector<Camera> cameras;
  std::vector<DepthFrame> depths;
  std::vector<ColorFrame> colors;
};

SphereViews sphere_views(int size, int views = 3, double radius = 0.3) {
  SphereViews s;
  s.scene = std::make_shared<AnalyticScene>(build_scene("two_tone_sphere", {{"radius", radius}}));
  RigParams rig;
  rig.views = views;
  rig.width = rig.height = size;
  rig.radius = 1.5;
  s.cameras = make_ring_rig(rig);
  for (auto& f : render_scene_views(*s.scene, 0, s.cameras, NoiseParams::none(), 0)) {
    s.depths.push_back(f.depth);
    s.colors.push_back(f.color);
  }
  return s;
}

double relative_error(const nn::Mat& a, const nn::Mat& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

// Every parameter gradient against central differences (h = 1e-4).
void check_gradients(const nn::ParamList& params, const std::function<double()>& loss) {
  for (const nn::NamedParam& p : params) {
    nn::Mat numeric(p.param->value.rows(), p.param->value.cols());
    for (Eigen::Index i = 0; i < numeric.size(); ++i) {
      double& v = p.param->value.data()[i];
      const double keep = v;
      v = keep + 1e-4;
      const double up = loss();
      v = keep - 1e-4;
      const double down = loss();
      v = keep;
      numeric.data()[i] = (up - down) / 2e-4;
    }
    CAPTURE(p.name);
    CHECK(relative_error(p.param->grad, numeric) < 1e-3);
  }
}

// Biases start at zero, which puts empty tokens exactly on the activation
// kink; gradients are checked at a generic point instead.
void randomize_biases(const nn::ParamList& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (const nn::NamedParam& p : params)
    if (p.name.ends_with(".bias"))
      for (Eigen::Index i = 0; i < p.param->value.size(); ++i) p.param->value.data()[i] = u(rng);
}

std::vector<Vec3> points_near_sphere(std::size_t n, double radius, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back((radius + 0.03 * g(rng)) * Vec3(g(rng), g(rng), g(rng)).normalized());
  return out;
}

}  // namespace

TEST_CASE("truncated psdf: surface, clamp and free space") {
  const DepthFrame f = plane_frame(32, 32, 2.0);
  const Vec3 on = unproject(Vec2(10.3, 20.7), 2.0, f.intrinsics, f.pose);
  REQUIRE(truncated_psdf(on, f, 0.01).has_value());
  CHECK(std::abs(*truncated_psdf(on, f, 0.01)) < 1e-9);
  const Vec3 behind = unproject(Vec2(12, 12), 2.05, f.intrinsics, f.pose);
  CHECK(*truncated_psdf(behind, f, 0.01) == 0.01);
  CHECK(*truncated_psdf(behind, f, 0.01, false) == doctest::Approx(0.05).epsilon(1e-9));
  const Vec3 front = unproject(Vec2(5.5, 7.25), 1.996, f.intrinsics, f.pose);
  CHECK(*truncated_psdf(front, f, 0.01) == doctest::Approx(-0.004).epsilon(1e-9));
  CHECK(!truncated_psdf(Vec3(0, 0, -1), f, 0.01).has_value());
  CHECK(!truncated_psdf(Vec3(10, 0, 2), f, 0.01).has_value());
  DepthFrame holes = f;
  holes.depth = Image<float>(32, 32, 0.0f);
  CHECK(!truncated_psdf(on, holes, 0.01).has_value());
}

TEST_CASE("truncated psdf stays within the band on a rendered sphere") {
  const SphereViews s = sphere_views(64);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int i = 0; i < 2000; ++i) {
    const Vec3 q(u(rng), u(rng), u(rng));
    for (const DepthFrame& d : s.depths)
      if (const auto v = truncated_psdf(q, d, 0.01)) CHECK(std::abs(*v) <= 0.01);
  }
}

TEST_CASE("implicit config: json round trip and validation") {
  const ImplicitConfig a = ImplicitConfig::toy();
  const ImplicitConfig b = ImplicitConfig::from_json(a.to_json());
  CHECK(b.to_json() == a.to_json());
  CHECK(ImplicitConfig{}.stride() == 8);
  CHECK(ImplicitConfig{}.attention_heads == 8);
  CHECK(ImplicitConfig{}.attention_layers == 2);
  ImplicitConfig bad = a;
  bad.aggregation_layer = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = a;
  bad.attention_dim = 15;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(ImplicitConfig::from_json({{"psdf_mode", "sometimes"}}), ConfigError);
  CHECK(parse_psdf_mode("none") == PsdfMode::none);
}

TEST_CASE("encode views rejects resolutions that do not divide by the stride") {
  const ImplicitModel model(ImplicitConfig::toy(), 1);
  const std::vector<DepthFrame> ok = {plane_frame(32, 32, 2.0)};
  CHECK(model.encode_views(ok).size() == 1);
  const std::vector<DepthFrame> bad = {plane_frame(30, 32, 2.0)};
  CHECK_THROWS_AS(model.encode_views(bad), ConfigError);
}

TEST_CASE("geometry loss gradients match finite differences") {
  const SphereViews s = sphere_views(16, 2);
  for (const PsdfMode mode : {PsdfMode::truncated, PsdfMode::none}) {
    ImplicitConfig cfg = tiny_config();
    cfg.psdf_mode = mode;
    ImplicitModel model(cfg, 3);
    const std::vector<Vec3> pts = points_near_sphere(12, 0.3, 8);
    std::vector<double> targets;
    for (const Vec3& p : pts) targets.push_back(s.scene->sdf(0, p) < 0 ? 1.0 : 0.0);
    const nn::ParamList params = model.geo_params();
    randomize_biases(params, 21);
    nn::zero_grad(params);
    const double loss = model.geo_loss(s.depths, pts, targets, true);
    CHECK(loss == model.geo_loss(s.depths, pts, targets, false));
    check_gradients(params, [&] { return model.geo_loss(s.depths, pts, targets, false); });
    // The forward used for training agrees with the query path.
    const std::vector<double> occ = model.geo_occupancy(model.encode_views(s.depths), pts);
    double mse = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) mse += (occ[i] - targets[i]) * (occ[i] - targets[i]);
    CHECK(mse / static_cast<double>(pts.size()) == doctest::Approx(loss).epsilon(1e-12));
  }
}

TEST_CASE("color loss gradients match finite differences and leave geometry untouched") {
  const SphereViews s = sphere_views(16, 2);
  for (const ColorAggregation agg : {ColorAggregation::attention, ColorAggregation::mean}) {
    ImplicitConfig cfg = tiny_config();
    cfg.color_aggregation = agg;
    ImplicitModel model(cfg, 5);
    const std::vector<Vec3> pts = points_near_sphere(10, 0.3, 9);
    std::vector<Vec3f> targets;
    for (const Vec3& p : pts) targets.push_back(s.scene->color(0, p));
    randomize_biases(model.params(), 26);
    nn::zero_grad(model.params());
    model.color_loss(s.depths, s.colors, pts, targets, true);
    for (const nn::NamedParam& p : model.geo_params()) CHECK(p.param->grad.norm() == 0.0);
    check_gradients(model.color_params(), [&] { return model.color_loss(s.depths, s.colors, pts, targets, false); });
  }
}

TEST_CASE("queries are invariant to view order and duplication, and deterministic") {
  const SphereViews s = sphere_views(32, 3);
  for (const ColorAggregation agg : {ColorAggregation::attention, ColorAggregation::mean}) {
    ImplicitConfig cfg = ImplicitConfig::toy();
    cfg.color_aggregation = agg;
    const ImplicitModel model(cfg, 7);
    const std::vector<Vec3> pts = points_near_sphere(600, 0.3, 10);
    const auto views = model.encode_views(s.depths, s.colors);
    const std::vector<double> base = model.geo_occupancy(views, pts);
    const std::vector<Vec3f> base_rgb = model.color_query(views, pts);

    const std::vector<EncodedView> permuted = {views[2], views[0], views[1]};
    CHECK(model.geo_occupancy(permuted, pts) == base);
    CHECK(model.color_query(permuted, pts) == base_rgb);

    const std::vector<EncodedView> single = {views[1]};
    const std::vector<EncodedView> doubled = {views[1], views[1]};
    CHECK(model.geo_occupancy(doubled, pts) == model.geo_occupancy(single, pts));
    const auto rgb1 = model.color_query(single, pts), rgb2 = model.color_query(doubled, pts);
    double diff = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) diff = std::max(diff, static_cast<double>((rgb1[i] - rgb2[i]).norm()));
    CHECK(diff < 1e-6);

    const ImplicitModel twin(cfg, 7);
    CHECK(twin.geo_occupancy(twin.encode_views(s.depths), pts) == base);
    const int threads = thread_count();
    set_thread_count(1);
    CHECK(model.geo_occupancy(views, pts) == base);
    set_thread_count(threads);
  }
}

TEST_CASE("model weights round trip through a file") {
  const SphereViews s = sphere_views(32, 2);
  ImplicitModel model(ImplicitConfig::toy(), 9);
  const auto path = std::filesystem::temp_directory_path() / "volcap_model_roundtrip.bin";
  const auto path2 = std::filesystem::temp_directory_path() / "volcap_model_roundtrip2.bin";
  model.save(path);
  ImplicitModel loaded = ImplicitModel::load(path);
  CHECK(loaded.config().to_json() == model.config().to_json());
  loaded.save(path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  const std::vector<Vec3> pts = points_near_sphere(200, 0.3, 11);
  const auto o1 = model.geo_occupancy(model.encode_views(s.depths), pts);
  const auto o2 = loaded.geo_occupancy(loaded.encode_views(s.depths), pts);
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK(std::abs(o1[i] - o2[i]) < 1e-4);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("octree extraction equals dense extraction with an analytic decoder") {
  const SphereViews s = sphere_views(128, 3, 0.4);
  const AnalyticScene& scene = *s.scene;
  const AnalyticOccupancy stub([&scene](const Vec3& p) { return scene.sdf(0, p); });
  ExtractionParams params;  // 64^3 coarse, two levels, final 256^3
  ExtractionStats octree_stats, dense_stats;
  const TriangleMesh octree = extract_surface(stub, s.depths, params, &octree_stats);
  const TriangleMesh dense = extract_surface_dense(stub, s.depths, params, &dense_stats);
  REQUIRE(!dense.empty());
  CHECK(octree.vertices.size() == dense.vertices.size());
  CHECK(octree.triangles.size() == dense.triangles.size());
  CHECK(point_set_hausdorff(octree.vertices, dense.vertices) < 1e-6);
  CHECK(octree_stats.evaluations < 0.15 * 256.0 * 256.0 * 256.0);
  CHECK(is_watertight(octree));
  // Surface sits on the sphere up to the sigmoid-free 0.5 crossing and lattice interpolation.
  double worst = 0;
  for (const Vec3& v : octree.vertices) worst = std::max(worst, std::abs(v.norm() - 0.4));
  CHECK(worst < 0.005);
}

TEST_CASE("octree extraction: empty observations give an empty mesh cheaply") {
  std::vector<DepthFrame> frames(3, plane_frame(64, 64, 0.0));
  const AnalyticOccupancy stub([](const Vec3& p) { return p.norm() - 0.3; });
  ExtractionStats stats;
  const TriangleMesh mesh = extract_surface(stub, frames, ExtractionParams{}, &stats);
  CHECK(mesh.empty());
  CHECK(stats.evaluations < 64u * 64u * 64u);
  ExtractionParams bad;
  bad.beta = 0.7;
  CHECK_THROWS_AS(extract_surface(stub, frames, bad), ConfigError);
}

TEST_CASE("candidate filter carves free space and keeps occluded interior") {
  const SphereViews s = sphere_views(64, 3, 0.3);
  const CandidateFilter filter(s.depths, 0.02, 2);
  CHECK(filter.keep(Vec3::Zero()));                  // behind every observed surface
  CHECK(filter.keep(Vec3(0, 0, 0.29)));              // just inside the front surface
  CHECK(!filter.keep(Vec3(0, 0, 0.4)));              // in front of view 0's surface
  CHECK(!filter.keep(Vec3(0.45, 0.45, 0.0)));        // outside the silhouettes
  CHECK(!filter.keep(Vec3(0, 0, 5.0)));              // seen by no view in front of it
}

TEST_CASE("zero training steps leave the model unchanged") {
  const SphereViews s = sphere_views(32, 3);
  ImplicitModel model(ImplicitConfig::toy(), 2);
  std::vector<nn::Mat> before;
  for (const auto& p : model.params()) before.push_back(p.param->value);
  TrainConfig cfg;
  cfg.steps = 0;
  const TrainReport r = train_toy(model, {make_training_item(s.scene, 0, s.cameras)}, cfg);
  CHECK(r.steps == 0);
  const nn::ParamList after = model.params();
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i].param->value == before[i]);
  TrainConfig bad;
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("toy training is deterministic and reduces the loss") {
  const SphereViews s = sphere_views(32, 3);
  const std::vector<TrainingItem> items = {make_training_item(s.scene, 0, s.cameras)};
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch = 128;
  cfg.log_every = 20;
  cfg.train_color = true;
  ImplicitModel a(ImplicitConfig::toy(), 4), b(ImplicitConfig::toy(), 4);
  const TrainReport ra = train_toy(a, items, cfg);
  const TrainReport rb = train_toy(b, items, cfg);
  CHECK(ra.geo_loss == rb.geo_loss);
  CHECK(ra.color_loss == rb.color_loss);
  REQUIRE(ra.geo_loss.size() == 3);
  CHECK(ra.geo_loss.back() < ra.geo_loss.front());
  CHECK(ra.color_loss.back() < ra.color_loss.front());
}

TEST_CASE("labeled points carry the analytic inside test") {
  const AnalyticScene scene = build_scene("static_sphere", {{"radius", 0.3}});
  const LabeledPoints lp = sample_labeled_points(scene, 0, 500, 3);
  REQUIRE(lp.points.size() == 500);
  for (std::size_t i = 0; i < lp.points.size(); ++i)
    CHECK(lp.occupancy[i] == (lp.points[i].norm() < 0.3 ? 1.0 : 0.0));
}

// Toy overfit benchmarks on a static sphere (r 0.3 m). These train for 5k steps each.
namespace {

struct StaticSphere {
  AnalyticScene scene = build_scene("static_sphere", {{"radius", 0.3}});
  std::vector<Camera> cameras;
  std::vector<DepthFrame> depths;
};

StaticSphere static_sphere_views(int views) {
  StaticSphere s;
  RigParams rig;
  rig.views = views;
  rig.width = rig.height = 64;
  rig.radius = 1.5;
  s.cameras = make_ring_rig(rig);
  for (auto& f : render_scene_views(s.scene, 0, s.cameras, NoiseParams::none(), 0)) s.depths.push_back(f.depth);
  return s;
}

ImplicitModel overfit(const StaticSphere& s, std::uint64_t seed) {
  auto scene = std::make_shared<AnalyticScene>(s.scene);
  ImplicitModel model(ImplicitConfig::toy(), derive_seed(seed, "model"));
  TrainConfig cfg;
  cfg.steps = 5000;
  cfg.seed = derive_seed(seed, "train");
  train_toy(model, {make_training_item(scene, 0, s.cameras)}, cfg);
  return model;
}

}  // namespace

TEST_CASE("toy overfit: three views classify held-out points above 97%") {
  const StaticSphere s = static_sphere_views(3);
  const ImplicitModel model = overfit(s, 11);
  const LabeledPoints lp = sample_labeled_points(s.scene, 0, 20000, 12345);
  const auto occ = model.geo_occupancy(model.encode_views(s.depths), lp.points);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < occ.size(); ++i) correct += (occ[i] > 0.5) == (lp.occupancy[i] > 0.5);
  const double accuracy = static_cast<double>(correct) / static_cast<double>(occ.size());
  MESSAGE("held-out accuracy " << accuracy);
  CHECK(accuracy > 0.97);
}

TEST_CASE("toy overfit: single-view reconstruction within two cells of the sphere") {
  const StaticSphere s = static_sphere_views(1);
  const ImplicitModel model = overfit(s, 12);
  ExtractionParams ep;
  ep.bounds_min = Vec3::Constant(-0.4);
  ep.bounds_max = Vec3::Constant(0.4);
  ep.coarse_resolution = 32;
  ep.levels = 2;
  const double cell = 0.8 / ep.final_resolution();
  const NetworkOccupancy field(model, model.encode_views(s.depths));
  const TriangleMesh mesh = extract_surface(field, s.depths, ep);
  REQUIRE_FALSE(mesh.empty());
  const double c = chamfer(mesh, ground_truth_mesh(s.scene, 0, 256), 20000, 1);
  MESSAGE("single-view chamfer " << c << " m, cell " << cell << " m");
  CHECK(c < 2 * cell);
}
