#include "doctest.h"

#include "volcap/metrics.hpp"
#include "volcap/sliding_fusion.hpp"
#include "volcap/synth_scenes.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <set>

using namespace volcap;

namespace {

struct Fixture {
  AnalyticScene scene;
  std::vector<Camera> cams;
  SlidingFusionParams params;

  explicit Fixture(const std::string& name = "static_sphere", nlohmann::json sp = {{"radius", 0.3}}) {
    scene = build_scene(name, sp);
    RigParams rig;
    rig.width = rig.height = 128;
    cams = make_ring_rig(rig);
    params.voxel_size = 0.02;
    params.volume_dims = Vec3i::Constant(48);
    params.volume_origin = Vec3::Constant(-0.47);
    params.node_radius = 0.1;
  }

  std::vector<DepthFrame> frames(int t, const NoiseParams& noise = NoiseParams::none(), std::uint64_t seed = 0) const {
    std::vector<DepthFrame> out;
    for (auto& f : render_scene_views(scene, t, cams, noise, seed)) out.push_back(std::move(f.depth));
    return out;
  }

  TsdfVolume integrated(std::span<const DepthFrame> fr) const {
    TsdfVolume v = params.make_volume();
    v.integrate(fr);
    return v;
  }

  DeformationGraph identity_graph(const TsdfVolume& vol) const {
    DeformationGraph g(sample_nodes(vol.extract_mesh().vertices, params.node_radius));
    g.attach_knn_field(vol.lattice());
    return g;
  }
};

// Independent gate oracle: brute-force KNN and a direct neighbourhood scan.
std::vector<std::size_t> gate_oracle(const TsdfVolume& obs, const DeformationGraph& g, const std::vector<double>& err,
                                     const FusionGateParams& p) {
  std::vector<std::size_t> out;
  const Vec3i n = obs.dims();
  const int r = p.neighbor_radius;
  for (std::size_t idx = 0; idx < obs.voxel_count(); ++idx) {
    const Vec3i c = obs.coords(idx);
    bool near = false;
    for (int dk = -r; dk <= r && !near; ++dk)
      for (int dj = -r; dj <= r && !near; ++dj)
        for (int di = -r; di <= r && !near; ++di) {
          const Vec3i q = c + Vec3i(di, dj, dk);
          if ((q.array() < 0).any() || (q.array() >= n.array()).any()) continue;
          const std::size_t qi = obs.index(q.x(), q.y(), q.z());
          near = obs.weight(qi) > 0 && std::abs(obs.tsdf(qi)) < 1;
        }
    if (!near) continue;
    const NodeNeighbors nb = g.knn_brute_force(obs.voxel_center(idx));
    double e = 0;
    for (int s = 0; s < nb.count; ++s) {
      const GraphNode& node = g.node(static_cast<std::size_t>(nb.index[static_cast<std::size_t>(s)]));
      e += blend_weight(obs.voxel_center(idx), node) * err[static_cast<std::size_t>(nb.index[static_cast<std::size_t>(s)])];
    }
    if (e < p.delta_e) out.push_back(idx);
  }
  return out;
}

Correspondence make_corr(int vi, int view, const Vec3& v, const Vec3& p, const Vec3& pn, const DeformationGraph& g) {
  Correspondence c;
  c.vertex_index = vi;
  c.view_index = view;
  c.v = v;
  c.p = p;
  c.pn = pn;
  c.neighbors = g.knn(v);
  return c;
}

}  // namespace

TEST_CASE("node tracking error: hand-computed values and permutation invariance") {
  GraphNode a, b;
  a.position = Vec3(0, 0, 0);
  b.position = Vec3(0.1, 0, 0);
  a.radius = b.radius = 0.05;
  const DeformationGraph g({a, b});

  const Vec3 z(0, 0, 1);
  std::vector<Correspondence> cs = {
      make_corr(0, 0, Vec3(0.01, 0, 0), Vec3(0.01, 0, 0.002), z, g),
      make_corr(1, 0, Vec3(0.09, 0, 0), Vec3(0.09, 0, -0.003), z, g),
      make_corr(1, 1, Vec3(0.09, 0, 0), Vec3(0.09, 0, 0.001), z, g),
  };
  const double eps = 1e-6;
  const auto e = node_tracking_error(cs, g, eps);
  REQUIRE(e.size() == 2);

  // Identity graph: residual is the squared offset along z.
  const double r[3] = {4e-6, 9e-6, 1e-6};
  double num[2] = {0, 0}, den[2] = {0, 0};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      num[j] += r[i];
      den[j] += blend_weight(cs[static_cast<std::size_t>(i)].v, g.node(static_cast<std::size_t>(j)));
    }
  for (int j = 0; j < 2; ++j) CHECK(e[static_cast<std::size_t>(j)] == doctest::Approx(num[j] / (den[j] + eps)).epsilon(1e-12));

  std::mt19937 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(cs.begin(), cs.end(), rng);
    CHECK(node_tracking_error(cs, g, eps) == e);
  }

  // A far node still collects the residuals of vertices that list it as a neighbour.
  GraphNode far;
  far.position = Vec3(5, 0, 0);
  const DeformationGraph g3({a, b, far});
  for (auto& c : cs) c.neighbors = g3.knn(c.v);
  CHECK(node_tracking_error(cs, g3, eps)[2] == doctest::Approx(14e-6 / (1e-300 + eps)).epsilon(1e-9));
}

TEST_CASE("voxel tracking error: weighted sum over the nearest nodes") {
  std::vector<GraphNode> nodes;
  for (int i = 0; i < 6; ++i) {
    GraphNode n;
    n.position = Vec3(0.03 * i, 0.01 * (i % 2), 0);
    nodes.push_back(n);
  }
  const DeformationGraph g(nodes);
  const std::vector<double> err = {1, 2, 3, 4, 5, 6};
  const Vec3 x(0.05, 0.02, 0.01);
  // Oracle: sort all nodes by distance and take the first four.
  std::vector<int> order = {0, 1, 2, 3, 4, 5};
  std::sort(order.begin(), order.end(), [&](int p, int q) {
    return (nodes[static_cast<std::size_t>(p)].position - x).squaredNorm() <
           (nodes[static_cast<std::size_t>(q)].position - x).squaredNorm();
  });
  double e = 0, ws = 0;
  for (int s = 0; s < 4; ++s) {
    const double w = blend_weight(x, nodes[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])]);
    e += w * err[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
    ws += w;
  }
  CHECK(voxel_tracking_error(x, g, err) == doctest::Approx(e).epsilon(1e-12));
  CHECK(voxel_tracking_error(x, g, err, true) == doctest::Approx(e / ws).epsilon(1e-12));
}

TEST_CASE("dilated band mask matches a direct neighbourhood scan") {
  TsdfVolume v(Vec3::Zero(), 0.1, Vec3i(12, 10, 9));
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(0, 1);
  for (std::size_t i = 0; i < v.voxel_count(); ++i) {
    const float x = u(rng);
    if (x < 0.03f) v.set_voxel(i, 0.5f, 1.0f);
    else if (x < 0.06f) v.set_voxel(i, 0.5f, 0.0f);  // unobserved, not band
    else v.set_voxel(i, 1.0f, 1.0f);
  }
  for (int r : {0, 1, 2, 3}) {
    const auto mask = dilated_band_mask(v, r);
    std::size_t mismatches = 0;
    for (std::size_t idx = 0; idx < v.voxel_count(); ++idx) {
      const Vec3i c = v.coords(idx);
      bool near = false;
      for (std::size_t q = 0; q < v.voxel_count() && !near; ++q)
        near = v.in_band(q) && (v.coords(q) - c).cwiseAbs().maxCoeff() <= r;
      mismatches += (mask[idx] != 0) != near;
    }
    CHECK_MESSAGE(mismatches == 0, "radius " << r);
  }
}

TEST_CASE("observation-consistent fusion: write set equals the gate oracle and nothing else changes") {
  Fixture fx;
  const auto f0 = fx.frames(0);
  const TsdfVolume obs = fx.integrated(f0);
  const DeformationGraph g = fx.identity_graph(obs);
  // Synthetic node errors spanning the gate threshold.
  std::vector<double> err(g.size());
  for (std::size_t j = 0; j < err.size(); ++j) err[j] = 0.05 * static_cast<double>(j % 5);
  FusionGateParams gp;
  gp.delta_e = 0.1;

  const auto f1 = fx.frames(1, NoiseParams{0.003, 0, 0, 0.05}, 11);
  TsdfVolume vol = obs;
  const FusionReport rep = fuse_observation_consistent(vol, obs, g, err, f1, gp);
  const auto oracle = gate_oracle(obs, g, err, gp);
  CHECK(rep.write_set == oracle);
  CHECK(!oracle.empty());
  CHECK(rep.updated > 0);
  CHECK(rep.updated <= rep.write_set.size());

  const std::set<std::size_t> ws(rep.write_set.begin(), rep.write_set.end());
  std::size_t outside_changed = 0;
  for (std::size_t i = 0; i < vol.voxel_count(); ++i)
    if (!ws.count(i) && (vol.tsdf(i) != obs.tsdf(i) || vol.weight(i) != obs.weight(i))) ++outside_changed;
  CHECK(outside_changed == 0);
}

TEST_CASE("observation-consistent fusion: gate extremes and monotonicity") {
  Fixture fx;
  const auto f0 = fx.frames(0);
  const TsdfVolume obs = fx.integrated(f0);
  const DeformationGraph g = fx.identity_graph(obs);
  std::vector<double> err(g.size());
  for (std::size_t j = 0; j < err.size(); ++j) err[j] = 0.01 * static_cast<double>(j % 7);

  SUBCASE("delta_e = 0 writes nothing") {
    FusionGateParams gp;
    gp.delta_e = 0;
    TsdfVolume vol = obs;
    const auto rep = fuse_observation_consistent(vol, obs, g, err, f0, gp);
    CHECK(rep.write_set.empty());
    CHECK(vol.tsdf_values() == obs.tsdf_values());
    CHECK(vol.weight_values() == obs.weight_values());
  }

  SUBCASE("write set grows with delta_e") {
    std::vector<std::size_t> previous;
    for (double d : {0.0, 0.005, 0.02, 0.05, 0.2, std::numeric_limits<double>::infinity()}) {
      FusionGateParams gp;
      gp.delta_e = d;
      TsdfVolume vol = obs;
      const auto rep = fuse_observation_consistent(vol, obs, g, err, f0, gp);
      CHECK(std::includes(rep.write_set.begin(), rep.write_set.end(), previous.begin(), previous.end()));
      CHECK(rep.write_set.size() >= previous.size());
      previous = rep.write_set;
    }
  }

  SUBCASE("infinite threshold with identity warp equals plain integration on a static scene") {
    FusionGateParams gp;
    gp.delta_e = std::numeric_limits<double>::infinity();
    const std::vector<double> zero(g.size(), 0.0);
    TsdfVolume gated = obs;
    const auto rep = fuse_observation_consistent(gated, obs, g, err, f0, gp);
    TsdfVolume plain = obs;
    plain.integrate(f0);
    double max_tsdf = 0, max_weight_in_gate = 0;
    for (std::size_t i = 0; i < plain.voxel_count(); ++i)
      max_tsdf = std::max(max_tsdf, static_cast<double>(std::abs(gated.tsdf(i) - plain.tsdf(i))));
    for (std::size_t i : rep.write_set)
      max_weight_in_gate = std::max(max_weight_in_gate, static_cast<double>(std::abs(gated.weight(i) - plain.weight(i))));
    CHECK(max_tsdf < 1e-6);
    CHECK(max_weight_in_gate < 1e-6);
  }
}

TEST_CASE("window step: zero threshold leaves the single-frame observation") {
  Fixture fx;
  fx.params.gate.delta_e = 0;
  const auto f0 = fx.frames(0), f1 = fx.frames(1), f2 = fx.frames(2);
  const SlidingWindowState s0 = step_window(nullptr, {}, f0, f1, fx.params);
  CHECK(s0.volume.tsdf_values() == s0.observation.tsdf_values());
  const SlidingWindowState s1 = step_window(&s0, f0, f1, f2, fx.params);
  CHECK(s1.volume.tsdf_values() == s1.observation.tsdf_values());
  CHECK(s1.volume.weight_values() == s1.observation.weight_values());
}

TEST_CASE("window step: static scene matches single-frame integration") {
  Fixture fx;
  const auto f0 = fx.frames(0), f1 = fx.frames(1), f2 = fx.frames(2);
  WindowStepReport r0, r1;
  const SlidingWindowState s0 = step_window(nullptr, {}, f0, f1, fx.params, &r0);
  const SlidingWindowState s1 = step_window(&s0, f0, f1, f2, fx.params, &r1);
  CHECK(r1.fused_previous.write_set.size() > 0);
  CHECK(r1.fused_next.write_set.size() > 0);
  CHECK(r1.init.deleted_far + r1.init.deleted_unobserved == 0);
  const TriangleMesh single = fx.integrated(f1).extract_mesh();
  const double cd = chamfer(s1.mesh, single, 20000, 1);
  MESSAGE("static window chamfer vs single frame " << cd);
  CHECK(cd < fx.params.voxel_size / 10);
}

TEST_CASE("sliding driver: one-frame latency and independence from later frames") {
  Fixture fx("translating_sphere", {{"radius", 0.3}});
  fx.params.tracking.max_gn_iters = 3;
  std::vector<std::vector<DepthFrame>> seq;
  for (int t = 0; t < 4; ++t) seq.push_back(fx.frames(t));

  SlidingFusion driver(fx.params);
  std::vector<SlidingWindowState> outputs;
  for (const auto& f : seq)
    if (auto s = driver.push(f)) outputs.push_back(std::move(*s));
  REQUIRE(outputs.size() == seq.size() - 1);
  for (std::size_t t = 0; t < outputs.size(); ++t) CHECK(outputs[t].frame_index == static_cast<int>(t));

  // Replacing frame 3 must not change the output for frame 1.
  auto altered = seq;
  altered[3] = Fixture("static_sphere", {{"radius", 0.2}}).frames(0);
  SlidingFusion driver2(fx.params);
  std::vector<SlidingWindowState> outputs2;
  for (const auto& f : altered)
    if (auto s = driver2.push(f)) outputs2.push_back(std::move(*s));
  REQUIRE(outputs2.size() == 3);
  CHECK(outputs2[1].volume.tsdf_values() == outputs[1].volume.tsdf_values());
  CHECK(outputs2[1].volume.weight_values() == outputs[1].volume.weight_values());
  CHECK(outputs2[2].volume.tsdf_values() != outputs[2].volume.tsdf_values());
}

TEST_CASE("gate parameters are validated") {
  FusionGateParams p;
  p.delta_e = -1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.neighbor_radius = -1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  SlidingFusionParams sp;
  sp.delta_t = 0;
  CHECK_THROWS_AS(sp.validate(), ConfigError);
}
