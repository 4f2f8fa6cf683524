#include "doctest.h"

#include "volcap/metrics.hpp"
#include "volcap/synth_scenes.hpp"

#include <random>
#include <unordered_map>

using namespace volcap;

namespace {

// Flood-fill count of connected components of {sdf < 0} on an n^3 lattice
// (6-connectivity), independent of marching cubes.
int count_inside_components(const AnalyticScene& s, int t, int n) {
  const double half = s.bounds_radius * 1.05;
  const double h = 2 * half / (n - 1);
  std::vector<char> inside(static_cast<std::size_t>(n) * n * n), seen(inside.size(), 0);
  auto id = [n](int i, int j, int k) { return (static_cast<std::size_t>(k) * n + j) * n + i; };
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i)
        inside[id(i, j, k)] = s.sdf(t, s.bounds_center + Vec3(-half + i * h, -half + j * h, -half + k * h)) < 0;
  int comps = 0;
  std::vector<Vec3i> stack;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        if (!inside[id(i, j, k)] || seen[id(i, j, k)]) continue;
        ++comps;
        stack.assign(1, Vec3i(i, j, k));
        seen[id(i, j, k)] = 1;
        while (!stack.empty()) {
          const Vec3i c = stack.back();
          stack.pop_back();
          static const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& d : nb) {
            const Vec3i q = c + Vec3i(d[0], d[1], d[2]);
            if ((q.array() < 0).any() || (q.array() >= n).any()) continue;
            const std::size_t qi = id(q.x(), q.y(), q.z());
            if (inside[qi] && !seen[qi]) {
              seen[qi] = 1;
              stack.push_back(q);
            }
          }
        }
      }
  return comps;
}

}  // namespace

TEST_CASE("scene registry") {
  for (const auto& name : scene_names()) CHECK_NOTHROW(build_scene(name));
  CHECK_THROWS_AS(build_scene("teapot"), ConfigError);
  CHECK_THROWS_AS(build_scene("static_sphere", nlohmann::json::array()), ConfigError);
}

TEST_CASE("static sphere does not change over time") {
  const AnalyticScene s = build_scene("static_sphere", {{"frames", 20}});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    CHECK(s.sdf(3, p) == s.sdf(13, p));
  }
}

TEST_CASE("every scene sdf is 1-Lipschitz and has colors near the surface") {
  std::mt19937_64 rng(2);
  for (const auto& name : scene_names()) {
    const AnalyticScene s = build_scene(name);
    std::uniform_real_distribution<double> u(-s.bounds_radius, s.bounds_radius);
    std::normal_distribution<double> g(0, 0.05);
    int worst_violations = 0;
    for (int i = 0; i < 20000; ++i) {
      const Vec3 a = s.bounds_center + Vec3(u(rng), u(rng), u(rng));
      const Vec3 b = a + Vec3(g(rng), g(rng), g(rng));
      const int t = i % s.frame_count;
      if (std::abs(s.sdf(t, a) - s.sdf(t, b)) > (a - b).norm() * (1 + 1e-9)) ++worst_violations;
    }
    INFO(name);
    CHECK(worst_violations == 0);
    for (const Vec3& p : s.sample_surface_points(0, 200, 3)) {
      const Vec3f c = s.color(0, p);
      CHECK((c.array() >= 0).all());
      CHECK((c.array() <= 1).all());
    }
  }
}

TEST_CASE("surface samplers land on the level set") {
  const AnalyticScene w = build_scene("wrinkled_sphere");
  double worst = 0;
  for (const Vec3& p : w.sample_surface_points(0, 5000, 4)) worst = std::max(worst, std::abs(w.sdf(0, p)));
  CHECK(worst < 1e-3);
  const AnalyticScene c = build_scene("bending_capsule");
  const auto pts = c.sample_surface_points(3, 500, 5);
  CHECK(pts.size() == 500);
  for (const Vec3& p : pts) CHECK(std::abs(c.sdf(3, p)) < 1e-6);
}

TEST_CASE("splitting blobs: annotated event matches flood-fill component counts at 64^3") {
  const AnalyticScene s = build_scene("splitting_blobs");
  REQUIRE(s.events.size() == 1);
  const int event = s.events[0].frame;
  CHECK(event > 0);
  for (int t = 0; t < s.frame_count; ++t) {
    INFO("frame " << t);
    CHECK(count_inside_components(s, t, 64) == s.expected_components(t));
  }
  CHECK(s.expected_components(event - 1) == 1);
  CHECK(s.expected_components(event) == 2);
  const TriangleMesh after = ground_truth_mesh(s, event, 64);
  CHECK(count_components(after) == 2);
  CHECK(count_components(ground_truth_mesh(s, 0, 64)) == 1);
}

TEST_CASE("arm over body annotations") {
  const AnalyticScene s = build_scene("arm_over_body");
  CHECK(count_inside_components(s, 0, 64) == 2);
  CHECK(s.expected_components(0) == 2);
}

TEST_CASE("rendering: center pixel of a sphere at 2 m") {
  const AnalyticScene s = build_scene("static_sphere");
  Camera cam;
  cam.intrinsics = CameraIntrinsics{300, 300, 64, 64, 129, 129};
  cam.pose = CameraPose::look_at(Vec3(0, 0, 2), Vec3::Zero());
  const auto f = render_scene_views(s, 0, {cam}, NoiseParams::none(), 1);
  REQUIRE(f.size() == 1);
  CHECK(std::abs(f[0].depth.depth(64, 64) - 1.5) < 1e-4);
  CHECK(f[0].depth.depth(0, 0) == 0.0f);
}

TEST_CASE("rendering: depth agrees with the sdf zero crossing and is deterministic") {
  RigParams rig;
  rig.width = rig.height = 96;
  const auto cams = make_ring_rig(rig);
  for (const auto& name : {"wrinkled_sphere", "bending_capsule", "splitting_blobs"}) {
    const AnalyticScene s = build_scene(name);
    const auto a = render_scene_views(s, 1, cams, NoiseParams::none(), 3);
    const auto b = render_scene_views(s, 1, cams, NoiseParams::none(), 3);
    for (std::size_t v = 0; v < cams.size(); ++v) {
      CHECK(a[v].depth.depth.data() == b[v].depth.depth.data());
      std::size_t hits = 0;
      for (int y = 0; y < rig.height; y += 3)
        for (int x = 0; x < rig.width; x += 3) {
          const double d = a[v].depth.depth(x, y);
          if (d <= 0) continue;
          ++hits;
          const Vec3 p = unproject(Vec2(x, y), d, cams[v].intrinsics, cams[v].pose);
          CHECK(std::abs(s.sdf(1, p)) < 1e-4);
        }
      CHECK(hits > 50);
    }
  }
}

TEST_CASE("rendering: three-view rig covers the sphere") {
  RigParams rig;
  rig.width = rig.height = 512;
  const auto cams = make_ring_rig(rig);
  const AnalyticScene s = build_scene("static_sphere");
  const auto frames = render_scene_views(s, 0, cams, NoiseParams::none(), 0);
  // Hash the unprojected cloud into 1 cm cells; a sample is covered when any
  // cloud point in the surrounding 27 cells lies within 1 cm.
  std::unordered_map<std::int64_t, std::vector<Vec3>> grid;
  auto key = [](const Vec3i& c) {
    return (static_cast<std::int64_t>(c.x()) + 1000) * 4000000 + (c.y() + 1000) * 2000 + (c.z() + 1000);
  };
  auto cell = [](const Vec3& p) { return Vec3i((p / 0.01).array().floor().cast<int>()); };
  for (const auto& f : frames)
    for (int y = 0; y < rig.height; ++y)
      for (int x = 0; x < rig.width; ++x)
        if (f.depth.depth(x, y) > 0) {
          const Vec3 q = unproject(Vec2(x, y), f.depth.depth(x, y), f.depth.intrinsics, f.depth.pose);
          grid[key(cell(q))].push_back(q);
        }
  const auto samples = s.sample_surface_points(0, 20000, 8);
  std::size_t covered = 0;
  for (const Vec3& p : samples) {
    bool hit = false;
    const Vec3i c = cell(p);
    for (int dz = -1; dz <= 1 && !hit; ++dz)
      for (int dy = -1; dy <= 1 && !hit; ++dy)
        for (int dx = -1; dx <= 1 && !hit; ++dx) {
          const auto it = grid.find(key(c + Vec3i(dx, dy, dz)));
          if (it == grid.end()) continue;
          for (const Vec3& q : it->second)
            if ((q - p).norm() < 0.01) hit = true;
        }
    if (hit) ++covered;
  }
  // Independent visibility oracle: a sphere point is seen by a camera when it
  // faces the camera center.
  std::size_t visible = 0;
  for (const Vec3& p : samples) {
    bool seen = false;
    for (const Camera& c : cams) seen = seen || p.normalized().dot(c.pose.center() - p) > 0;
    if (seen) ++visible;
  }
  const double frac = double(covered) / double(samples.size());
  const double bound = double(visible) / double(samples.size());
  MESSAGE("coverage " << frac << " visible bound " << bound);
  CHECK(bound < 0.95);
  CHECK(frac > 0.97 * bound);
}

TEST_CASE("ground truth mesh of a sphere") {
  const AnalyticScene s = build_scene("static_sphere");
  const TriangleMesh m = ground_truth_mesh(s, 0, 128);
  const double spacing = 2 * s.bounds_radius * 1.05 / 127;
  double worst = 0;
  for (const Vec3& v : m.vertices) worst = std::max(worst, std::abs(v.norm() - 0.5));
  CHECK(worst < spacing / 4);
  CHECK(is_watertight(m));
}
