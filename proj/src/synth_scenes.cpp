#include "volcap/synth_scenes.hpp"

#include "volcap/tsdf_volume.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace volcap {

Vec3 AnalyticScene::normal(int t, const Vec3& p, double h) const {
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = h;
    g[a] = sdf(t, p + e) - sdf(t, p - e);
  }
  const double n = g.norm();
  return n > 0 ? Vec3(g / n) : Vec3::UnitZ();
}

std::vector<Vec3> AnalyticScene::sample_surface_points(int t, std::size_t n, std::uint64_t seed) const {
  if (sampler_fn) return sampler_fn(t, n, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(n);
  // Rejection-free projection: random points in the bounding ball are pushed
  // onto the level set with Newton steps along the gradient.
  std::size_t attempts = 0;
  while (out.size() < n && attempts < 50 * n + 100) {
    ++attempts;
    Vec3 p(g(rng), g(rng), g(rng));
    p = bounds_center + bounds_radius * std::cbrt(u(rng)) * p.normalized();
    bool ok = false;
    for (int it = 0; it < 64; ++it) {
      const double s = sdf(t, p);
      if (std::abs(s) < 1e-7) {
        ok = true;
        break;
      }
      p -= s * normal(t, p);
    }
    if (ok) out.push_back(p);
  }
  return out;
}

int AnalyticScene::expected_components(int t) const {
  int c = events.empty() ? 1 : events.front().components_before;
  for (const TopologyEvent& e : events)
    if (t >= e.frame) c = e.components_after;
  return c;
}

namespace {

double param(const nlohmann::json& p, const char* key, double fallback) {
  return p.contains(key) ? p.at(key).get<double>() : fallback;
}

int param_int(const nlohmann::json& p, const char* key, int fallback) {
  return p.contains(key) ? p.at(key).get<int>() : fallback;
}

Vec3 param_vec(const nlohmann::json& p, const char* key, const Vec3& fallback) {
  if (!p.contains(key)) return fallback;
  const auto v = p.at(key).get<std::vector<double>>();
  if (v.size() != 3) throw ConfigError(std::string(key) + " must have 3 components");
  return Vec3(v[0], v[1], v[2]);
}

Vec3f param_color(const nlohmann::json& p, const char* key, const Vec3f& fallback) {
  const Vec3 v = param_vec(p, key, fallback.cast<double>());
  return v.cast<float>();
}

double capsule_sdf(const Vec3& p, const Vec3& a, const Vec3& b, double r) {
  const Vec3 ab = b - a;
  const double h = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - a - h * ab).norm() - r;
}

// Polynomial smooth minimum; its gradient is a convex combination of the
// input gradients, so it stays 1-Lipschitz.
double smooth_min(double a, double b, double k) {
  const double h = std::clamp(0.5 + 0.5 * (b - a) / k, 0.0, 1.0);
  return b * (1 - h) + a * h - k * h * (1 - h);
}

Vec3f pattern_color(const Vec3& p) {
  return Vec3f(static_cast<float>(0.5 + 0.35 * std::sin(5 * p.x())),
               static_cast<float>(0.5 + 0.35 * std::sin(5 * p.y() + 1)),
               static_cast<float>(0.5 + 0.35 * std::sin(5 * p.z() + 2)));
}

std::vector<Vec3> sphere_sampler(const Vec3& c, double r, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec3> out(n);
  for (Vec3& p : out) p = c + r * Vec3(g(rng), g(rng), g(rng)).normalized();
  return out;
}

AnalyticScene make_sphere(const nlohmann::json& p, bool translating) {
  AnalyticScene s;
  const double r = param(p, "radius", 0.5);
  const Vec3 c0 = param_vec(p, "center", Vec3::Zero());
  const Vec3 vel = translating ? param_vec(p, "velocity", Vec3(0.01, 0, 0)) : Vec3::Zero();
  s.name = translating ? "translating_sphere" : "static_sphere";
  s.frame_count = param_int(p, "frames", 10);
  s.bounds_center = c0 + 0.5 * (s.frame_count - 1) * vel;
  s.bounds_radius = r + 0.5 * (s.frame_count - 1) * vel.norm() + 0.05;
  s.sdf_fn = [r, c0, vel](int t, const Vec3& x) { return (x - c0 - t * vel).norm() - r; };
  s.color_fn = [c0, vel](int t, const Vec3& x) { return pattern_color(x - t * vel - c0); };
  s.sampler_fn = [r, c0, vel](int t, std::size_t n, std::uint64_t seed) {
    return sphere_sampler(c0 + t * vel, r, n, seed);
  };
  return s;
}

AnalyticScene make_wrinkled_sphere(const nlohmann::json& p) {
  AnalyticScene s;
  s.name = "wrinkled_sphere";
  const double r = param(p, "radius", 0.5);
  const double amp = param(p, "amplitude", 0.005);
  const double freq = param(p, "frequency", 20.0);
  const Vec3 c = param_vec(p, "center", Vec3::Zero());
  if (!(r > 0.2) || !(amp >= 0) || !(amp < 0.05)) throw ConfigError("wrinkled_sphere: unsupported radius/amplitude");
  s.frame_count = param_int(p, "frames", 10);
  s.bounds_center = c;
  s.bounds_radius = r + amp + 0.05;
  // The bumps fade out between rho0 and rho1 so that the field stays
  // Lipschitz near the center; lipschitz bounds the gradient of the raw field.
  const double rho0 = r - 0.15, rho1 = r - 0.05;
  const double radial = 1.0 + amp * 1.5 / (rho1 - rho0);
  const double tangential = amp * freq * std::sqrt(3.0) / rho0;
  const double lipschitz = std::hypot(radial, tangential);
  auto bump = [freq](const Vec3& d) { return std::sin(freq * d.x()) * std::sin(freq * d.y()) * std::sin(freq * d.z()); };
  s.sdf_fn = [=](int, const Vec3& x) {
    const Vec3 q = x - c;
    const double rho = q.norm();
    if (rho < rho0) return (rho - r) / lipschitz;
    const double u = std::clamp((rho - rho0) / (rho1 - rho0), 0.0, 1.0);
    const double fade = u * u * (3 - 2 * u);
    return (rho - r - amp * fade * bump(q / rho)) / lipschitz;
  };
  s.color_fn = [c](int, const Vec3& x) { return pattern_color(x - c); };
  s.sampler_fn = [=](int, std::size_t n, std::uint64_t seed) {
    auto pts = sphere_sampler(Vec3::Zero(), 1.0, n, seed);
    for (Vec3& d : pts) d = c + (r + amp * bump(d)) * d;
    return pts;
  };
  return s;
}

AnalyticScene make_bending_capsule(const nlohmann::json& p) {
  AnalyticScene s;
  s.name = "bending_capsule";
  const double r = param(p, "radius", 0.12);
  const double len = param(p, "segment_length", 0.35);
  const double step = param(p, "angle_per_frame", 0.1);  // rad
  s.frame_count = param_int(p, "frames", 6);
  s.bounds_radius = len + r + 0.05;
  auto tip = [len, step](int t) {
    const double a = step * t;
    return Vec3(-std::sin(a) * len, std::cos(a) * len, 0.0);
  };
  s.sdf_fn = [=](int t, const Vec3& x) {
    return std::min(capsule_sdf(x, Vec3(0, -len, 0), Vec3::Zero(), r), capsule_sdf(x, Vec3::Zero(), tip(t), r));
  };
  s.color_fn = [](int, const Vec3& x) { return pattern_color(x); };
  return s;
}

AnalyticScene make_splitting_blobs(const nlohmann::json& p) {
  AnalyticScene s;
  s.name = "splitting_blobs";
  const double r = param(p, "radius", 0.25);
  const double k = param(p, "blend", 0.1);
  const double c0 = param(p, "initial_offset", 0.2);  // center distance from the origin at t = 0
  const double speed = param(p, "speed", 0.05);       // offset change per frame
  s.frame_count = param_int(p, "frames", 6);
  if (!(r > 0) || !(k > 0) || !(speed > 0)) throw ConfigError("splitting_blobs: radius, blend and speed must be positive");
  const double c_max = c0 + speed * (s.frame_count - 1);
  s.bounds_radius = c_max + r + 0.05;
  s.sdf_fn = [=](int t, const Vec3& x) {
    const double c = c0 + speed * t;
    const double a = (x - Vec3(-c, 0, 0)).norm() - r;
    const double b = (x - Vec3(c, 0, 0)).norm() - r;
    return smooth_min(a, b, k);
  };
  s.color_fn = [](int, const Vec3& x) {
    return x.x() < 0 ? Vec3f(0.85f, 0.35f, 0.25f) : Vec3f(0.25f, 0.55f, 0.85f);
  };
  // The blend bridge disappears once the center distance exceeds 2r + k/2.
  for (int t = 0; t < s.frame_count; ++t) {
    if (2 * (c0 + speed * t) > 2 * r + k / 2) {
      if (t > 0) s.events.push_back({t, 1, 2});
      else s.events.push_back({0, 2, 2});
      break;
    }
  }
  return s;
}

AnalyticScene make_two_tone_sphere(const nlohmann::json& p) {
  AnalyticScene s = make_sphere(p, false);
  s.name = "two_tone_sphere";
  const Vec3 c = param_vec(p, "center", Vec3::Zero());
  const double half_width = param(p, "tone_half_width_deg", 45.0) * std::numbers::pi / 180.0;
  const Vec3f front = param_color(p, "front_color", Vec3f(0.9f, 0.3f, 0.2f));
  const Vec3f back = param_color(p, "back_color", Vec3f(0.2f, 0.4f, 0.9f));
  // Azimuth about +y measured from +z, the direction of rig view 0.
  s.color_fn = [=](int, const Vec3& x) {
    const Vec3 q = x - c;
    return std::abs(std::atan2(q.x(), q.z())) < half_width ? front : back;
  };
  return s;
}

AnalyticScene make_arm_over_body(const nlohmann::json& p) {
  AnalyticScene s;
  s.name = "arm_over_body";
  const double body_r = param(p, "body_radius", 0.3);
  const double arm_r = param(p, "arm_radius", 0.07);
  const double arm_z = param(p, "arm_depth", 0.45);   // arm axis distance in front of the body center
  const double arm_half = param(p, "arm_half_length", 0.35);
  s.frame_count = param_int(p, "frames", 3);
  if (arm_z - arm_r <= body_r) throw ConfigError("arm_over_body: arm must not touch the body");
  s.bounds_radius = std::max(body_r, std::hypot(arm_half, arm_z) + arm_r) + 0.05;
  const Vec3 a(-arm_half, 0.05, arm_z), b(arm_half, 0.05, arm_z);
  s.sdf_fn = [=](int, const Vec3& x) { return std::min(x.norm() - body_r, capsule_sdf(x, a, b, arm_r)); };
  s.color_fn = [=](int, const Vec3& x) {
    return x.norm() - body_r < capsule_sdf(x, a, b, arm_r) ? Vec3f(0.3f, 0.6f, 0.3f) : Vec3f(0.8f, 0.6f, 0.4f);
  };
  s.events.push_back({0, 2, 2});
  return s;
}

}  // namespace

std::vector<std::string> scene_names() {
  return {"static_sphere", "translating_sphere", "wrinkled_sphere", "bending_capsule",
          "splitting_blobs", "two_tone_sphere", "arm_over_body"};
}

AnalyticScene build_scene(const std::string& name, const nlohmann::json& params) {
  const nlohmann::json& p = params.is_null() ? nlohmann::json::object() : params;
  if (!p.is_object()) throw ConfigError("scene parameters must be an object");
  AnalyticScene s;
  if (name == "static_sphere") s = make_sphere(p, false);
  else if (name == "translating_sphere") s = make_sphere(p, true);
  else if (name == "wrinkled_sphere") s = make_wrinkled_sphere(p);
  else if (name == "bending_capsule") s = make_bending_capsule(p);
  else if (name == "splitting_blobs") s = make_splitting_blobs(p);
  else if (name == "two_tone_sphere") s = make_two_tone_sphere(p);
  else if (name == "arm_over_body") s = make_arm_over_body(p);
  else throw ConfigError("unknown scene '" + name + "'");
  if (s.frame_count < 1) throw ConfigError("scene needs at least one frame");
  return s;
}

std::vector<Camera> make_ring_rig(const RigParams& params) {
  if (params.views < 1) throw ConfigError("rig needs at least one view");
  if (params.width < 2 || params.height < 2) throw ConfigError("rig image size too small");
  if (!(params.half_fov_deg > 0 && params.half_fov_deg < 89)) throw ConfigError("rig field of view out of range");
  std::vector<Camera> cams;
  const double f = 0.5 * params.width / std::tan(params.half_fov_deg * std::numbers::pi / 180.0);
  const double el = params.elevation_deg * std::numbers::pi / 180.0;
  for (int i = 0; i < params.views; ++i) {
    const double az = 2.0 * std::numbers::pi * i / params.views;
    const Vec3 eye = params.target + params.radius * Vec3(std::cos(el) * std::sin(az), std::sin(el),
                                                          std::cos(el) * std::cos(az));
    Camera c;
    c.intrinsics = CameraIntrinsics{f, f, 0.5 * (params.width - 1), 0.5 * (params.height - 1), params.width,
                                    params.height};
    c.pose = CameraPose::look_at(eye, params.target);
    cams.push_back(c);
  }
  return cams;
}

std::vector<RgbdFrame> render_scene_views(const AnalyticScene& scene, int t, const std::vector<Camera>& cameras,
                                          const NoiseParams& noise, std::uint64_t seed,
                                          const RenderOptions& options) {
  std::vector<RgbdFrame> out;
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    const Camera& cam = cameras[v];
    cam.intrinsics.validate();
    cam.pose.validate();
    RgbdFrame f{DepthFrame(cam.intrinsics, cam.pose, t), ColorFrame(cam.intrinsics, cam.pose, t)};
    const Vec3 eye = cam.pose.center();
    const Mat3 rt = cam.pose.rotation.transpose();
    const CameraIntrinsics& k = cam.intrinsics;
    // Rays start where they enter the scene's bounding sphere.
    const double bound = scene.bounds_radius * 1.01;
#pragma omp parallel for schedule(dynamic, 4) num_threads(thread_count())
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        const Vec3 dc = Vec3((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0).normalized();
        const Vec3 dir = rt * dc;
        const Vec3 oc = eye - scene.bounds_center;
        const double b = oc.dot(dir), c = oc.squaredNorm() - bound * bound;
        const double disc = b * b - c;
        if (disc <= 0) continue;
        double s = std::max(0.0, -b - std::sqrt(disc));
        const double s_end = -b + std::sqrt(disc);
        for (int step = 0; step < options.max_steps && s <= s_end; ++step) {
          const Vec3 p = eye + s * dir;
          const double d = scene.sdf(t, p);
          if (std::abs(d) < options.hit_epsilon) {
            f.depth.depth(x, y) = static_cast<float>(s * dc.z());
            f.color.color(x, y) = scene.color(t, p).cwiseMax(0.0f).cwiseMin(1.0f);
            break;
          }
          s += options.safety * d;
        }
      }
    if (!noise.is_zero()) {
      f.depth = add_sensor_noise(f.depth, derive_seed(seed, "render/t" + std::to_string(t) + "/view" + std::to_string(v)),
                                 noise);
    }
    out.push_back(std::move(f));
  }
  return out;
}

TriangleMesh ground_truth_mesh(const AnalyticScene& scene, int t, int resolution) {
  if (resolution < 8) throw ConfigError("ground truth resolution must be at least 8");
  const double half = scene.bounds_radius * 1.05;
  const double spacing = 2 * half / (resolution - 1);
  TsdfVolume vol(scene.bounds_center - Vec3::Constant(half), spacing, Vec3i::Constant(resolution));
  const auto n = static_cast<std::int64_t>(vol.voxel_count());
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const double d = scene.sdf(t, vol.voxel_center(idx)) / vol.truncation();
    vol.set_voxel(idx, static_cast<float>(std::clamp(d, -1.0, 1.0)), 1.0f);
  }
  return vol.extract_mesh();
}

}  // namespace volcap
