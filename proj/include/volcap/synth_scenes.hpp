#pragma once

#include "volcap/mesh.hpp"
#include "volcap/sensor_io.hpp"

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

namespace volcap {

/// Frame index at which the number of connected components of {sdf < 0} changes.
struct TopologyEvent {
  int frame = 0;
  int components_before = 1;
  int components_after = 1;
};

/// Time-varying shape with an analytic signed distance field (positive
/// outside) and a surface color field. Time is the integer frame index.
struct AnalyticScene {
  using SdfFn = std::function<double(int t, const Vec3& p)>;
  using ColorFn = std::function<Vec3f(int t, const Vec3& p)>;
  using SamplerFn = std::function<std::vector<Vec3>(int t, std::size_t n, std::uint64_t seed)>;

  std::string name;
  int frame_count = 1;
  Vec3 bounds_center = Vec3::Zero();
  double bounds_radius = 1.0;  // every surface point of every frame lies inside this sphere
  std::vector<TopologyEvent> events;

  SdfFn sdf_fn;
  ColorFn color_fn;
  SamplerFn sampler_fn;  // optional exact surface sampler

  double sdf(int t, const Vec3& p) const { return sdf_fn(t, p); }
  Vec3f color(int t, const Vec3& p) const { return color_fn(t, p); }
  /// Unit outward normal from the central-difference sdf gradient.
  Vec3 normal(int t, const Vec3& p, double h = 1e-5) const;

  /// Points on the zero level set. Uses the scene's own sampler when present,
  /// otherwise projects random points onto the surface along the sdf gradient.
  std::vector<Vec3> sample_surface_points(int t, std::size_t n, std::uint64_t seed) const;

  /// Number of connected components expected at frame t from the annotations.
  int expected_components(int t) const;
};

/// Names accepted by build_scene.
std::vector<std::string> scene_names();

/// Builds a registered generator. `params` may override any documented
/// parameter; unknown names raise ConfigError.
AnalyticScene build_scene(const std::string& name, const nlohmann::json& params = nlohmann::json::object());

struct RigParams {
  int views = 3;
  int width = 512;
  int height = 512;
  double radius = 2.0;         // m, ring radius around the target
  double half_fov_deg = 20.0;  // horizontal half field of view
  double elevation_deg = 0.0;
  Vec3 target = Vec3::Zero();
};

/// Cameras on a horizontal ring at equal azimuth spacing, all looking at the
/// target. View 0 sits on the +z axis.
std::vector<Camera> make_ring_rig(const RigParams& params);

struct RenderOptions {
  double safety = 0.9;
  int max_steps = 256;
  double hit_epsilon = 1e-5;
};

/// Sphere-traced depth + color for every camera at frame t, then sensor noise
/// (per-view streams derived from `seed`).
std::vector<RgbdFrame> render_scene_views(const AnalyticScene& scene, int t, const std::vector<Camera>& cameras,
                                          const NoiseParams& noise, std::uint64_t seed,
                                          const RenderOptions& options = {});

/// Marching cubes over exact sdf samples on a `resolution`^3 lattice covering
/// the scene bounds.
TriangleMesh ground_truth_mesh(const AnalyticScene& scene, int t, int resolution);

}  // namespace volcap
