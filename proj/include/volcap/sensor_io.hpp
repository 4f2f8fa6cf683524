#pragma once

#include "volcap/common.hpp"

#include <optional>
#include <vector>

namespace volcap {

/// Pinhole intrinsics. Pixel centers sit at integer coordinates, origin top-left.
struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;
  bool operator==(const CameraIntrinsics&) const = default;
};

/// Rigid world-to-camera transform: x_cam = rotation * x_world + translation.
/// Camera axes follow the usual vision convention (x right, y down, z forward).
struct CameraPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  void validate() const;

  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
  Vec3 to_world(const Vec3& cam) const { return rotation.transpose() * (cam - translation); }
  Vec3 center() const { return -rotation.transpose() * translation; }

  /// Camera at `eye` looking at `target`; `up` is the world direction that maps to -y.
  static CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitY());
};

struct Camera {
  CameraIntrinsics intrinsics;
  CameraPose pose;
};

/// Row-major image with integer pixel centers.
template <class T>
class Image {
 public:
  Image() = default;
  Image(int width, int height, const T& fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int width_ = 0, height_ = 0;
  std::vector<T> data_;
};

inline constexpr double kDefaultDepthMax = 10.0;

/// Depth in meters; 0 marks an invalid pixel.
struct DepthFrame {
  Image<float> depth;
  CameraIntrinsics intrinsics;
  CameraPose pose;
  int timestamp_index = 0;

  DepthFrame() = default;
  DepthFrame(const CameraIntrinsics& k, const CameraPose& p, int t = 0)
      : depth(k.width, k.height, 0.0f), intrinsics(k), pose(p), timestamp_index(t) {}

  bool valid(int x, int y) const { return depth.contains(x, y) && depth(x, y) > 0.0f; }
  void validate(double depth_max = kDefaultDepthMax) const;
};

/// Linear RGB in [0,1]^3.
struct ColorFrame {
  Image<Vec3f> color;
  CameraIntrinsics intrinsics;
  CameraPose pose;
  int timestamp_index = 0;

  ColorFrame() = default;
  ColorFrame(const CameraIntrinsics& k, const CameraPose& p, int t = 0)
      : color(k.width, k.height, Vec3f::Zero()), intrinsics(k), pose(p), timestamp_index(t) {}

  void validate() const;
};

struct RgbdFrame {
  DepthFrame depth;
  ColorFrame color;
};

struct Projection {
  Vec2 pixel;
  double depth = 0;  // camera-space z
};

/// Perspective projection. Returns nullopt when the point is at or behind the camera plane.
std::optional<Projection> project(const Vec3& world, const CameraIntrinsics& k, const CameraPose& pose);

/// Inverse of project. Throws std::invalid_argument for depth <= 0.
Vec3 unproject(const Vec2& pixel, double depth, const CameraIntrinsics& k, const CameraPose& pose);

/// Bilinear depth lookup. Invalid when outside the image or when any of the
/// four neighbours is a hole; valid and invalid samples are never mixed.
std::optional<double> sample_depth_bilinear(const DepthFrame& frame, const Vec2& pixel);

/// Bilinear color lookup with edge clamping.
Vec3f sample_color_bilinear(const ColorFrame& frame, const Vec2& pixel);

/// Axial noise sigma(z) = base + quadratic * z^2, plus random dropout of
/// pixels whose depth gradient to a 4-neighbour exceeds edge_threshold.
struct NoiseParams {
  double sigma_base = 0.0015;       // m
  double sigma_quadratic = 0.001;   // m per m^2
  double dropout_probability = 0.0;
  double edge_threshold = 0.05;     // m

  static NoiseParams none() { return {0.0, 0.0, 0.0, 0.05}; }
  bool is_zero() const { return sigma_base == 0.0 && sigma_quadratic == 0.0 && dropout_probability == 0.0; }
  bool operator==(const NoiseParams&) const = default;
};

DepthFrame add_sensor_noise(const DepthFrame& frame, std::uint64_t seed, const NoiseParams& params);

}  // namespace volcap
