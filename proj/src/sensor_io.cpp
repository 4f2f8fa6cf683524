#include "volcap/sensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace volcap {

void CameraIntrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ConfigError("camera image size must be positive");
  if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
    throw ConfigError("principal point outside the image");
}

void CameraPose::validate() const {
  if (!is_rotation(rotation)) throw ConfigError("camera rotation is not orthonormal with det +1");
  if (!translation.allFinite()) throw ConfigError("camera translation is not finite");
}

CameraPose CameraPose::look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(-up);
  if (x.norm() < 1e-9) x = z.unitOrthogonal();
  x.normalize();
  const Vec3 y = z.cross(x);
  CameraPose pose;
  pose.rotation.row(0) = x.transpose();
  pose.rotation.row(1) = y.transpose();
  pose.rotation.row(2) = z.transpose();
  pose.translation = -pose.rotation * eye;
  return pose;
}

void DepthFrame::validate(double depth_max) const {
  intrinsics.validate();
  pose.validate();
  if (depth.width() != intrinsics.width || depth.height() != intrinsics.height)
    throw ConfigError("depth image size does not match intrinsics");
  for (float d : depth.data())
    if (!(d == 0.0f || (d > 0.0f && d <= depth_max))) throw ConfigError("depth value out of range");
}

void ColorFrame::validate() const {
  intrinsics.validate();
  pose.validate();
  if (color.width() != intrinsics.width || color.height() != intrinsics.height)
    throw ConfigError("color image size does not match intrinsics");
  for (const Vec3f& c : color.data())
    if (!(c.minCoeff() >= 0.0f && c.maxCoeff() <= 1.0f)) throw ConfigError("color channel outside [0,1]");
}

std::optional<Projection> project(const Vec3& world, const CameraIntrinsics& k, const CameraPose& pose) {
  const Vec3 c = pose.to_camera(world);
  if (!(c.z() > 0.0)) return std::nullopt;
  return Projection{Vec2(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy), c.z()};
}

Vec3 unproject(const Vec2& pixel, double depth, const CameraIntrinsics& k, const CameraPose& pose) {
  if (!(depth > 0.0)) throw std::invalid_argument("unproject: depth must be positive");
  const Vec3 c((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
  return pose.to_world(c);
}

std::optional<double> sample_depth_bilinear(const DepthFrame& frame, const Vec2& pixel) {
  const auto& img = frame.depth;
  const double u = pixel.x(), v = pixel.y();
  if (!(u >= 0.0 && v >= 0.0 && u <= img.width() - 1 && v <= img.height() - 1)) return std::nullopt;
  const int x0 = std::min(static_cast<int>(u), img.width() - 1);
  const int y0 = std::min(static_cast<int>(v), img.height() - 1);
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double ax = u - x0, ay = v - y0;
  const double d00 = img(x0, y0), d10 = img(x1, y0), d01 = img(x0, y1), d11 = img(x1, y1);
  if (d00 <= 0.0 || d10 <= 0.0 || d01 <= 0.0 || d11 <= 0.0) return std::nullopt;
  return (1 - ay) * ((1 - ax) * d00 + ax * d10) + ay * ((1 - ax) * d01 + ax * d11);
}

Vec3f sample_color_bilinear(const ColorFrame& frame, const Vec2& pixel) {
  const auto& img = frame.color;
  const double u = std::clamp(pixel.x(), 0.0, static_cast<double>(img.width() - 1));
  const double v = std::clamp(pixel.y(), 0.0, static_cast<double>(img.height() - 1));
  const int x0 = std::min(static_cast<int>(u), img.width() - 1);
  const int y0 = std::min(static_cast<int>(v), img.height() - 1);
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const float ax = static_cast<float>(u - x0), ay = static_cast<float>(v - y0);
  return (1 - ay) * ((1 - ax) * img(x0, y0) + ax * img(x1, y0)) +
         ay * ((1 - ax) * img(x0, y1) + ax * img(x1, y1));
}

DepthFrame add_sensor_noise(const DepthFrame& frame, std::uint64_t seed, const NoiseParams& params) {
  DepthFrame out = frame;
  if (params.is_zero()) return out;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  const auto& src = frame.depth;
  auto& dst = out.depth;
  for (int y = 0; y < src.height(); ++y) {
    for (int x = 0; x < src.width(); ++x) {
      const double z = src(x, y);
      // Draw unconditionally so the stream layout does not depend on the image content.
      const double n = gauss(rng);
      const double u = uniform(rng);
      if (z <= 0.0) continue;

      bool edge = false;
      constexpr int dx[4] = {1, -1, 0, 0};
      constexpr int dy[4] = {0, 0, 1, -1};
      for (int k = 0; k < 4 && !edge; ++k) {
        const int nx = x + dx[k], ny = y + dy[k];
        if (!src.contains(nx, ny)) continue;
        const double zn = src(nx, ny);
        edge = zn <= 0.0 || std::abs(zn - z) > params.edge_threshold;
      }
      if (edge && u < params.dropout_probability) {
        dst(x, y) = 0.0f;
        continue;
      }
      const double sigma = params.sigma_base + params.sigma_quadratic * z * z;
      dst(x, y) = static_cast<float>(std::max(z + sigma * n, 1e-4));
    }
  }
  return out;
}

}  // namespace volcap
