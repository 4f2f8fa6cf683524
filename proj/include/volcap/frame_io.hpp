#pragma once

#include "volcap/sensor_io.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace volcap {

// 16-bit single channel PNG, value = depth in millimeters, 0 = invalid.
void write_depth_png(const std::filesystem::path& path, const DepthFrame& frame);
/// Image payload only; intrinsics/pose come from the calibration file.
Image<float> read_depth_png(const std::filesystem::path& path);

// Little-endian float32 grid behind an 8-byte magic and uint32 width/height.
inline constexpr char kRawDepthMagic[8] = {'V', 'C', 'D', 'E', 'P', 'T', 'H', '1'};
void write_depth_raw(const std::filesystem::path& path, const DepthFrame& frame);
Image<float> read_depth_raw(const std::filesystem::path& path);

// 8-bit RGB PNG.
void write_color_png(const std::filesystem::path& path, const ColorFrame& frame);
Image<Vec3f> read_color_png(const std::filesystem::path& path);

// One JSON document per capture: {"views": [{fx, fy, cx, cy, width, height,
// rotation: [9 floats row-major], translation: [3 floats]}, ...]}
void write_calibration(const std::filesystem::path& path, const std::vector<Camera>& cameras);
std::vector<Camera> read_calibration(const std::filesystem::path& path);

}  // namespace volcap
