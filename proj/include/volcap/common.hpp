#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace volcap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec3f = Eigen::Vector3f;
using Vec3i = Eigen::Vector3i;
using Mat3 = Eigen::Matrix3d;

/// Raised for malformed configuration, unknown scene names, shape mismatches.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a file cannot be read or written, or has the wrong layout.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Derives a per-module seed from the global seed so that streams used by
// different modules never share draws.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream);

// Worker cap for the OpenMP loops inside the library. 0 means "runtime default".
void set_thread_count(int threads);
int thread_count();

// Sequential mode forces all reductions into a fixed order.
void set_deterministic(bool on);
bool deterministic();

// Projects a near-rotation onto SO(3) (closest rotation in Frobenius norm).
Mat3 nearest_rotation(const Mat3& m);

bool is_rotation(const Mat3& r, double tol = 1e-6);

}  // namespace volcap
