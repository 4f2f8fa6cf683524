#pragma once

#include "volcap/mesh.hpp"
#include "volcap/sensor_io.hpp"

#include <cstdint>
#include <optional>
#include <span>

namespace volcap {

inline const Vec3f kUncoloredSentinel(0.5f, 0.5f, 0.5f);

struct RasterOptions {
  bool cull_backfaces = true;
  double near_plane = 1e-3;  // triangles reaching closer than this are skipped
  /// Replaces the calibration intrinsics for the render when set.
  std::optional<CameraIntrinsics> intrinsics_override;
};

/// Re-rendered view. mask(x,y) is 1 exactly where depth is valid.
struct RenderTarget {
  DepthFrame depth;
  ColorFrame color;
  Image<std::uint8_t> mask;
  Image<int> triangle;       // -1 where nothing was hit
  bool missing_colors = false;  // mesh had no vertex colors; color holds the sentinel gray
};

/// Z-buffer rasterization with perspective-correct depth and attributes.
/// Pixel centers sit at integer coordinates. Equal depths resolve to the lower
/// triangle index.
RenderTarget render_view(const TriangleMesh& mesh, const CameraIntrinsics& intrinsics, const CameraPose& pose,
                         const RasterOptions& options = {});

RenderTarget render_depth(const TriangleMesh& mesh, const CameraIntrinsics& intrinsics, const CameraPose& pose,
                          const RasterOptions& options = {});

ColorFrame render_color(const TriangleMesh& mesh, const CameraIntrinsics& intrinsics, const CameraPose& pose,
                        const RasterOptions& options = {}, bool* missing_colors = nullptr);

/// Brute-force ray cast through one pixel: camera-space depth of the nearest
/// front-facing hit (any hit when culling is off).
std::optional<double> raycast_pixel(const TriangleMesh& mesh, const CameraIntrinsics& intrinsics, const CameraPose& pose,
                                    const Vec2& pixel, bool cull_backfaces = true, int* hit_triangle = nullptr);

struct ColorProjectionStats {
  std::size_t colored = 0;
  std::size_t uncolored = 0;
};

/// Vertex colors as the weighted average of the vertex's projections into the
/// views where it passes the depth test |z - sampled depth| < depth_tolerance.
/// Weights are max(0, n . (camera - v) / |camera - v|). Vertices seen by no
/// view get kUncoloredSentinel.
ColorProjectionStats project_colors_to_mesh(TriangleMesh& mesh, std::span<const ColorFrame> colors,
                                            std::span<const DepthFrame> depths, double depth_tolerance = 0.01);

/// Re-renders the mesh into every camera (depth and color).
std::vector<RgbdFrame> rerender_views(const TriangleMesh& mesh, std::span<const Camera> cameras,
                                      const RasterOptions& options = {});

}  // namespace volcap
