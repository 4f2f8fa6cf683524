#include "volcap/rerender.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace volcap {

namespace {

constexpr int kStripeRows = 16;

struct ScreenTriangle {
  int id = 0;
  Vec2 p[3];
  double inv_z[3] = {0, 0, 0};
  int y0 = 0, y1 = -1, x0 = 0, x1 = -1;  // inclusive pixel bounds
  double area = 0;                        // signed, twice the screen area
};

double edge(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

std::optional<ScreenTriangle> setup(const TriangleMesh& mesh, int t, const CameraIntrinsics& k, const CameraPose& pose,
                                    const RasterOptions& opt) {
  const Vec3i& tri = mesh.triangles[static_cast<std::size_t>(t)];
  Vec3 c[3];
  for (int s = 0; s < 3; ++s) {
    c[s] = pose.to_camera(mesh.vertices[static_cast<std::size_t>(tri[s])]);
    if (!(c[s].z() > opt.near_plane)) return std::nullopt;
  }
  if (opt.cull_backfaces && (c[1] - c[0]).cross(c[2] - c[0]).dot(c[0]) >= 0) return std::nullopt;
  ScreenTriangle st;
  st.id = t;
  for (int s = 0; s < 3; ++s) {
    st.p[s] = Vec2(k.fx * c[s].x() / c[s].z() + k.cx, k.fy * c[s].y() / c[s].z() + k.cy);
    st.inv_z[s] = 1.0 / c[s].z();
  }
  st.area = edge(st.p[0], st.p[1], st.p[2]);
  if (st.area == 0 || !std::isfinite(st.area)) return std::nullopt;
  const double minx = std::min({st.p[0].x(), st.p[1].x(), st.p[2].x()});
  const double maxx = std::max({st.p[0].x(), st.p[1].x(), st.p[2].x()});
  const double miny = std::min({st.p[0].y(), st.p[1].y(), st.p[2].y()});
  const double maxy = std::max({st.p[0].y(), st.p[1].y(), st.p[2].y()});
  st.x0 = std::max(0, static_cast<int>(std::ceil(minx)));
  st.x1 = std::min(k.width - 1, static_cast<int>(std::floor(maxx)));
  st.y0 = std::max(0, static_cast<int>(std::ceil(miny)));
  st.y1 = std::min(k.height - 1, static_cast<int>(std::floor(maxy)));
  if (st.x0 > st.x1 || st.y0 > st.y1) return std::nullopt;
  return st;
}

}  // namespace

RenderTarget render_view(const TriangleMesh& mesh, const CameraIntrinsics& intrinsics, const CameraPose& pose,
                         const RasterOptions& options) {
  const CameraIntrinsics k = options.intrinsics_override.value_or(intrinsics);
  k.validate();
  pose.validate();
  RenderTarget out;
  out.depth = DepthFrame(k, pose);
  out.color = ColorFrame(k, pose);
  out.mask = Image<std::uint8_t>(k.width, k.height, 0);
  out.triangle = Image<int>(k.width, k.height, -1);
  const bool colored = mesh.has_colors();
  out.missing_colors = !colored;
  if (mesh.empty()) return out;

  const int ntri = static_cast<int>(mesh.triangles.size());
  std::vector<std::optional<ScreenTriangle>> screen(static_cast<std::size_t>(ntri));
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (int t = 0; t < ntri; ++t) screen[static_cast<std::size_t>(t)] = setup(mesh, t, k, pose, options);

  // Bin by horizontal stripes; each stripe keeps triangles in index order.
  const int stripes = (k.height + kStripeRows - 1) / kStripeRows;
  std::vector<std::vector<int>> bins(static_cast<std::size_t>(stripes));
  for (int t = 0; t < ntri; ++t)
    if (const auto& st = screen[static_cast<std::size_t>(t)])
      for (int s = st->y0 / kStripeRows; s <= st->y1 / kStripeRows; ++s) bins[static_cast<std::size_t>(s)].push_back(t);

  Image<double> zbuf(k.width, k.height, std::numeric_limits<double>::infinity());
  Image<Vec3> bary(k.width, k.height, Vec3::Zero());
#pragma omp parallel for schedule(dynamic, 1) num_threads(thread_count())
  for (int s = 0; s < stripes; ++s) {
    const int row0 = s * kStripeRows, row1 = std::min(k.height - 1, row0 + kStripeRows - 1);
    for (int t : bins[static_cast<std::size_t>(s)]) {
      const ScreenTriangle& st = *screen[static_cast<std::size_t>(t)];
      // Inclusive edges with a small tolerance so shared edges leave no cracks.
      for (int y = std::max(row0, st.y0); y <= std::min(row1, st.y1); ++y)
        for (int x = st.x0; x <= st.x1; ++x) {
          const Vec2 p(x, y);
          Vec3 l(edge(st.p[1], st.p[2], p), edge(st.p[2], st.p[0], p), edge(st.p[0], st.p[1], p));
          l /= st.area;
          if (l.minCoeff() < -1e-9) continue;
          const double iz = l[0] * st.inv_z[0] + l[1] * st.inv_z[1] + l[2] * st.inv_z[2];
          if (!(iz > 0)) continue;
          const double z = 1.0 / iz;
          if (z < zbuf(x, y)) {
            zbuf(x, y) = z;
            out.triangle(x, y) = t;
            // Perspective-correct barycentrics.
            bary(x, y) = Vec3(l[0] * st.inv_z[0], l[1] * st.inv_z[1], l[2] * st.inv_z[2]) / iz;
          }
        }
    }
  }

  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const int t = out.triangle(x, y);
      if (t < 0) continue;
      out.depth.depth(x, y) = static_cast<float>(zbuf(x, y));
      out.mask(x, y) = 1;
      if (!colored) {
        out.color.color(x, y) = kUncoloredSentinel;
        continue;
      }
      const Vec3i& tri = mesh.triangles[static_cast<std::size_t>(t)];
      const Vec3& b = bary(x, y);
      Vec3 c = Vec3::Zero();
      for (int q = 0; q < 3; ++q) c += b[q] * mesh.colors[static_cast<std::size_t>(tri[q])].cast<double>();
      out.color.color(x, y) = c.cast<float>();
    }
  return out;
}

RenderTarget render_depth(const TriangleMesh& mesh, const CameraIntrinsics& intrinsics, const CameraPose& pose,
                          const RasterOptions& options) {
  return render_view(mesh, intrinsics, pose, options);
}

ColorFrame render_color(const TriangleMesh& mesh, const CameraIntrinsics& intrinsics, const CameraPose& pose,
                        const RasterOptions& options, bool* missing_colors) {
  RenderTarget r = render_view(mesh, intrinsics, pose, options);
  if (missing_colors) *missing_colors = r.missing_colors;
  return std::move(r.color);
}

std::optional<double> raycast_pixel(const TriangleMesh& mesh, const CameraIntrinsics& k, const CameraPose& pose,
                                    const Vec2& pixel, bool cull_backfaces, int* hit_triangle) {
  // Camera-space ray (u, v, 1); the hit parameter is the depth itself.
  const Vec3 d((pixel.x() - k.cx) / k.fx, (pixel.y() - k.cy) / k.fy, 1.0);
  std::optional<double> best;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const Vec3i& tri = mesh.triangles[t];
    const Vec3 a = pose.to_camera(mesh.vertices[static_cast<std::size_t>(tri[0])]);
    const Vec3 b = pose.to_camera(mesh.vertices[static_cast<std::size_t>(tri[1])]);
    const Vec3 c = pose.to_camera(mesh.vertices[static_cast<std::size_t>(tri[2])]);
    const Vec3 e1 = b - a, e2 = c - a;
    if (cull_backfaces && e1.cross(e2).dot(a) >= 0) continue;
    // Moller-Trumbore.
    const Vec3 h = d.cross(e2);
    const double det = e1.dot(h);
    if (std::abs(det) < 1e-18) continue;
    const double inv = 1.0 / det;
    const Vec3 s = -a;
    const double u = inv * s.dot(h);
    if (u < 0 || u > 1) continue;
    const Vec3 q = s.cross(e1);
    const double v = inv * d.dot(q);
    if (v < 0 || u + v > 1) continue;
    const double z = inv * e2.dot(q);
    if (z > 0 && (!best || z < *best)) {
      best = z;
      if (hit_triangle) *hit_triangle = static_cast<int>(t);
    }
  }
  return best;
}

ColorProjectionStats project_colors_to_mesh(TriangleMesh& mesh, std::span<const ColorFrame> colors,
                                            std::span<const DepthFrame> depths, double depth_tolerance) {
  if (colors.size() != depths.size()) throw ConfigError("color and depth view counts differ");
  if (!(depth_tolerance > 0)) throw ConfigError("depth tolerance must be positive");
  if (!mesh.has_normals()) compute_vertex_normals(mesh);
  const std::size_t nv = mesh.vertices.size();
  mesh.colors.assign(nv, kUncoloredSentinel);
  std::vector<char> hit(nv, 0);

#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t iv = 0; iv < static_cast<std::int64_t>(nv); ++iv) {
    const auto i = static_cast<std::size_t>(iv);
    const Vec3& v = mesh.vertices[i];
    Vec3 acc = Vec3::Zero();
    double wsum = 0;
    for (std::size_t view = 0; view < colors.size(); ++view) {
      const DepthFrame& df = depths[view];
      const auto p = project(v, df.intrinsics, df.pose);
      if (!p) continue;
      const auto d = sample_depth_bilinear(df, p->pixel);
      if (!d || std::abs(*d - p->depth) >= depth_tolerance) continue;
      const Vec3 to_cam = (df.pose.center() - v).normalized();
      const double w = std::max(0.0, mesh.normals[i].dot(to_cam));
      if (w <= 0) continue;
      const ColorFrame& cf = colors[view];
      const auto pc = project(v, cf.intrinsics, cf.pose);
      if (!pc) continue;
      acc += w * sample_color_bilinear(cf, pc->pixel).cast<double>();
      wsum += w;
    }
    if (wsum > 0) {
      mesh.colors[i] = (acc / wsum).cast<float>();
      hit[i] = 1;
    }
  }
  ColorProjectionStats stats;
  for (char h : hit) (h ? stats.colored : stats.uncolored)++;
  return stats;
}

std::vector<RgbdFrame> rerender_views(const TriangleMesh& mesh, std::span<const Camera> cameras,
                                      const RasterOptions& options) {
  std::vector<RgbdFrame> out;
  out.reserve(cameras.size());
  for (const Camera& cam : cameras) {
    RenderTarget r = render_view(mesh, cam.intrinsics, cam.pose, options);
    out.push_back(RgbdFrame{std::move(r.depth), std::move(r.color)});
  }
  return out;
}

}  // namespace volcap
