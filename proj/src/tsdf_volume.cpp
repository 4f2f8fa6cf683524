#include "volcap/tsdf_volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace volcap {

TsdfVolume::TsdfVolume(const Vec3& origin, double voxel_size, const Vec3i& dims, double truncation,
                       float max_weight)
    : truncation_(truncation > 0 ? truncation : 4.0 * voxel_size), max_weight_(max_weight) {
  if (!(voxel_size > 0)) throw ConfigError("voxel size must be positive");
  if (dims.minCoeff() < 2) throw ConfigError("volume needs at least 2 voxels per axis");
  if (!(max_weight > 0)) throw ConfigError("max weight must be positive");
  lattice_ = LatticeGeometry{origin, voxel_size, dims};
  tsdf_.assign(lattice_.point_count(), 1.0f);
  weight_.assign(lattice_.point_count(), 0.0f);
}

TsdfVolume TsdfVolume::centered(const Vec3& center, double voxel_size, int dims, double truncation) {
  const Vec3 origin = center - Vec3::Constant(0.5 * voxel_size * (dims - 1));
  return TsdfVolume(origin, voxel_size, Vec3i::Constant(dims), truncation);
}

Vec3i TsdfVolume::coords(std::size_t idx) const {
  const auto nx = static_cast<std::size_t>(lattice_.dims.x());
  const auto ny = static_cast<std::size_t>(lattice_.dims.y());
  return Vec3i(static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny), static_cast<int>(idx / (nx * ny)));
}

namespace {
// Lattice coordinates within rounding noise of the boundary count as inside.
constexpr double kBoundaryEps = 1e-9;

bool inside_lattice(const Vec3& g, const Vec3i& n) {
  for (int a = 0; a < 3; ++a)
    if (!(g[a] >= -kBoundaryEps && g[a] <= n[a] - 1 + kBoundaryEps)) return false;
  return true;
}
}  // namespace

bool TsdfVolume::contains(const Vec3& p) const {
  return inside_lattice((p - lattice_.origin) / lattice_.spacing, lattice_.dims);
}

bool TsdfVolume::fuse_sample(std::size_t idx, double signed_distance) {
  if (!(signed_distance > -truncation_)) return false;
  const double sample = std::clamp(signed_distance / truncation_, -1.0, 1.0);
  const double w = weight_[idx];
  tsdf_[idx] = static_cast<float>((w * tsdf_[idx] + sample) / (w + 1.0));
  weight_[idx] = std::min(static_cast<float>(w + 1.0), max_weight_);
  return true;
}

std::optional<double> TsdfVolume::projective_distance(const Vec3& point, const DepthFrame& frame) {
  const auto proj = project(point, frame.intrinsics, frame.pose);
  if (!proj) return std::nullopt;
  const auto d = sample_depth_bilinear(frame, proj->pixel);
  if (!d) return std::nullopt;
  return *d - proj->depth;
}

void TsdfVolume::integrate(const DepthFrame& frame) {
  const Vec3i& n = lattice_.dims;
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (int k = 0; k < n.z(); ++k)
    for (int j = 0; j < n.y(); ++j)
      for (int i = 0; i < n.x(); ++i) {
        const auto s = projective_distance(voxel_center(i, j, k), frame);
        if (s) fuse_sample(index(i, j, k), *s);
      }
}

void TsdfVolume::integrate(std::span<const DepthFrame> frames) {
  for (const DepthFrame& f : frames) integrate(f);
}

std::optional<TsdfSample> TsdfVolume::query(const Vec3& p) const {
  const Vec3i& n = lattice_.dims;
  const Vec3 g = ((p - lattice_.origin) / lattice_.spacing);
  if (!inside_lattice(g, n)) return std::nullopt;
  const Vec3 gc = g.cwiseMax(0.0).cwiseMin((n - Vec3i::Ones()).cast<double>());
  const int i0 = std::min(static_cast<int>(gc.x()), n.x() - 2);
  const int j0 = std::min(static_cast<int>(gc.y()), n.y() - 2);
  const int k0 = std::min(static_cast<int>(gc.z()), n.z() - 2);
  const double fx = gc.x() - i0, fy = gc.y() - j0, fz = gc.z() - k0;
  TsdfSample out;
  for (int c = 0; c < 8; ++c) {
    const int di = c & 1, dj = (c >> 1) & 1, dk = (c >> 2) & 1;
    const std::size_t idx = index(i0 + di, j0 + dj, k0 + dk);
    if (weight_[idx] <= 0.0f) return std::nullopt;
    const double w = (di ? fx : 1 - fx) * (dj ? fy : 1 - fy) * (dk ? fz : 1 - fz);
    out.tsdf += w * tsdf_[idx];
    out.weight += w * weight_[idx];
  }
  return out;
}

Vec3 TsdfVolume::gradient(const Vec3& p) const {
  // Central differences on the trilinear field; falls back to nearest voxels
  // when a stencil point is unobserved.
  const double h = lattice_.spacing;
  Vec3 g = Vec3::Zero();
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = h;
    const auto plus = query(p + e), minus = query(p - e);
    if (plus && minus) {
      g[a] = (plus->tsdf - minus->tsdf) / (2 * h);
    } else if (const auto c = query(p)) {
      if (plus) g[a] = (plus->tsdf - c->tsdf) / h;
      else if (minus) g[a] = (c->tsdf - minus->tsdf) / h;
    }
  }
  return g;
}

TriangleMesh TsdfVolume::extract_mesh() const {
  // Unobserved corners never produce triangles: cells touching one are skipped.
  auto value = [this](int i, int j, int k) { return static_cast<double>(tsdf_[index(i, j, k)]); };
  auto mc = make_marching_cubes(lattice_, value, 0.0);
  const Vec3i& n = lattice_.dims;
  for (int k = 0; k + 1 < n.z(); ++k)
    for (int j = 0; j + 1 < n.y(); ++j)
      for (int i = 0; i + 1 < n.x(); ++i) {
        bool observed = true;
        bool has_neg = false, has_pos = false;
        for (int c = 0; c < 8 && observed; ++c) {
          const std::size_t idx = index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
          observed = weight_[idx] > 0.0f;
          (tsdf_[idx] < 0.0f ? has_neg : has_pos) = true;
        }
        if (observed && has_neg && has_pos) mc.add_cell(i, j, k);
      }
  TriangleMesh mesh = mc.finish();
  mesh.normals.resize(mesh.vertices.size());
  TriangleMesh face_based = mesh;
  compute_vertex_normals(face_based);
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
    const Vec3 g = gradient(mesh.vertices[v]);
    mesh.normals[v] = g.norm() > 1e-12 ? Vec3(g.normalized()) : face_based.normals[v];
  }
  return mesh;
}

void TsdfVolume::write_dump(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  os.write(reinterpret_cast<const char*>(tsdf_.data()), static_cast<std::streamsize>(tsdf_.size() * sizeof(float)));
  os.write(reinterpret_cast<const char*>(weight_.data()), static_cast<std::streamsize>(weight_.size() * sizeof(float)));
  if (!os) throw IoError("write failed: " + path.string());
  const nlohmann::json side = {
      {"origin", {origin().x(), origin().y(), origin().z()}},
      {"voxel_size", voxel_size()},
      {"dims", {dims().x(), dims().y(), dims().z()}},
      {"truncation", truncation_},
      {"max_weight", max_weight_},
      {"layout", "float32 tsdf[z][y][x] followed by float32 weight[z][y][x], little-endian"}};
  std::ofstream js(path.string() + ".json");
  js << side.dump(2) << '\n';
}

TsdfVolume TsdfVolume::read_dump(const std::filesystem::path& path) {
  std::ifstream js(path.string() + ".json");
  if (!js) throw IoError("missing volume sidecar for " + path.string());
  const auto side = nlohmann::json::parse(js);
  const auto o = side.at("origin").get<std::vector<double>>();
  const auto d = side.at("dims").get<std::vector<int>>();
  TsdfVolume vol(Vec3(o.at(0), o.at(1), o.at(2)), side.at("voxel_size").get<double>(), Vec3i(d.at(0), d.at(1), d.at(2)),
                 side.at("truncation").get<double>(), side.value("max_weight", kDefaultMaxWeight));
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  is.read(reinterpret_cast<char*>(vol.tsdf_.data()), static_cast<std::streamsize>(vol.tsdf_.size() * sizeof(float)));
  is.read(reinterpret_cast<char*>(vol.weight_.data()), static_cast<std::streamsize>(vol.weight_.size() * sizeof(float)));
  if (!is) throw IoError(path.string() + ": truncated volume dump");
  return vol;
}

}  // namespace volcap
