#include "doctest.h"

#include "volcap/tsdf_volume.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace volcap;

namespace {

template <class Sdf>
void fill(TsdfVolume& vol, Sdf sdf) {
  for (std::size_t v = 0; v < vol.voxel_count(); ++v) {
    const double s = std::clamp(sdf(vol.voxel_center(v)) / vol.truncation(), -1.0, 1.0);
    vol.set_voxel(v, static_cast<float>(s), 1.0f);
  }
}

// Depth map of a sphere seen by a pinhole camera, by exact ray intersection.
DepthFrame sphere_depth(const Vec3& center, double r, const CameraIntrinsics& k, const CameraPose& pose) {
  DepthFrame f(k, pose);
  const Vec3 eye = pose.center();
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dir_cam((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
      const Vec3 dir = pose.rotation.transpose() * dir_cam;
      const Vec3 oc = eye - center;
      const double a = dir.squaredNorm(), b = 2 * oc.dot(dir), c = oc.squaredNorm() - r * r;
      const double disc = b * b - 4 * a * c;
      if (disc < 0) continue;
      const double s = (-b - std::sqrt(disc)) / (2 * a);
      if (s > 0) f.depth(x, y) = static_cast<float>(s);  // z-component of s*dir_cam is s
    }
  return f;
}

double brute_trilinear(const TsdfVolume& vol, const Vec3& p) {
  const Vec3 g = (p - vol.origin()) / vol.voxel_size();
  const int i = static_cast<int>(std::floor(g.x())), j = static_cast<int>(std::floor(g.y())),
            k = static_cast<int>(std::floor(g.z()));
  const double fx = g.x() - i, fy = g.y() - j, fz = g.z() - k;
  auto at = [&](int a, int b, int c) { return static_cast<double>(vol.tsdf(vol.index(a, b, c))); };
  const double c00 = at(i, j, k) * (1 - fx) + at(i + 1, j, k) * fx;
  const double c10 = at(i, j + 1, k) * (1 - fx) + at(i + 1, j + 1, k) * fx;
  const double c01 = at(i, j, k + 1) * (1 - fx) + at(i + 1, j, k + 1) * fx;
  const double c11 = at(i, j + 1, k + 1) * (1 - fx) + at(i + 1, j + 1, k + 1) * fx;
  return (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz;
}

}  // namespace

TEST_CASE("integrate: single-voxel update rules") {
  TsdfVolume vol(Vec3::Zero(), 0.01, Vec3i(2, 2, 2));
  CHECK(vol.truncation() == doctest::Approx(0.04));
  CHECK(vol.fuse_sample(0, 0.0));
  CHECK(vol.tsdf(0) == 0.0f);
  CHECK(vol.fuse_sample(1, 0.08));
  CHECK(vol.tsdf(1) == 1.0f);
  CHECK_FALSE(vol.fuse_sample(2, -0.05));
  CHECK(vol.weight(2) == 0.0f);
  CHECK(vol.fuse_sample(3, -0.02));
  CHECK(vol.tsdf(3) == doctest::Approx(-0.5));
  for (int i = 0; i < 100; ++i) vol.fuse_sample(0, 0.02);
  CHECK(vol.weight(0) == 64.0f);
}

TEST_CASE("integrate: sphere zero crossing along a camera ray") {
  const double voxel = 0.02;
  auto vol = TsdfVolume::centered(Vec3::Zero(), voxel, 64);
  const CameraIntrinsics k{200, 200, 64, 64, 128, 128};
  const CameraPose pose = CameraPose::look_at(Vec3(0, 0, -2), Vec3::Zero());
  const DepthFrame f = sphere_depth(Vec3::Zero(), 0.5, k, pose);
  vol.integrate(f);

  for (double tx : {0.0, 0.1, -0.2}) {
    // March along the ray through (tx, 0) until the trilinear field changes sign.
    const Vec3 eye = pose.center();
    const Vec3 dir = (Vec3(tx, 0, 0) - eye).normalized();
    double prev_s = 0, prev_v = 1;
    bool found = false;
    for (double s = 1.0; s < 2.2; s += 0.001) {
      const auto q = vol.query(eye + s * dir);
      if (!q) continue;
      if (prev_v > 0 && q->tsdf <= 0) {
        const double hit = prev_s + (s - prev_s) * prev_v / (prev_v - q->tsdf);
        const Vec3 oc = eye;
        const double b = oc.dot(dir), c = oc.squaredNorm() - 0.25;
        const double truth = -b - std::sqrt(b * b - c);
        CHECK(std::abs(hit - truth) < voxel / 2);
        found = true;
        break;
      }
      prev_s = s;
      prev_v = q->tsdf;
    }
    CHECK(found);
  }
}

TEST_CASE("integrate: repeated noiseless frame equals single integration") {
  const CameraIntrinsics k{100, 100, 32, 32, 64, 64};
  const CameraPose pose = CameraPose::look_at(Vec3(0.3, 0.2, -2), Vec3::Zero());
  const DepthFrame f = sphere_depth(Vec3::Zero(), 0.5, k, pose);
  auto once = TsdfVolume::centered(Vec3::Zero(), 0.04, 32);
  auto many = once;
  once.integrate(f);
  for (int i = 0; i < 5; ++i) many.integrate(f);
  for (std::size_t v = 0; v < once.voxel_count(); ++v) {
    REQUIRE(std::abs(once.tsdf(v) - many.tsdf(v)) < 1e-6);
    REQUIRE(std::abs(many.tsdf(v)) <= 1.0f);
    REQUIRE(many.weight(v) <= many.max_weight());
  }
}

TEST_CASE("query: exact, midpoint, bounds and brute-force oracle") {
  TsdfVolume vol(Vec3::Zero(), 0.1, Vec3i(4, 4, 4));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  for (std::size_t v = 0; v < vol.voxel_count(); ++v) vol.set_voxel(v, static_cast<float>(u(rng)), 1.0f);
  const auto exact = vol.query(vol.voxel_center(1, 2, 3));
  REQUIRE(exact);
  CHECK(exact->tsdf == doctest::Approx(vol.tsdf(vol.index(1, 2, 3))));
  CHECK_FALSE(vol.query(Vec3(-0.01, 0, 0)));
  CHECK_FALSE(vol.query(Vec3(0.31, 0.1, 0.1)));
  std::uniform_real_distribution<double> in(0, 0.3);
  for (int it = 0; it < 1000; ++it) {
    const Vec3 p(in(rng), in(rng), in(rng));
    const auto q = vol.query(p);
    REQUIRE(q);
    CHECK(std::abs(q->tsdf - brute_trilinear(vol, p)) < 1e-6);
  }

  TsdfVolume two(Vec3::Zero(), 0.1, Vec3i(2, 2, 2));
  for (std::size_t v = 0; v < two.voxel_count(); ++v)
    two.set_voxel(v, two.coords(v).x() == 0 ? -0.2f : 0.2f, 1.0f);
  CHECK(two.query(Vec3(0.05, 0.03, 0.07))->tsdf == doctest::Approx(0.0));
  two.set_voxel(7, 0.2f, 0.0f);
  CHECK_FALSE(two.query(Vec3(0.05, 0.05, 0.05)));
}

TEST_CASE("extract_mesh: free space gives an empty mesh") {
  TsdfVolume vol(Vec3::Zero(), 0.02, Vec3i(8, 8, 8));
  for (std::size_t v = 0; v < vol.voxel_count(); ++v) vol.set_voxel(v, 1.0f, 1.0f);
  CHECK(vol.extract_mesh().empty());
}

TEST_CASE("extract_mesh: analytic sphere is accurate, watertight and faces outward") {
  const double voxel = 0.02;
  auto vol = TsdfVolume::centered(Vec3::Zero(), voxel, 64);
  fill(vol, [](const Vec3& p) { return p.norm() - 0.5; });
  const TriangleMesh mesh = vol.extract_mesh();
  REQUIRE_FALSE(mesh.empty());
  CHECK_NOTHROW(mesh.validate());
  double err = 0, max_err = 0;
  for (const Vec3& v : mesh.vertices) {
    err += std::abs(v.norm() - 0.5);
    max_err = std::max(max_err, std::abs(v.norm() - 0.5));
  }
  err /= static_cast<double>(mesh.vertices.size());
  CHECK(err < voxel / 4);
  CHECK(max_err < voxel);
  CHECK(is_watertight(mesh));
  CHECK(count_components(mesh) == 1);

  std::size_t outward_faces = 0, outward_normals = 0;
  for (const Vec3i& t : mesh.triangles) {
    const Vec3& a = mesh.vertices[t[0]];
    const Vec3& b = mesh.vertices[t[1]];
    const Vec3& c = mesh.vertices[t[2]];
    if ((b - a).cross(c - a).dot(a + b + c) > 0) ++outward_faces;
  }
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v)
    if (mesh.normals[v].dot(mesh.vertices[v].normalized()) > 0.99) ++outward_normals;
  CHECK(outward_faces == mesh.triangles.size());
  CHECK(outward_normals == mesh.vertices.size());
}

TEST_CASE("extract_mesh: linear field is reproduced exactly") {
  const double voxel = 0.02;
  auto vol = TsdfVolume::centered(Vec3::Zero(), voxel, 64);
  vol = TsdfVolume(Vec3(-0.3, -0.3, 0.0), voxel, Vec3i(32, 32, 64));
  fill(vol, [](const Vec3& p) { return p.z() - 0.505; });
  const TriangleMesh mesh = vol.extract_mesh();
  REQUIRE_FALSE(mesh.empty());
  for (const Vec3& v : mesh.vertices) CHECK(std::abs(v.z() - 0.505) < voxel / 10);
  for (const Vec3& n : mesh.normals) CHECK(n.z() > 0.999);
}

TEST_CASE("extract_mesh skips cells next to unobserved voxels") {
  auto vol = TsdfVolume::centered(Vec3::Zero(), 0.05, 24);
  fill(vol, [](const Vec3& p) { return p.norm() - 0.4; });
  for (std::size_t v = 0; v < vol.voxel_count(); ++v)
    if (vol.voxel_center(v).x() > 0.2) vol.set_voxel(v, vol.tsdf(v), 0.0f);
  const TriangleMesh mesh = vol.extract_mesh();
  for (const Vec3& v : mesh.vertices) CHECK(v.x() <= 0.2 + 1e-9);
}

TEST_CASE("volume dump round trip") {
  auto vol = TsdfVolume::centered(Vec3(0.1, 0, 0), 0.05, 8);
  fill(vol, [](const Vec3& p) { return p.norm() - 0.1; });
  const auto path = std::filesystem::temp_directory_path() / "volcap_vol.bin";
  vol.write_dump(path);
  const TsdfVolume back = TsdfVolume::read_dump(path);
  CHECK(back.tsdf_values() == vol.tsdf_values());
  CHECK(back.weight_values() == vol.weight_values());
  CHECK((back.origin() - vol.origin()).norm() < 1e-12);
  CHECK(back.truncation() == doctest::Approx(vol.truncation()));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
