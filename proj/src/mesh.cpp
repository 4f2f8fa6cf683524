#include "volcap/mesh.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace volcap {

void TriangleMesh::validate() const {
  const auto n = static_cast<int>(vertices.size());
  for (std::size_t t = 0; t < triangles.size(); ++t) {
    const Vec3i& tri = triangles[t];
    for (int k = 0; k < 3; ++k)
      if (tri[k] < 0 || tri[k] >= n) throw std::runtime_error("triangle index out of range");
    if (triangle_area(*this, t) <= 1e-12) throw std::runtime_error("degenerate triangle");
  }
  if (!normals.empty()) {
    if (normals.size() != vertices.size()) throw std::runtime_error("normal count mismatch");
    for (const Vec3& nrm : normals)
      if (std::abs(nrm.norm() - 1.0) > 1e-4) throw std::runtime_error("normal not unit length");
  }
  if (!colors.empty() && colors.size() != vertices.size()) throw std::runtime_error("color count mismatch");
}

double triangle_area(const TriangleMesh& mesh, std::size_t tri) {
  const Vec3i& t = mesh.triangles[tri];
  const Vec3& a = mesh.vertices[static_cast<std::size_t>(t[0])];
  const Vec3& b = mesh.vertices[static_cast<std::size_t>(t[1])];
  const Vec3& c = mesh.vertices[static_cast<std::size_t>(t[2])];
  return 0.5 * (b - a).cross(c - a).norm();
}

void compute_vertex_normals(TriangleMesh& mesh) {
  mesh.normals.assign(mesh.vertices.size(), Vec3::Zero());
  for (const Vec3i& t : mesh.triangles) {
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(t[0])];
    const Vec3& b = mesh.vertices[static_cast<std::size_t>(t[1])];
    const Vec3& c = mesh.vertices[static_cast<std::size_t>(t[2])];
    const Vec3 n = (b - a).cross(c - a);
    for (int k = 0; k < 3; ++k) mesh.normals[static_cast<std::size_t>(t[k])] += n;
  }
  for (Vec3& n : mesh.normals) {
    const double len = n.norm();
    n = len > 0 ? Vec3(n / len) : Vec3::UnitZ();
  }
}

void weld_and_clean(TriangleMesh& mesh, double min_area) {
  // Exact coordinate equality; adding 0.0 folds -0.0 into +0.0 before hashing the bits.
  using Key = std::array<std::uint64_t, 3>;
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      std::uint64_t h = 0x9e3779b97f4a7c15ull;
      for (std::uint64_t w : k) h = (h ^ w) * 0x100000001b3ull + (h >> 29);
      return static_cast<std::size_t>(h);
    }
  };
  std::unordered_map<Key, int, KeyHash> first;
  first.reserve(mesh.vertices.size());
  std::vector<int> remap(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    const Key key = {std::bit_cast<std::uint64_t>(v.x() + 0.0), std::bit_cast<std::uint64_t>(v.y() + 0.0),
                     std::bit_cast<std::uint64_t>(v.z() + 0.0)};
    auto [it, inserted] = first.try_emplace(key, static_cast<int>(i));
    remap[i] = it->second;
  }
  std::vector<Vec3i> kept;
  kept.reserve(mesh.triangles.size());
  for (const Vec3i& t : mesh.triangles) {
    const Vec3i r(remap[static_cast<std::size_t>(t[0])], remap[static_cast<std::size_t>(t[1])],
                  remap[static_cast<std::size_t>(t[2])]);
    if (r[0] == r[1] || r[1] == r[2] || r[0] == r[2]) continue;
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(r[0])];
    const Vec3& b = mesh.vertices[static_cast<std::size_t>(r[1])];
    const Vec3& c = mesh.vertices[static_cast<std::size_t>(r[2])];
    if (0.5 * (b - a).cross(c - a).norm() <= min_area) continue;
    kept.push_back(r);
  }
  // Compact vertices in first-use order of the original indices.
  std::vector<int> compact(mesh.vertices.size(), -1);
  std::vector<std::size_t> order;
  for (const Vec3i& t : kept)
    for (int k = 0; k < 3; ++k) {
      const auto v = static_cast<std::size_t>(t[k]);
      if (compact[v] < 0) {
        compact[v] = 0;
        order.push_back(v);
      }
    }
  std::sort(order.begin(), order.end());
  TriangleMesh out;
  out.vertices.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    compact[order[i]] = static_cast<int>(i);
    out.vertices.push_back(mesh.vertices[order[i]]);
    if (mesh.has_normals()) out.normals.push_back(mesh.normals[order[i]]);
    if (mesh.has_colors()) out.colors.push_back(mesh.colors[order[i]]);
  }
  out.triangles.reserve(kept.size());
  for (const Vec3i& t : kept)
    out.triangles.emplace_back(compact[static_cast<std::size_t>(t[0])], compact[static_cast<std::size_t>(t[1])],
                               compact[static_cast<std::size_t>(t[2])]);
  mesh = std::move(out);
}

std::size_t count_boundary_or_nonmanifold_edges(const TriangleMesh& mesh) {
  std::unordered_map<std::uint64_t, int> edge_count;
  edge_count.reserve(mesh.triangles.size() * 3);
  for (const Vec3i& t : mesh.triangles)
    for (int k = 0; k < 3; ++k) {
      auto a = static_cast<std::uint64_t>(t[k]);
      auto b = static_cast<std::uint64_t>(t[(k + 1) % 3]);
      if (a > b) std::swap(a, b);
      ++edge_count[(a << 32) | b];
    }
  return static_cast<std::size_t>(
      std::count_if(edge_count.begin(), edge_count.end(), [](const auto& kv) { return kv.second != 2; }));
}

namespace {

struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace

std::vector<int> connected_components(const TriangleMesh& mesh, int* count) {
  DisjointSet ds(mesh.vertices.size());
  for (const Vec3i& t : mesh.triangles) {
    ds.unite(t[0], t[1]);
    ds.unite(t[1], t[2]);
  }
  std::unordered_map<int, int> label_of_root;
  std::vector<int> labels(mesh.triangles.size());
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    const int root = ds.find(mesh.triangles[i][0]);
    auto [it, inserted] = label_of_root.emplace(root, static_cast<int>(label_of_root.size()));
    labels[i] = it->second;
  }
  if (count) *count = static_cast<int>(label_of_root.size());
  return labels;
}

int count_components(const TriangleMesh& mesh, std::size_t min_triangles) {
  int n = 0;
  const auto labels = connected_components(mesh, &n);
  std::vector<std::size_t> sizes(static_cast<std::size_t>(n), 0);
  for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
  return static_cast<int>(std::count_if(sizes.begin(), sizes.end(), [&](std::size_t s) { return s >= min_triangles; }));
}

void transform_mesh(TriangleMesh& mesh, const Mat3& rotation, const Vec3& translation) {
  for (Vec3& v : mesh.vertices) v = rotation * v + translation;
  for (Vec3& n : mesh.normals) n = rotation * n;
}

void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh, bool binary) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  const bool normals = mesh.has_normals();
  const bool colors = mesh.has_colors();
  os << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
  os << "element vertex " << mesh.vertices.size() << "\n";
  os << "property float x\nproperty float y\nproperty float z\n";
  if (normals) os << "property float nx\nproperty float ny\nproperty float nz\n";
  if (colors) os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  os << "element face " << mesh.triangles.size() << "\n";
  os << "property list uchar int vertex_indices\nend_header\n";

  auto to_byte = [](float c) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(c), 0.0, 1.0) * 255.0));
  };
  auto put_f = [&](double v) {
    const auto f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), 4);
  };
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    if (binary) {
      put_f(v.x()), put_f(v.y()), put_f(v.z());
      if (normals) put_f(mesh.normals[i].x()), put_f(mesh.normals[i].y()), put_f(mesh.normals[i].z());
      if (colors)
        for (int c = 0; c < 3; ++c) {
          const std::uint8_t b = to_byte(mesh.colors[i][c]);
          os.write(reinterpret_cast<const char*>(&b), 1);
        }
    } else {
      os << static_cast<float>(v.x()) << ' ' << static_cast<float>(v.y()) << ' ' << static_cast<float>(v.z());
      if (normals)
        os << ' ' << static_cast<float>(mesh.normals[i].x()) << ' ' << static_cast<float>(mesh.normals[i].y()) << ' '
           << static_cast<float>(mesh.normals[i].z());
      if (colors)
        for (int c = 0; c < 3; ++c) os << ' ' << static_cast<int>(to_byte(mesh.colors[i][c]));
      os << '\n';
    }
  }
  for (const Vec3i& t : mesh.triangles) {
    if (binary) {
      const std::uint8_t three = 3;
      os.write(reinterpret_cast<const char*>(&three), 1);
      for (int k = 0; k < 3; ++k) {
        const std::int32_t idx = t[k];
        os.write(reinterpret_cast<const char*>(&idx), 4);
      }
    } else {
      os << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

TriangleMesh read_ply(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "ply") throw IoError(path.string() + ": not a PLY file");

  bool binary = false;
  std::size_t n_vertices = 0, n_faces = 0;
  std::vector<std::pair<std::string, std::string>> vertex_props;  // (type, name)
  std::string current;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "binary_little_endian") binary = true;
      else if (fmt != "ascii") throw IoError(path.string() + ": unsupported PLY format " + fmt);
    } else if (word == "element") {
      std::size_t n = 0;
      ls >> current >> n;
      if (current == "vertex") n_vertices = n;
      else if (current == "face") n_faces = n;
    } else if (word == "property" && current == "vertex") {
      std::string type, name;
      ls >> type >> name;
      vertex_props.emplace_back(type, name);
    } else if (word == "end_header") {
      break;
    }
  }

  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices);
  bool has_n = false, has_c = false;
  for (const auto& [type, name] : vertex_props) {
    has_n |= name == "nx";
    has_c |= name == "red";
  }
  if (has_n) mesh.normals.resize(n_vertices);
  if (has_c) mesh.colors.resize(n_vertices);

  for (std::size_t i = 0; i < n_vertices; ++i) {
    for (const auto& [type, name] : vertex_props) {
      double value = 0;
      if (binary) {
        if (type == "float") {
          float f;
          is.read(reinterpret_cast<char*>(&f), 4);
          value = f;
        } else if (type == "double") {
          is.read(reinterpret_cast<char*>(&value), 8);
        } else if (type == "uchar") {
          std::uint8_t b;
          is.read(reinterpret_cast<char*>(&b), 1);
          value = b;
        } else {
          throw IoError(path.string() + ": unsupported vertex property type " + type);
        }
      } else {
        is >> value;
      }
      if (name == "x") mesh.vertices[i].x() = value;
      else if (name == "y") mesh.vertices[i].y() = value;
      else if (name == "z") mesh.vertices[i].z() = value;
      else if (name == "nx") mesh.normals[i].x() = value;
      else if (name == "ny") mesh.normals[i].y() = value;
      else if (name == "nz") mesh.normals[i].z() = value;
      else if (name == "red") mesh.colors[i][0] = static_cast<float>(value / 255.0);
      else if (name == "green") mesh.colors[i][1] = static_cast<float>(value / 255.0);
      else if (name == "blue") mesh.colors[i][2] = static_cast<float>(value / 255.0);
    }
  }
  mesh.triangles.resize(n_faces);
  for (std::size_t f = 0; f < n_faces; ++f) {
    int count = 0;
    if (binary) {
      std::uint8_t c;
      is.read(reinterpret_cast<char*>(&c), 1);
      count = c;
    } else {
      is >> count;
    }
    if (count != 3) throw IoError(path.string() + ": only triangle faces are supported");
    for (int k = 0; k < 3; ++k) {
      if (binary) {
        std::int32_t idx;
        is.read(reinterpret_cast<char*>(&idx), 4);
        mesh.triangles[f][k] = idx;
      } else {
        is >> mesh.triangles[f][k];
      }
    }
  }
  if (!is) throw IoError(path.string() + ": truncated PLY payload");
  for (Vec3& n : mesh.normals)
    if (n.norm() > 0) n.normalize();
  return mesh;
}

void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  for (const Vec3& v : mesh.vertices) os << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  const bool normals = mesh.has_normals();
  if (normals)
    for (const Vec3& n : mesh.normals) os << "vn " << n.x() << ' ' << n.y() << ' ' << n.z() << '\n';
  for (const Vec3i& t : mesh.triangles) {
    os << 'f';
    for (int k = 0; k < 3; ++k) {
      os << ' ' << t[k] + 1;
      if (normals) os << "//" << t[k] + 1;
    }
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace volcap
