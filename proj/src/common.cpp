#include "volcap/common.hpp"

#include <Eigen/SVD>

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace volcap {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::atomic<int> g_threads{0};
std::atomic<bool> g_deterministic{false};

}  // namespace

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream) {
  // FNV-1a over the stream name, mixed with the global seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(global_seed ^ splitmix64(h));
}

void set_thread_count(int threads) {
  g_threads = threads;
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif
}

int thread_count() {
#ifdef _OPENMP
  if (g_deterministic) return 1;
  return g_threads > 0 ? g_threads.load() : omp_get_max_threads();
#else
  return 1;
#endif
}

void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic; }

Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0) u.col(2) *= -1.0;
  return u * v.transpose();
}

bool is_rotation(const Mat3& r, double tol) {
  if (!r.allFinite()) return false;
  return (r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

}  // namespace volcap
