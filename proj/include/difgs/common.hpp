#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace difgs {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidParameter : Error {
  using Error::Error;
};
struct ShapeMismatch : Error {
  using Error::Error;
};
struct BehindSource : Error {
  using Error::Error;
};
struct SingularCovariance : Error {
  using Error::Error;
};
struct ZeroNorm : Error {
  using Error::Error;
};
struct NoValidView : Error {
  using Error::Error;
};
struct MissingGradient : Error {
  using Error::Error;
};
struct Divergence : Error {
  using Error::Error;
};

// I/O and file-format errors. The three format failures are distinct types so
// callers can tell them apart.
struct IoError : Error {
  using Error::Error;
};
struct BadMagic : IoError {
  using IoError::IoError;
};
struct TruncatedPayload : IoError {
  using IoError::IoError;
};
struct ShapeInconsistency : IoError {
  using IoError::IoError;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidParameter(what);
}

// ---------------------------------------------------------------------------
// Vec3
// ---------------------------------------------------------------------------

struct Vec3 {
  double x = 0, y = 0, z = 0;

  constexpr double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }

  friend constexpr Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend constexpr Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend constexpr Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend constexpr Vec3 operator*(Vec3 a, double s) { return s * a; }
  friend constexpr bool operator==(Vec3 a, Vec3 b) = default;
};

constexpr double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }

// Axis-aligned box in world mm.
struct Box {
  Vec3 lo, hi;

  Vec3 extent() const { return hi - lo; }
  Vec3 center() const { return 0.5 * (lo + hi); }
  bool contains(Vec3 p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }
};

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

// Process-wide worker count. Every parallel loop in the library partitions its
// work into tasks whose boundaries do not depend on this value, so results are
// identical for any worker count.
inline std::atomic<int>& worker_count_ref() {
  static std::atomic<int> n{1};
  return n;
}
inline int worker_count() { return worker_count_ref().load(); }
inline void set_worker_count(int n) { worker_count_ref().store(std::max(1, n)); }

template <typename F>
void parallel_for(std::size_t n_tasks, F&& fn) {
  const auto workers = static_cast<std::size_t>(worker_count());
  if (workers <= 1 || n_tasks <= 1) {
    for (std::size_t i = 0; i < n_tasks; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto run = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n_tasks || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t spawn = std::min(workers, n_tasks) - 1;
  pool.reserve(spawn);
  for (std::size_t t = 0; t < spawn; ++t) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// Splits [0, n) into fixed-size chunks.
struct ChunkRange {
  std::size_t begin, end;
};
inline std::vector<ChunkRange> make_chunks(std::size_t n, std::size_t chunk) {
  std::vector<ChunkRange> out;
  for (std::size_t b = 0; b < n; b += chunk) out.push_back({b, std::min(n, b + chunk)});
  return out;
}

}  // namespace difgs
