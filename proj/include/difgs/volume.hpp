#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "difgs/common.hpp"

namespace difgs {

using Dims3 = std::array<std::size_t, 3>;

// Regular attenuation grid. Layout is x fastest, then y, then z. `origin` is
// the world position of the center of voxel (0,0,0).
struct VoxelVolume {
  Dims3 dims{0, 0, 0};
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  std::vector<float> data;

  VoxelVolume() = default;
  VoxelVolume(Dims3 d, Vec3 sp, Vec3 org) : dims(d), spacing(sp), origin(org) {
    require(sp.x > 0 && sp.y > 0 && sp.z > 0, "VoxelVolume: spacing must be positive");
    data.assign(d[0] * d[1] * d[2], 0.0f);
  }

  // Volume centered on the isocenter.
  static VoxelVolume centered(Dims3 d, Vec3 sp) {
    const Vec3 org{-0.5 * static_cast<double>(d[0] - 1) * sp.x,
                   -0.5 * static_cast<double>(d[1] - 1) * sp.y,
                   -0.5 * static_cast<double>(d[2] - 1) * sp.z};
    return VoxelVolume(d, sp, org);
  }

  std::size_t size() const { return data.size(); }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + dims[0] * (j + dims[1] * k);
  }
  float& at(std::size_t i, std::size_t j, std::size_t k) { return data[index(i, j, k)]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return data[index(i, j, k)]; }

  Vec3 voxel_center(std::size_t i, std::size_t j, std::size_t k) const {
    return {origin.x + static_cast<double>(i) * spacing.x,
            origin.y + static_cast<double>(j) * spacing.y,
            origin.z + static_cast<double>(k) * spacing.z};
  }
  Vec3 voxel_center(std::size_t flat) const {
    const std::size_t i = flat % dims[0];
    const std::size_t j = (flat / dims[0]) % dims[1];
    const std::size_t k = flat / (dims[0] * dims[1]);
    return voxel_center(i, j, k);
  }

  // Bounding box of the voxel centers.
  Box bounds() const {
    return {origin, voxel_center(dims[0] - 1, dims[1] - 1, dims[2] - 1)};
  }

  bool same_shape(const VoxelVolume& o) const { return dims == o.dims; }
};

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

struct Ellipsoid {
  Vec3 center;
  Vec3 semi_axes;
  double z_rotation = 0;  // radians
  double value = 0;       // additive attenuation contribution

  bool contains(Vec3 p) const {
    const Vec3 d = p - center;
    const double c = std::cos(z_rotation), s = std::sin(z_rotation);
    // rotate into the ellipsoid frame
    const double lx = c * d.x + s * d.y;
    const double ly = -s * d.x + c * d.y;
    const double qx = lx / semi_axes.x, qy = ly / semi_axes.y, qz = d.z / semi_axes.z;
    return qx * qx + qy * qy + qz * qz <= 1.0;
  }
};

struct PhantomSpec {
  std::vector<Ellipsoid> ellipsoids;
};

inline VoxelVolume generate_phantom(const PhantomSpec& spec, Dims3 dims, Vec3 spacing) {
  require(dims[0] >= 8 && dims[1] >= 8 && dims[2] >= 8, "generate_phantom: dims must be >= 8");
  for (const auto& e : spec.ellipsoids)
    require(e.semi_axes.x > 0 && e.semi_axes.y > 0 && e.semi_axes.z > 0,
            "generate_phantom: ellipsoid semi-axes must be positive");
  VoxelVolume vol = VoxelVolume::centered(dims, spacing);
  for (std::size_t n = 0; n < vol.size(); ++n) {
    const Vec3 p = vol.voxel_center(n);
    double v = 0;
    for (const auto& e : spec.ellipsoids)
      if (e.contains(p)) v += e.value;
    vol.data[n] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return vol;
}

// Uniform double in [0,1) from the top 53 bits; stable across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline PhantomSpec sphere_phantom(double radius_mm, double value) {
  return {{Ellipsoid{{0, 0, 0}, {radius_mm, radius_mm, radius_mm}, 0.0, value}}};
}

namespace detail {
struct UnitEllipsoid {
  double cx, cy, cz, ax, ay, az, rot, value;
};
// 3D Shepp-Logan layout (normalized to [-1,1]^3) with contrast raised so the
// soft-tissue structures are visible after clamping to [0,1].
inline constexpr UnitEllipsoid kSheppLogan[] = {
    {0, 0, 0, 0.69, 0.92, 0.90, 0, 1.0},
    {0, 0, 0, 0.6624, 0.874, 0.88, 0, -0.8},
    {-0.22, 0, -0.25, 0.41, 0.16, 0.21, 3 * std::numbers::pi / 5, -0.2},
    {0.22, 0, -0.25, 0.31, 0.11, 0.22, 2 * std::numbers::pi / 5, -0.2},
    {0, 0.35, -0.25, 0.21, 0.25, 0.50, 0, 0.2},
    {0, 0.1, -0.25, 0.046, 0.046, 0.046, 0, 0.2},
    {-0.08, -0.65, -0.25, 0.046, 0.023, 0.02, 0, 0.2},
    {0.06, -0.65, -0.25, 0.046, 0.023, 0.02, std::numbers::pi / 2, 0.2},
    {0.06, -0.105, 0.625, 0.056, 0.04, 0.1, std::numbers::pi / 2, 0.2},
    {0, 0.1, 0.625, 0.056, 0.056, 0.1, 0, -0.2},
};
}  // namespace detail

inline PhantomSpec shepp_logan_phantom(double half_extent_mm) {
  PhantomSpec spec;
  for (const auto& u : detail::kSheppLogan)
    spec.ellipsoids.push_back({{u.cx * half_extent_mm, u.cy * half_extent_mm, u.cz * half_extent_mm},
                               {u.ax * half_extent_mm, u.ay * half_extent_mm, u.az * half_extent_mm},
                               u.rot,
                               u.value});
  return spec;
}

// Randomized head-like phantom: a jittered Shepp-Logan layout plus a few
// random lesions. Used as the procedural training/evaluation distribution.
inline PhantomSpec random_phantom(std::mt19937_64& rng, double half_extent_mm) {
  PhantomSpec spec;
  const double gx = uniform(rng, 0.8, 1.0), gy = uniform(rng, 0.8, 1.0), gz = uniform(rng, 0.8, 1.0);
  const double gr = uniform(rng, -0.4, 0.4);
  const double cr = std::cos(gr), sr = std::sin(gr);
  bool first = true;
  for (const auto& u : detail::kSheppLogan) {
    const bool shell = first || (u.value == -0.8);
    const double jit = shell ? 0.0 : 0.06;
    const double ux = (u.cx + uniform(rng, -jit, jit)) * gx;
    const double uy = (u.cy + uniform(rng, -jit, jit)) * gy;
    const double uz = (u.cz + uniform(rng, -jit, jit)) * gz;
    const double ax_scale = shell ? 1.0 : uniform(rng, 0.75, 1.25);
    const double val = shell ? u.value : u.value * uniform(rng, 0.5, 1.5);
    spec.ellipsoids.push_back(
        {{(cr * ux - sr * uy) * half_extent_mm, (sr * ux + cr * uy) * half_extent_mm, uz * half_extent_mm},
         {u.ax * gx * ax_scale * half_extent_mm, u.ay * gy * ax_scale * half_extent_mm,
          u.az * gz * ax_scale * half_extent_mm},
         u.rot + gr + (shell ? 0.0 : uniform(rng, -0.3, 0.3)),
         val});
    first = false;
  }
  const int lesions = 1 + static_cast<int>(uniform01(rng) * 3.0);
  for (int l = 0; l < lesions; ++l) {
    const double r = uniform(rng, 0.06, 0.16);
    spec.ellipsoids.push_back({{uniform(rng, -0.4, 0.4) * gx * half_extent_mm,
                                uniform(rng, -0.5, 0.5) * gy * half_extent_mm,
                                uniform(rng, -0.5, 0.5) * gz * half_extent_mm},
                               {r * half_extent_mm * uniform(rng, 0.7, 1.3), r * half_extent_mm,
                                r * half_extent_mm * uniform(rng, 0.7, 1.3)},
                               uniform(rng, 0.0, std::numbers::pi),
                               uniform(rng, 0.1, 0.35)});
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Trilinear interpolation among the 8 surrounding voxel centers. Points
// outside the voxel-center bounding box read as 0 (air).
inline double sample_trilinear(const VoxelVolume& vol, Vec3 p) {
  const double fx = (p.x - vol.origin.x) / vol.spacing.x;
  const double fy = (p.y - vol.origin.y) / vol.spacing.y;
  const double fz = (p.z - vol.origin.z) / vol.spacing.z;
  const double mx = static_cast<double>(vol.dims[0] - 1);
  const double my = static_cast<double>(vol.dims[1] - 1);
  const double mz = static_cast<double>(vol.dims[2] - 1);
  if (!(fx >= 0 && fx <= mx && fy >= 0 && fy <= my && fz >= 0 && fz <= mz)) return 0.0;
  auto split = [](double f, std::size_t n, std::size_t& i0, double& t) {
    i0 = std::min(static_cast<std::size_t>(f), n - 2);
    t = f - static_cast<double>(i0);
  };
  std::size_t i, j, k;
  double tx, ty, tz;
  split(fx, vol.dims[0], i, tx);
  split(fy, vol.dims[1], j, ty);
  split(fz, vol.dims[2], k, tz);
  const std::size_t sx = 1, sy = vol.dims[0], sz = vol.dims[0] * vol.dims[1];
  const float* b = vol.data.data() + vol.index(i, j, k);
  const double c00 = b[0] * (1 - tx) + b[sx] * tx;
  const double c10 = b[sy] * (1 - tx) + b[sy + sx] * tx;
  const double c01 = b[sz] * (1 - tx) + b[sz + sx] * tx;
  const double c11 = b[sz + sy] * (1 - tx) + b[sz + sy + sx] * tx;
  const double c0 = c00 * (1 - ty) + c10 * ty;
  const double c1 = c01 * (1 - ty) + c11 * ty;
  return c0 * (1 - tz) + c1 * tz;
}

// The 8 (voxel, weight) pairs sample_trilinear blends for p; false outside.
struct TrilinearTaps {
  std::size_t index[8];
  double weight[8];
};

inline bool trilinear_taps(const VoxelVolume& vol, Vec3 p, TrilinearTaps& taps) {
  const double fx = (p.x - vol.origin.x) / vol.spacing.x;
  const double fy = (p.y - vol.origin.y) / vol.spacing.y;
  const double fz = (p.z - vol.origin.z) / vol.spacing.z;
  const double mx = static_cast<double>(vol.dims[0] - 1);
  const double my = static_cast<double>(vol.dims[1] - 1);
  const double mz = static_cast<double>(vol.dims[2] - 1);
  if (!(fx >= 0 && fx <= mx && fy >= 0 && fy <= my && fz >= 0 && fz <= mz)) return false;
  const std::size_t i = std::min(static_cast<std::size_t>(fx), vol.dims[0] - 2);
  const std::size_t j = std::min(static_cast<std::size_t>(fy), vol.dims[1] - 2);
  const std::size_t k = std::min(static_cast<std::size_t>(fz), vol.dims[2] - 2);
  const double tx = fx - static_cast<double>(i), ty = fy - static_cast<double>(j), tz = fz - static_cast<double>(k);
  const std::size_t sy = vol.dims[0], sz = vol.dims[0] * vol.dims[1];
  const std::size_t base = vol.index(i, j, k);
  int n = 0;
  for (int c = 0; c < 2; ++c)
    for (int b = 0; b < 2; ++b)
      for (int a = 0; a < 2; ++a) {
        taps.index[n] = base + static_cast<std::size_t>(a) + b * sy + c * sz;
        taps.weight[n] = (a ? tx : 1 - tx) * (b ? ty : 1 - ty) * (c ? tz : 1 - tz);
        ++n;
      }
  return true;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr double kPsnrCapDb = 100.0;

inline void check_same_shape(const VoxelVolume& a, const VoxelVolume& b, const char* who) {
  if (!a.same_shape(b)) throw ShapeMismatch(std::string(who) + ": volume dims differ");
}

inline double psnr(const VoxelVolume& a, const VoxelVolume& b, double data_range = 1.0) {
  check_same_shape(a, b, "psnr");
  require(data_range > 0, "psnr: data_range must be positive");
  double sse = 0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    const double d = static_cast<double>(a.data[n]) - static_cast<double>(b.data[n]);
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCapDb;
  return 10.0 * std::log10(data_range * data_range / mse);
}

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

inline std::array<double, kSsimWindow> ssim_kernel() {
  std::array<double, kSsimWindow> w{};
  double sum = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double x = i - kSsimWindow / 2;
    w[i] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Mean SSIM over all fully-contained 11x11 windows of one axial slice.
inline double ssim_slice(const float* a, const float* b, std::size_t nx, std::size_t ny,
                         double data_range) {
  const auto w = ssim_kernel();
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  const std::size_t ox = nx - kSsimWindow + 1, oy = ny - kSsimWindow + 1;
  // Horizontal pass: five moments filtered along x.
  std::vector<std::array<double, 5>> h(ox * ny);
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < ox; ++x) {
      std::array<double, 5> m{};
      for (int t = 0; t < kSsimWindow; ++t) {
        const double va = a[y * nx + x + t], vb = b[y * nx + x + t];
        m[0] += w[t] * va;
        m[1] += w[t] * vb;
        m[2] += w[t] * va * va;
        m[3] += w[t] * vb * vb;
        m[4] += w[t] * va * vb;
      }
      h[y * ox + x] = m;
    }
  double total = 0;
  for (std::size_t y = 0; y < oy; ++y)
    for (std::size_t x = 0; x < ox; ++x) {
      std::array<double, 5> m{};
      for (int t = 0; t < kSsimWindow; ++t)
        for (int c = 0; c < 5; ++c) m[c] += w[t] * h[(y + t) * ox + x][c];
      const double mu_a = m[0], mu_b = m[1];
      const double var_a = m[2] - mu_a * mu_a;
      const double var_b = m[3] - mu_b * mu_b;
      const double cov = m[4] - mu_a * mu_b;
      total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
               ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
  return total / static_cast<double>(ox * oy);
}

inline double ssim(const VoxelVolume& a, const VoxelVolume& b, double data_range = 1.0) {
  check_same_shape(a, b, "ssim");
  require(data_range > 0, "ssim: data_range must be positive");
  const std::size_t nx = a.dims[0], ny = a.dims[1], nz = a.dims[2];
  if (nx < kSsimWindow || ny < kSsimWindow)
    throw InvalidParameter("ssim: axial slices must be at least 11x11");
  std::vector<double> per_slice(nz);
  parallel_for(nz, [&](std::size_t z) {
    per_slice[z] = ssim_slice(a.data.data() + z * nx * ny, b.data.data() + z * nx * ny, nx, ny, data_range);
  });
  double sum = 0;
  for (double s : per_slice) sum += s;
  return sum / static_cast<double>(nz);
}

}  // namespace difgs
