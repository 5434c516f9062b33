#pragma once

// Independent reference implementations and fixtures shared by the unit
// tests and the acceptance runner. Oracles here deliberately avoid calling
// the library routine they are used to check.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "difgs/io.hpp"

namespace difgs::testing {

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

inline constexpr double kFdStep = 1e-6;

// Central difference of f() with respect to the scalar x (restored after).
template <typename F>
double central_diff(F&& f, double& x, double h = kFdStep) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2 * h);
}

// |a - b| relative to the larger magnitude, with an absolute floor so exact
// zeros compare cleanly.
inline double rel_err(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Entries whose finite-difference stencil straddles a ReLU kink disagree with
// the one-sided analytic derivative; quantile() lets tests tolerate those.
struct GradStats {
  double max_rel = 0;
  std::size_t checked = 0;
  std::vector<double> errs;
  void add(double a, double n) {
    const double e = rel_err(a, n);
    max_rel = std::max(max_rel, e);
    errs.push_back(e);
    ++checked;
  }
  void merge(const GradStats& o) {
    for (double e : o.errs) errs.push_back(e);
    max_rel = std::max(max_rel, o.max_rel);
    checked += o.checked;
  }
  double quantile(double q) const {
    if (errs.empty()) return 0;
    auto v = errs;
    const auto i = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1));
    std::nth_element(v.begin(), v.begin() + static_cast<long>(i), v.end());
    return v[i];
  }
};

// Checks dL/dtheta for `count` random entries of every parameter tensor.
// `loss` must recompute the full forward pass from the current values;
// `grad` must (re)fill the analytic gradients.
template <typename Loss, typename Grad>
GradStats check_store_grads(nn::ParamStore<double>& store, Loss&& loss, Grad&& grad, std::size_t count,
                            std::mt19937_64& rng, const std::function<bool(const std::string&)>& include = {}) {
  store.zero_grad();
  grad();
  GradStats st;
  for (std::size_t t = 0; t < store.size(); ++t) {
    if (include && !include(store.name(t))) continue;
    auto& p = store.at(t);
    const std::vector<double> analytic = p.grad;
    const std::size_t n = std::min(count, p.size());
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t j = n == p.size() ? s : rng() % p.size();
      st.add(analytic[j], central_diff(loss, p.values[j]));
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Geometry oracles
// ---------------------------------------------------------------------------

// 3x4 pinhole matrix for view k built from the pose (rows: u, v, depth).
inline Eigen::Matrix<double, 3, 4> projection_matrix(const ScanGeometry& g, std::size_t k) {
  const auto& pose = g.poses[k];
  const double f = g.sdd / g.det_spacing;
  const double cu = 0.5 * static_cast<double>(g.det_shape.n_u - 1);
  const double cv = 0.5 * static_cast<double>(g.det_shape.n_v - 1);
  Eigen::Matrix3d intr;
  intr << f, 0, cu, 0, f, cv, 0, 0, 1;
  Eigen::Matrix3d rot;
  rot.row(0) << pose.detector_u_axis.x, pose.detector_u_axis.y, pose.detector_u_axis.z;
  rot.row(1) << pose.detector_v_axis.x, pose.detector_v_axis.y, pose.detector_v_axis.z;
  rot.row(2) << pose.principal_dir.x, pose.principal_dir.y, pose.principal_dir.z;
  const Eigen::Vector3d c(pose.source_pos.x, pose.source_pos.y, pose.source_pos.z);
  Eigen::Matrix<double, 3, 4> ext;
  ext.leftCols<3>() = rot;
  ext.col(3) = -rot * c;
  return intr * ext;
}

inline DetectorCoord project_homogeneous(const ScanGeometry& g, std::size_t k, Vec3 p) {
  const Eigen::Vector3d h = projection_matrix(g, k) * Eigen::Vector4d(p.x, p.y, p.z, 1.0);
  return {h(0) / h(2), h(1) / h(2)};
}

// Chord length of a ray through a sphere centred at c.
inline double sphere_chord(const Ray& ray, Vec3 c, double r) {
  const Vec3 d = ray.p_d - ray.p_s;
  const double len = norm(d);
  const Vec3 dir = (1.0 / len) * d;
  const Vec3 oc = ray.p_s - c;
  const double b = dot(oc, dir);
  const double disc = b * b - (dot(oc, oc) - r * r);
  if (disc <= 0) return 0;
  const double s = std::sqrt(disc);
  const double t0 = std::clamp(-b - s, 0.0, len), t1 = std::clamp(-b + s, 0.0, len);
  return t1 - t0;
}

// ---------------------------------------------------------------------------
// Volume / metric oracles
// ---------------------------------------------------------------------------

// Trilinear interpolation written from scratch on voxel indices.
inline double trilinear_oracle(const VoxelVolume& v, Vec3 p) {
  const double g[3] = {(p.x - v.origin.x) / v.spacing.x, (p.y - v.origin.y) / v.spacing.y,
                       (p.z - v.origin.z) / v.spacing.z};
  for (int a = 0; a < 3; ++a)
    if (g[a] < 0 || g[a] > static_cast<double>(v.dims[a] - 1)) return 0;
  double acc = 0;
  for (int c = 0; c < 8; ++c) {
    std::size_t idx[3];
    double w = 1;
    for (int a = 0; a < 3; ++a) {
      const double lo = std::min(std::floor(g[a]), static_cast<double>(v.dims[a] - 2));
      const int bit = (c >> a) & 1;
      idx[a] = static_cast<std::size_t>(lo) + bit;
      const double t = g[a] - lo;
      w *= bit ? t : 1 - t;
    }
    acc += w * v.at(idx[0], idx[1], idx[2]);
  }
  return acc;
}

// SSIM of one slice with a directly applied 2D Gaussian window.
inline double ssim_slice_direct(const VoxelVolume& a, const VoxelVolume& b, std::size_t z, double range) {
  const int r = 5;
  const double sigma = 1.5;
  double win[11][11], wsum = 0;
  for (int i = -r; i <= r; ++i)
    for (int j = -r; j <= r; ++j) wsum += win[i + r][j + r] = std::exp(-(i * i + j * j) / (2 * sigma * sigma));
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  const long nx = static_cast<long>(a.dims[0]), ny = static_cast<long>(a.dims[1]);
  double total = 0;
  std::size_t count = 0;
  for (long y = r; y < ny - r; ++y)
    for (long x = r; x < nx - r; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = -r; i <= r; ++i)
        for (int j = -r; j <= r; ++j) {
          const double w = win[i + r][j + r] / wsum;
          const double va = a.at(static_cast<std::size_t>(x + j), static_cast<std::size_t>(y + i), z);
          const double vb = b.at(static_cast<std::size_t>(x + j), static_cast<std::size_t>(y + i), z);
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * va * vb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

inline double ssim_direct(const VoxelVolume& a, const VoxelVolume& b, double range = 1.0) {
  double s = 0;
  for (std::size_t z = 0; z < a.dims[2]; ++z) s += ssim_slice_direct(a, b, z, range);
  return s / static_cast<double>(a.dims[2]);
}

// ---------------------------------------------------------------------------
// Gaussian oracles
// ---------------------------------------------------------------------------

inline std::vector<std::uint32_t> brute_force_nearest(Vec3 p, const std::vector<Vec3>& pts, std::size_t k) {
  std::vector<std::uint32_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
    const Vec3 da = pts[a] - p, db = pts[b] - p;
    return dot(da, da) < dot(db, db);
  });
  idx.resize(k);
  return idx;
}

// Dense Gaussian density via Eigen's inverse and determinant.
inline double gaussian_density_eigen(Vec3 p, Vec3 u, const Eigen::Matrix3d& sigma) {
  const Eigen::Vector3d d(p.x - u.x, p.y - u.y, p.z - u.z);
  return std::pow(2 * std::numbers::pi, -1.5) / std::sqrt(sigma.determinant()) *
         std::exp(-0.5 * d.dot(sigma.inverse() * d));
}

inline Eigen::Matrix3d covariance_eigen(const Quat& r, Vec3 s) {
  const Eigen::Quaterniond q(r[0], r[1], r[2], r[3]);
  const Eigen::Matrix3d m = q.normalized().toRotationMatrix();
  return m * Eigen::Vector3d(s.x * s.x, s.y * s.y, s.z * s.z).asDiagonal() * m.transpose();
}

// F^g(p) summed over every Gaussian in the set.
inline std::vector<double> query_field_full(Vec3 p, const GaussianSet& gs) {
  std::vector<double> out(gs.c_g, 0.0);
  for (std::size_t i = 0; i < gs.n_g; ++i) {
    const Eigen::Matrix3d sigma = covariance_eigen({gs.quat[4 * i], gs.quat[4 * i + 1], gs.quat[4 * i + 2],
                                                    gs.quat[4 * i + 3]},
                                                   {gs.scale[3 * i], gs.scale[3 * i + 1], gs.scale[3 * i + 2]});
    const double w = gaussian_density_eigen(p, gs.center[i], sigma);
    for (std::size_t c = 0; c < gs.c_g; ++c) out[c] += w * gs.feat[i * gs.c_g + c];
  }
  return out;
}

// Pooled multi-view query done step by step: explicit projection, explicit
// bilinear weights, explicit max over the views that see p.
inline std::vector<double> query_pooled_oracle(const nn::Tensor<double>& maps, Vec3 p, const ScanGeometry& g,
                                               std::size_t stride) {
  const std::size_t k = maps.dim(0), c = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  std::vector<double> out(c, -std::numeric_limits<double>::infinity());
  for (std::size_t v = 0; v < k; ++v) {
    const DetectorCoord uv = project_homogeneous(g, v, p);
    const double x = uv.u / static_cast<double>(stride), y = uv.v / static_cast<double>(stride);
    const double x0 = std::floor(x), y0 = std::floor(y);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double xi = x0 + dx, yi = y0 + dy;
          if (xi < 0 || yi < 0 || xi >= static_cast<double>(w) || yi >= static_cast<double>(h)) continue;
          const double wt = (dx ? x - x0 : 1 - (x - x0)) * (dy ? y - y0 : 1 - (y - y0));
          s += wt * maps.values[((v * c + ch) * h + static_cast<std::size_t>(yi)) * w + static_cast<std::size_t>(xi)];
        }
      out[ch] = std::max(out[ch], s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

inline ScanGeometry tiny_geometry(std::size_t k = 3) {
  return make_circular_geometry(k, 100.0, 150.0, {16, 16}, 2.0);
}

// Small model whose every structural element is present.
inline ModelConfig tiny_config(std::size_t k = 3) {
  ModelConfig c;
  c.k_views = k;
  c.c = 4;
  c.c_t = 6;
  c.c_g = 3;
  c.v = 2;
  c.k_nearest = 3;
  c.encoder_widths = {4, 6};
  c.decoder_stages = 1;
  c.gaussian_hidden = 5;
  c.atten_hidden = {5};
  c.volume_dims = {8, 8, 8};
  c.volume_spacing = {3, 3, 3};
  c.training.points_per_sample = 64;
  return c;
}

inline VoxelVolume blob_volume(Dims3 dims, Vec3 spacing, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double half = 0.5 * static_cast<double>(dims[0] - 1) * spacing.x;
  return generate_phantom(random_phantom(rng, half), dims, spacing);
}

inline VoxelVolume random_volume(Dims3 dims, Vec3 spacing, std::uint64_t seed) {
  VoxelVolume v = VoxelVolume::centered(dims, spacing);
  std::mt19937_64 rng(seed);
  for (auto& x : v.data) x = static_cast<float>(uniform01(rng));
  return v;
}

// Randomizes every parameter (including the zero-initialized layers) so that
// gradient checks exercise all paths.
template <typename T>
void scramble(DifModel<T>& m, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < m.params.size(); ++i)
    for (auto& v : m.params.at(i).values) v = static_cast<T>(uniform(rng, -scale, scale));
}

inline ProjectionStack random_stack(const ScanGeometry& g, std::uint64_t seed) {
  ProjectionStack p(g);
  std::mt19937_64 rng(seed);
  for (auto& v : p.data) v = static_cast<float>(uniform(rng, 0.1, 1.0));
  return p;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("difgs_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(p);
  return p;
}

inline std::string file_bytes(const std::filesystem::path& p) { return read_text_file(p.string()); }

}  // namespace difgs::testing
