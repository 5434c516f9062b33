#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "difgs/common.hpp"

namespace difgs {

using Mat3 = std::array<std::array<double, 3>, 3>;
using Quat = std::array<double, 4>;  // (r1, r2, r3, r4), r1 is the scalar part

inline Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}
inline Mat3 transpose(const Mat3& a) {
  Mat3 t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = a[j][i];
  return t;
}
inline double determinant(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

inline constexpr double kInvSqrtTwoPiCubed = 0.063493635934240969;  // (2*pi)^(-3/2)

// ---------------------------------------------------------------------------
// Grid of initial positions
// ---------------------------------------------------------------------------

// Centroids of a v x v x v partition of `bounds`, x fastest.
inline std::vector<Vec3> init_positions(std::size_t v, const Box& bounds) {
  require(v >= 1, "init_positions: v must be >= 1");
  const Vec3 ext = bounds.extent();
  require(ext.x > 0 && ext.y > 0 && ext.z > 0, "init_positions: degenerate bounds");
  std::vector<Vec3> out;
  out.reserve(v * v * v);
  const double n = static_cast<double>(v);
  for (std::size_t k = 0; k < v; ++k)
    for (std::size_t j = 0; j < v; ++j)
      for (std::size_t i = 0; i < v; ++i)
        out.push_back({bounds.lo.x + (static_cast<double>(i) + 0.5) * ext.x / n,
                       bounds.lo.y + (static_cast<double>(j) + 0.5) * ext.y / n,
                       bounds.lo.z + (static_cast<double>(k) + 0.5) * ext.z / n});
  return out;
}

inline double squared_distance(Vec3 a, Vec3 b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

namespace detail {
struct Candidate {
  double d2;
  std::uint32_t index;
  friend bool operator<(const Candidate& a, const Candidate& b) {
    return a.d2 < b.d2 || (a.d2 == b.d2 && a.index < b.index);
  }
};
}  // namespace detail

// k nearest points of an arbitrary set (linear scan). Ties by ascending index.
inline std::vector<std::uint32_t> nearest_k(Vec3 p, std::span<const Vec3> points, std::size_t k) {
  require(k <= points.size(), "nearest_k: k exceeds the number of points");
  std::vector<detail::Candidate> c(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    c[i] = {squared_distance(p, points[i]), static_cast<std::uint32_t>(i)};
  std::partial_sort(c.begin(), c.begin() + static_cast<long>(k), c.end());
  std::vector<std::uint32_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = c[i].index;
  return out;
}

// The fixed initial positions of the Gaussians: centroids of a regular grid.
struct GaussianGrid {
  std::size_t v = 0;
  Box bounds;
  Vec3 pitch;
  std::vector<Vec3> u_hat;

  GaussianGrid() = default;
  GaussianGrid(std::size_t v_, Box b) : v(v_), bounds(b), u_hat(init_positions(v_, b)) {
    const double n = static_cast<double>(v);
    pitch = {b.extent().x / n, b.extent().y / n, b.extent().z / n};
  }

  std::size_t size() const { return u_hat.size(); }
  double min_pitch() const { return std::min({pitch.x, pitch.y, pitch.z}); }

  // Same result as the linear scan, but only inspects a growing block of
  // cells around p until no point outside the block can compete.
  std::vector<std::uint32_t> nearest_k(Vec3 p, std::size_t k) const {
    require(k <= u_hat.size(), "nearest_k: k exceeds the number of Gaussians");
    std::vector<std::uint32_t> out(k);
    nearest_k_into(p, k, out.data());
    return out;
  }

  void nearest_k_into(Vec3 p, std::size_t k, std::uint32_t* out) const {
    if (k == 0) return;
    const long n = static_cast<long>(v);
    long cell[3];
    for (std::size_t a = 0; a < 3; ++a) {
      const double f = std::floor((p[a] - bounds.lo[a]) / pitch[a]);
      cell[a] = f < 0 ? 0 : (f > static_cast<double>(n - 1) ? n - 1 : static_cast<long>(f));
    }
    std::vector<detail::Candidate> cand;
    for (long r = 1;; ++r) {
      long lo[3], hi[3];
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(0L, cell[a] - r);
        hi[a] = std::min(n - 1, cell[a] + r);
      }
      cand.clear();
      for (long z = lo[2]; z <= hi[2]; ++z)
        for (long y = lo[1]; y <= hi[1]; ++y)
          for (long x = lo[0]; x <= hi[0]; ++x) {
            const auto idx = static_cast<std::uint32_t>((z * n + y) * n + x);
            cand.push_back({squared_distance(p, u_hat[idx]), idx});
          }
      const bool whole = lo[0] == 0 && lo[1] == 0 && lo[2] == 0 && hi[0] == n - 1 && hi[1] == n - 1 &&
                         hi[2] == n - 1;
      if (cand.size() >= k) {
        std::partial_sort(cand.begin(), cand.begin() + static_cast<long>(k), cand.end());
        // Anything outside the block is at least this far along some axis.
        double bound = std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < 3; ++a) {
          const double lo_a = bounds.lo[a];
          if (lo[a] > 0) {
            const double c = lo_a + (static_cast<double>(lo[a] - 1) + 0.5) * pitch[a];
            bound = std::min(bound, (p[a] - c) * (p[a] - c));
          }
          if (hi[a] < n - 1) {
            const double c = lo_a + (static_cast<double>(hi[a] + 1) + 0.5) * pitch[a];
            bound = std::min(bound, (p[a] - c) * (p[a] - c));
          }
        }
        if (whole || cand[k - 1].d2 < bound) {
          for (std::size_t i = 0; i < k; ++i) out[i] = cand[i].index;
          return;
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Covariance algebra
// ---------------------------------------------------------------------------

inline Quat normalize_quaternion(Quat r) {
  const double n = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]);
  if (n < 1e-12) throw ZeroNorm("quaternion has zero norm");
  return {r[0] / n, r[1] / n, r[2] / n, r[3] / n};
}

// Rotation matrix of a unit quaternion (r1 scalar part).
inline Mat3 rotation_from_quaternion(const Quat& r) {
  if (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3] < 1e-24)
    throw ZeroNorm("rotation_from_quaternion: zero-norm quaternion");
  const double r1 = r[0], r2 = r[1], r3 = r[2], r4 = r[3];
  return {{{1 - 2 * r3 * r3 - 2 * r4 * r4, 2 * r2 * r3 - 2 * r1 * r4, 2 * r2 * r4 + 2 * r1 * r3},
           {2 * r2 * r3 + 2 * r1 * r4, 1 - 2 * r2 * r2 - 2 * r4 * r4, 2 * r3 * r4 - 2 * r1 * r2},
           {2 * r2 * r4 - 2 * r1 * r3, 2 * r3 * r4 + 2 * r1 * r2, 1 - 2 * r2 * r2 - 2 * r3 * r3}}};
}

// Back-propagates dL/dM (M = rotation_from_quaternion(r)) onto r.
inline Quat rotation_from_quaternion_backward(const Quat& r, const Mat3& g) {
  const double r1 = r[0], r2 = r[1], r3 = r[2], r4 = r[3];
  return {2 * (-g[0][1] * r4 + g[0][2] * r3 + g[1][0] * r4 - g[1][2] * r2 - g[2][0] * r3 + g[2][1] * r2),
          2 * (g[0][1] * r3 + g[0][2] * r4 + g[1][0] * r3 - 2 * g[1][1] * r2 - g[1][2] * r1 + g[2][0] * r4 +
               g[2][1] * r1 - 2 * g[2][2] * r2),
          2 * (-2 * g[0][0] * r3 + g[0][1] * r2 + g[0][2] * r1 + g[1][0] * r2 + g[1][2] * r4 - g[2][0] * r1 +
               g[2][1] * r4 - 2 * g[2][2] * r3),
          2 * (-2 * g[0][0] * r4 - g[0][1] * r1 + g[0][2] * r2 + g[1][0] * r1 - 2 * g[1][1] * r4 + g[1][2] * r3 +
               g[2][0] * r2 + g[2][1] * r3)};
}

// Sigma = L L^T with L = M_r M_s, i.e. M_r diag(s^2) M_r^T.
inline Mat3 build_covariance(const Quat& r, const Vec3& s) {
  const Mat3 m = rotation_from_quaternion(r);
  Mat3 sigma{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) sigma[i][j] += m[i][k] * s[k] * s[k] * m[j][k];
  return sigma;
}

// Normalized Gaussian density with covariance sigma evaluated at p.
inline double gaussian_weight(Vec3 p, Vec3 u, const Mat3& sigma) {
  const double det = determinant(sigma);
  if (det < 1e-30) throw SingularCovariance("gaussian_weight: |Sigma| below 1e-30");
  // adjugate / det
  Mat3 inv{};
  inv[0][0] = (sigma[1][1] * sigma[2][2] - sigma[1][2] * sigma[2][1]) / det;
  inv[0][1] = (sigma[0][2] * sigma[2][1] - sigma[0][1] * sigma[2][2]) / det;
  inv[0][2] = (sigma[0][1] * sigma[1][2] - sigma[0][2] * sigma[1][1]) / det;
  inv[1][0] = (sigma[1][2] * sigma[2][0] - sigma[1][0] * sigma[2][2]) / det;
  inv[1][1] = (sigma[0][0] * sigma[2][2] - sigma[0][2] * sigma[2][0]) / det;
  inv[1][2] = (sigma[0][2] * sigma[1][0] - sigma[0][0] * sigma[1][2]) / det;
  inv[2][0] = (sigma[1][0] * sigma[2][1] - sigma[1][1] * sigma[2][0]) / det;
  inv[2][1] = (sigma[0][1] * sigma[2][0] - sigma[0][0] * sigma[2][1]) / det;
  inv[2][2] = (sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0]) / det;
  const Vec3 d = p - u;
  double q = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) q += d[i] * inv[i][j] * d[j];
  return kInvSqrtTwoPiCubed / std::sqrt(det) * std::exp(-0.5 * q);
}

// ---------------------------------------------------------------------------
// Gaussian set and field query
// ---------------------------------------------------------------------------

// Bounds applied when turning raw head outputs into Gaussian parameters.
struct GaussianActivation {
  Vec3 offset_limit;  // |delta_u| per axis < half the grid pitch
  double s_min = 0, s_max = 0;

  static GaussianActivation for_grid(const GaussianGrid& grid) {
    const double cell = grid.min_pitch();
    return {0.5 * grid.pitch, 1e-3 * cell, 4.0 * cell};
  }
};

inline constexpr std::size_t gaussian_param_width(std::size_t c_g) { return 3 + c_g + 4 + 3; }

/**
 * N_g Gaussians around fixed initial positions. Parameters are kept in
 * double; the raw head outputs are retained so gradients can be mapped back
 * through the activations.
 */
struct GaussianSet {
  const GaussianGrid* grid = nullptr;
  GaussianActivation act;
  std::size_t n_g = 0, c_g = 0;
  std::vector<double> raw;      // [n_g, 3 + c_g + 4 + 3]
  std::vector<double> delta_u;  // [n_g, 3]
  std::vector<double> feat;     // [n_g, c_g]
  std::vector<double> quat;     // [n_g, 4], unit
  std::vector<double> scale;    // [n_g, 3]
  // derived per Gaussian
  std::vector<Vec3> center;     // u_hat + delta_u
  std::vector<Mat3> rot;        // M_r
  std::vector<double> norm;     // (2 pi)^(-3/2) / (s1 s2 s3)

  Vec3 u(std::size_t i) const { return center[i]; }
  std::span<const double> features(std::size_t i) const { return {feat.data() + i * c_g, c_g}; }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void refresh_derived(GaussianSet& gs) {
  gs.center.resize(gs.n_g);
  gs.rot.resize(gs.n_g);
  gs.norm.resize(gs.n_g);
  for (std::size_t i = 0; i < gs.n_g; ++i) {
    const Vec3 uh = gs.grid->u_hat[i];
    gs.center[i] = {uh.x + gs.delta_u[3 * i], uh.y + gs.delta_u[3 * i + 1], uh.z + gs.delta_u[3 * i + 2]};
    gs.rot[i] = rotation_from_quaternion({gs.quat[4 * i], gs.quat[4 * i + 1], gs.quat[4 * i + 2], gs.quat[4 * i + 3]});
    const double vol = gs.scale[3 * i] * gs.scale[3 * i + 1] * gs.scale[3 * i + 2];
    if (vol * vol < 1e-30) throw SingularCovariance("Gaussian " + std::to_string(i) + ": |Sigma| below 1e-30");
    gs.norm[i] = kInvSqrtTwoPiCubed / vol;
  }
}

// Builds a set from raw head outputs laid out as [delta_u | F^g | r | s]:
//   delta_u = tanh(a) * pitch/2,  r = normalize(b + (1,0,0,0)),
//   s = s_min + (s_max - s_min) * sigmoid(c).
inline GaussianSet activate_gaussians(const GaussianGrid& grid, std::size_t c_g, std::span<const double> raw) {
  const std::size_t width = gaussian_param_width(c_g);
  if (raw.size() != grid.size() * width)
    throw ShapeMismatch("activate_gaussians: raw output has " + std::to_string(raw.size()) + " values, expected " +
                        std::to_string(grid.size() * width));
  GaussianSet gs;
  gs.grid = &grid;
  gs.act = GaussianActivation::for_grid(grid);
  gs.n_g = grid.size();
  gs.c_g = c_g;
  gs.raw.assign(raw.begin(), raw.end());
  gs.delta_u.resize(3 * gs.n_g);
  gs.feat.resize(c_g * gs.n_g);
  gs.quat.resize(4 * gs.n_g);
  gs.scale.resize(3 * gs.n_g);
  for (std::size_t i = 0; i < gs.n_g; ++i) {
    const double* r = raw.data() + i * width;
    for (std::size_t a = 0; a < 3; ++a) gs.delta_u[3 * i + a] = std::tanh(r[a]) * gs.act.offset_limit[a];
    std::copy_n(r + 3, c_g, gs.feat.data() + i * c_g);
    const Quat q = normalize_quaternion({r[3 + c_g] + 1.0, r[4 + c_g], r[5 + c_g], r[6 + c_g]});
    std::copy(q.begin(), q.end(), gs.quat.data() + 4 * i);
    for (std::size_t a = 0; a < 3; ++a)
      gs.scale[3 * i + a] = gs.act.s_min + (gs.act.s_max - gs.act.s_min) * sigmoid(r[7 + c_g + a]);
  }
  refresh_derived(gs);
  return gs;
}

// Gradients w.r.t. the activated Gaussian parameters.
struct GaussianGrad {
  std::vector<double> delta_u, feat, quat, scale;

  explicit GaussianGrad(const GaussianSet& gs = {})
      : delta_u(3 * gs.n_g, 0.0), feat(gs.c_g * gs.n_g, 0.0), quat(4 * gs.n_g, 0.0), scale(3 * gs.n_g, 0.0) {}

  GaussianGrad& operator+=(const GaussianGrad& o) {
    auto add = [](std::vector<double>& a, const std::vector<double>& b) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    add(delta_u, o.delta_u);
    add(feat, o.feat);
    add(quat, o.quat);
    add(scale, o.scale);
    return *this;
  }
};

// Maps activated-parameter gradients back onto the raw head outputs.
inline std::vector<double> activation_backward(const GaussianSet& gs, const GaussianGrad& g) {
  const std::size_t width = gaussian_param_width(gs.c_g);
  std::vector<double> d(gs.raw.size(), 0.0);
  for (std::size_t i = 0; i < gs.n_g; ++i) {
    const double* r = gs.raw.data() + i * width;
    double* dr = d.data() + i * width;
    for (std::size_t a = 0; a < 3; ++a) {
      const double t = std::tanh(r[a]);
      dr[a] = g.delta_u[3 * i + a] * gs.act.offset_limit[a] * (1 - t * t);
    }
    for (std::size_t c = 0; c < gs.c_g; ++c) dr[3 + c] = g.feat[i * gs.c_g + c];
    const double q[4] = {r[3 + gs.c_g] + 1.0, r[4 + gs.c_g], r[5 + gs.c_g], r[6 + gs.c_g]};
    const double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    const double* u = gs.quat.data() + 4 * i;
    const double* gu = g.quat.data() + 4 * i;
    const double udg = u[0] * gu[0] + u[1] * gu[1] + u[2] * gu[2] + u[3] * gu[3];
    for (std::size_t a = 0; a < 4; ++a) dr[3 + gs.c_g + a] = (gu[a] - u[a] * udg) / qn;
    for (std::size_t a = 0; a < 3; ++a) {
      const double sg = sigmoid(r[7 + gs.c_g + a]);
      dr[7 + gs.c_g + a] = g.scale[3 * i + a] * (gs.act.s_max - gs.act.s_min) * sg * (1 - sg);
    }
  }
  return d;
}

// Per-neighbour intermediate values of one field query.
struct FieldTap {
  std::uint32_t index = 0;
  double weight = 0;
  Vec3 d;       // p - u
  Vec3 local;   // M_r^T d
};

inline constexpr std::size_t kMaxTaps = 8;

inline FieldTap field_tap(const GaussianSet& gs, std::uint32_t i, Vec3 p) {
  FieldTap t;
  t.index = i;
  t.d = p - gs.center[i];
  const Mat3& m = gs.rot[i];
  double q = 0;
  for (int j = 0; j < 3; ++j) {
    t.local[j] = m[0][j] * t.d.x + m[1][j] * t.d.y + m[2][j] * t.d.z;
    const double s = gs.scale[3 * i + j];
    q += t.local[j] * t.local[j] / (s * s);
  }
  t.weight = gs.norm[i] * std::exp(-0.5 * q);
  return t;
}

// Weight of Gaussian i at p, evaluated from r and s without forming Sigma.
inline double gaussian_weight(const GaussianSet& gs, std::uint32_t i, Vec3 p) { return field_tap(gs, i, p).weight; }

// F^g(p) = sum over the k nearest (by initial position) Gaussians of w_i F^g_i.
// `taps` receives k entries for use by the backward pass.
template <typename T>
void query_field(Vec3 p, const GaussianSet& gs, std::size_t k, T* out, std::vector<FieldTap>& taps) {
  require(k >= 1 && k <= gs.n_g, "query_field: k must be in [1, N_g]");
  std::uint32_t idx_small[kMaxTaps];
  std::vector<std::uint32_t> idx_big;
  std::uint32_t* idx = idx_small;
  if (k > kMaxTaps) {
    idx_big.resize(k);
    idx = idx_big.data();
  }
  gs.grid->nearest_k_into(p, k, idx);
  taps.resize(k);
  std::vector<double> acc(gs.c_g, 0.0);
  for (std::size_t n = 0; n < k; ++n) {
    taps[n] = field_tap(gs, idx[n], p);
    const double w = taps[n].weight;
    const double* f = gs.feat.data() + static_cast<std::size_t>(idx[n]) * gs.c_g;
    for (std::size_t c = 0; c < gs.c_g; ++c) acc[c] += w * f[c];
  }
  for (std::size_t c = 0; c < gs.c_g; ++c) out[c] = static_cast<T>(acc[c]);
}

template <typename T>
std::vector<T> query_field(Vec3 p, const GaussianSet& gs, std::size_t k = 3) {
  std::vector<T> out(gs.c_g);
  std::vector<FieldTap> taps;
  query_field(p, gs, k, out.data(), taps);
  return out;
}

// Accumulates dL/d{delta_u, F^g, r, s} given dL/dF^g(p) = g.
template <typename T>
void query_field_backward(const GaussianSet& gs, std::span<const FieldTap> taps, const T* g, GaussianGrad& grad) {
  for (const FieldTap& t : taps) {
    const std::size_t i = t.index;
    const double* f = gs.feat.data() + i * gs.c_g;
    double* df = grad.feat.data() + i * gs.c_g;
    double gw = 0;
    for (std::size_t c = 0; c < gs.c_g; ++c) {
      const double gc = static_cast<double>(g[c]);
      df[c] += t.weight * gc;
      gw += gc * f[c];
    }
    if (gw == 0.0) continue;
    const double a = gw * t.weight;
    const Mat3& m = gs.rot[i];
    double ys[3];  // local / s^2
    for (int j = 0; j < 3; ++j) {
      const double s = gs.scale[3 * i + j];
      ys[j] = t.local[j] / (s * s);
      // dw/ds_j = w (-1/s_j + y_j^2 / s_j^3)
      grad.scale[3 * i + j] += a * (-1.0 / s + t.local[j] * t.local[j] / (s * s * s));
    }
    // dw/du = w Sigma^{-1} d = w M_r (y / s^2)
    for (int r = 0; r < 3; ++r)
      grad.delta_u[3 * i + r] += a * (m[r][0] * ys[0] + m[r][1] * ys[1] + m[r][2] * ys[2]);
    // dw/dM[k][j] = -w y_j / s_j^2 d_k
    Mat3 gm{};
    for (int kk = 0; kk < 3; ++kk)
      for (int j = 0; j < 3; ++j) gm[kk][j] = -a * ys[j] * t.d[kk];
    const Quat dq = rotation_from_quaternion_backward(
        {gs.quat[4 * i], gs.quat[4 * i + 1], gs.quat[4 * i + 2], gs.quat[4 * i + 3]}, gm);
    for (int c = 0; c < 4; ++c) grad.quat[4 * i + c] += dq[c];
  }
}

}  // namespace difgs
