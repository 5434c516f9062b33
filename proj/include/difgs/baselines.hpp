#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "difgs/projector.hpp"

namespace difgs {

struct SartConfig {
  std::size_t iterations = 30;
  double relaxation = 0.5;
  std::size_t n_r = kDrrSamples;

  void validate() const {
    require(iterations >= 1, "sart: iterations must be >= 1");
    require(relaxation > 0 && relaxation < 2, "sart: relaxation must lie in (0, 2)");
    require(n_r >= 1, "sart: n_r must be >= 1");
  }
};

namespace detail {

// Sample indices i in [0, N_r] whose points may fall inside the volume;
// everything outside reads as zero so the sum matches the plain DRR.
inline bool sample_range(const Ray& ray, const Box& box, std::size_t n_r, std::size_t& i0, std::size_t& i1) {
  double t0, t1;
  if (!clip_ray_to_box(ray, box, t0, t1)) return false;
  const double n = static_cast<double>(n_r);
  i0 = static_cast<std::size_t>(std::max(0.0, std::floor(t0 * n) - 1));
  i1 = static_cast<std::size_t>(std::min(n, std::ceil(t1 * n) + 1));
  return i0 <= i1;
}

// Walks the trilinear footprint of one ray: fn(voxel, weight) with weights
// already scaled by the sample step.
template <typename Fn>
void ray_footprint(const VoxelVolume& vol, const Box& box, const Ray& ray, std::size_t n_r, Fn&& fn) {
  std::size_t i0, i1;
  if (!sample_range(ray, box, n_r, i0, i1)) return;
  const double inv = 1.0 / static_cast<double>(n_r);
  const double step = ray.length() * inv;
  TrilinearTaps taps;
  for (std::size_t i = i0; i <= i1; ++i) {
    if (!trilinear_taps(vol, ray.at(static_cast<double>(i) * inv), taps)) continue;
    for (int t = 0; t < 8; ++t) fn(taps.index[t], step * taps.weight[t]);
  }
}

inline constexpr std::size_t kSartRowsPerChunk = 8;

}  // namespace detail

// Forward projection with the SART system matrix (same samples as drr()).
inline ProjectionStack sart_forward(const VoxelVolume& vol, const ScanGeometry& geom, std::size_t n_r) {
  ProjectionStack out(geom);
  const Box box = vol.bounds();
  const std::size_t nu = geom.det_shape.n_u, nv = geom.det_shape.n_v;
  parallel_for(geom.n_views * nv, [&](std::size_t task) {
    const std::size_t k = task / nv, iv = task % nv;
    float* row = out.data.data() + k * nu * nv + iv * nu;
    for (std::size_t iu = 0; iu < nu; ++iu) {
      const Ray ray = pixel_ray(geom, k, {static_cast<double>(iu), static_cast<double>(iv)});
      double acc = 0;
      detail::ray_footprint(vol, box, ray, n_r, [&](std::size_t j, double w) { acc += w * vol.data[j]; });
      row[iu] = static_cast<float>(acc);
    }
  });
  return out;
}

inline double projection_residual_norm(const VoxelVolume& vol, const ProjectionStack& proj, std::size_t n_r) {
  const auto est = sart_forward(vol, proj.geometry, n_r);
  double s = 0;
  for (std::size_t i = 0; i < est.data.size(); ++i) {
    const double d = static_cast<double>(proj.data[i]) - est.data[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline constexpr double kSartDivergenceLimit = 1e3;

// One SART sweep (one view per sub-iteration) applied to `x` in place.
inline void sart_sweep(VoxelVolume& x, const ProjectionStack& proj, const SartConfig& cfg) {
  const auto& geom = proj.geometry;
  const Box box = x.bounds();
  const std::size_t nu = geom.det_shape.n_u, nv = geom.det_shape.n_v;
  const auto chunks = make_chunks(nv, detail::kSartRowsPerChunk);
  std::vector<std::vector<double>> num(chunks.size()), den(chunks.size());
  std::vector<double> residual(nu * nv);
  for (std::size_t k = 0; k < geom.n_views; ++k) {
    const auto img = proj.image(k);
    // normalized residual per ray
    parallel_for(nv, [&](std::size_t iv) {
      for (std::size_t iu = 0; iu < nu; ++iu) {
        const Ray ray = pixel_ray(geom, k, {static_cast<double>(iu), static_cast<double>(iv)});
        double ax = 0, row_sum = 0;
        detail::ray_footprint(x, box, ray, cfg.n_r, [&](std::size_t j, double w) {
          ax += w * x.data[j];
          row_sum += w;
        });
        const std::size_t p = iv * nu + iu;
        residual[p] = row_sum > 1e-12 ? (img[p] - ax) / row_sum : 0.0;
      }
    });
    // backprojection into per-chunk buffers, reduced in chunk order
    parallel_for(chunks.size(), [&](std::size_t c) {
      num[c].assign(x.size(), 0.0);
      den[c].assign(x.size(), 0.0);
      for (std::size_t iv = chunks[c].begin; iv < chunks[c].end; ++iv)
        for (std::size_t iu = 0; iu < nu; ++iu) {
          const std::size_t p = iv * nu + iu;
          const Ray ray = pixel_ray(geom, k, {static_cast<double>(iu), static_cast<double>(iv)});
          detail::ray_footprint(x, box, ray, cfg.n_r, [&](std::size_t j, double w) {
            num[c][j] += w * residual[p];
            den[c][j] += w;
          });
        }
    });
    for (std::size_t c = 1; c < chunks.size(); ++c)
      for (std::size_t j = 0; j < x.size(); ++j) {
        num[0][j] += num[c][j];
        den[0][j] += den[c][j];
      }
    for (std::size_t j = 0; j < x.size(); ++j)
      if (den[0][j] > 1e-12) x.data[j] += static_cast<float>(cfg.relaxation * num[0][j] / den[0][j]);
  }
  for (auto& v : x.data) {
    if (!std::isfinite(v) || std::abs(v) > kSartDivergenceLimit) throw Divergence("sart: volume diverged");
    v = std::max(v, 0.0f);
  }
}

struct SartTrace {
  VoxelVolume volume;
  std::vector<double> residual_norms;  // after each iteration
};

inline SartTrace sart_reconstruct_traced(const ProjectionStack& proj, VoxelVolume x0, const SartConfig& cfg,
                                         bool track_residual) {
  cfg.validate();
  SartTrace out{std::move(x0), {}};
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    sart_sweep(out.volume, proj, cfg);
    if (track_residual) out.residual_norms.push_back(projection_residual_norm(out.volume, proj, cfg.n_r));
  }
  return out;
}

inline VoxelVolume sart_reconstruct(const ProjectionStack& proj, Dims3 dims, Vec3 spacing, const SartConfig& cfg = {}) {
  return sart_reconstruct_traced(proj, VoxelVolume::centered(dims, spacing), cfg, false).volume;
}

// Ram-Lak kernel sampled at the virtual-detector pitch tau; it equals the
// frequency ramp band-limited at the detector Nyquist rate.
inline std::vector<double> ramp_kernel(std::size_t n, double tau) {
  std::vector<double> h(2 * n - 1, 0.0);
  const long c = static_cast<long>(n) - 1;
  for (long m = -c; m <= c; ++m) {
    double v = 0;
    if (m == 0)
      v = 1.0 / (4.0 * tau * tau);
    else if (m % 2 != 0)
      v = -1.0 / (static_cast<double>(m * m) * std::numbers::pi * std::numbers::pi * tau * tau);
    h[static_cast<std::size_t>(m + c)] = v;
  }
  return h;
}

// Cosine-weighted, ramp-filtered projections (one row at a time).
inline std::vector<double> fdk_filter(const ProjectionStack& proj) {
  const auto& g = proj.geometry;
  const std::size_t nu = g.det_shape.n_u, nv = g.det_shape.n_v;
  const double tau = g.det_spacing * g.sid / g.sdd;
  const auto h = ramp_kernel(nu, tau);
  const double cu = 0.5 * static_cast<double>(nu - 1), cv = 0.5 * static_cast<double>(nv - 1);
  std::vector<double> q(proj.data.size(), 0.0);
  parallel_for(g.n_views * nv, [&](std::size_t task) {
    const std::size_t k = task / nv, iv = task % nv;
    const float* row = proj.data.data() + k * nu * nv + iv * nu;
    const double b = (static_cast<double>(iv) - cv) * tau;
    std::vector<double> w(nu);
    for (std::size_t iu = 0; iu < nu; ++iu) {
      const double a = (static_cast<double>(iu) - cu) * tau;
      w[iu] = row[iu] * g.sid / std::sqrt(g.sid * g.sid + a * a + b * b);
    }
    double* out = q.data() + k * nu * nv + iv * nu;
    for (std::size_t n = 0; n < nu; ++n) {
      double acc = 0;
      for (std::size_t m = 0; m < nu; ++m) acc += w[m] * h[n + (nu - 1) - m];
      out[n] = tau * acc;
    }
  });
  return q;
}

// Simplified FDK for the 180-degree scan: cosine weighting, ramp filter and
// distance-weighted backprojection, no short-scan (Parker) weights.
inline VoxelVolume fdk_reconstruct(const ProjectionStack& proj, Dims3 dims, Vec3 spacing) {
  const auto& g = proj.geometry;
  require(proj.data.size() == g.n_views * g.pixels_per_view(), "fdk: projection data does not match geometry");
  VoxelVolume out = VoxelVolume::centered(dims, spacing);
  const auto q = fdk_filter(proj);
  const std::size_t nu = g.det_shape.n_u, nv = g.det_shape.n_v;
  const double d_beta = std::numbers::pi / static_cast<double>(g.n_views);
  parallel_for(dims[2], [&](std::size_t kz) {
    for (std::size_t jy = 0; jy < dims[1]; ++jy)
      for (std::size_t ix = 0; ix < dims[0]; ++ix) {
        const Vec3 p = out.voxel_center(ix, jy, kz);
        double acc = 0;
        for (std::size_t k = 0; k < g.n_views; ++k) {
          const auto& pose = g.poses[k];
          const double depth = dot(p - pose.source_pos, pose.principal_dir);
          DetectorCoord uv;
          if (!try_project_point(g, k, p, uv)) continue;
          const double fu = std::floor(uv.u), fv = std::floor(uv.v);
          const double tu = uv.u - fu, tv = uv.v - fv;
          const long u0 = static_cast<long>(fu), v0 = static_cast<long>(fv);
          double val = 0;
          for (int b = 0; b < 2; ++b)
            for (int a = 0; a < 2; ++a) {
              const long uu = u0 + a, vv = v0 + b;
              if (uu < 0 || vv < 0 || uu >= static_cast<long>(nu) || vv >= static_cast<long>(nv)) continue;
              val += (a ? tu : 1 - tu) * (b ? tv : 1 - tv) *
                     q[k * nu * nv + static_cast<std::size_t>(vv) * nu + static_cast<std::size_t>(uu)];
            }
          const double ratio = depth / g.sid;
          acc += val / (ratio * ratio);
        }
        out.at(ix, jy, kz) = static_cast<float>(d_beta * acc);
      }
  });
  return out;
}

}  // namespace difgs
