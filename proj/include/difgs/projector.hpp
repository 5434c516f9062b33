#pragma once

#include <span>
#include <vector>

#include "difgs/geometry.hpp"
#include "difgs/volume.hpp"

namespace difgs {

// K detector images of accumulated attenuation e(R), u-fastest per image.
struct ProjectionStack {
  ScanGeometry geometry;
  std::vector<float> data;

  ProjectionStack() = default;
  explicit ProjectionStack(ScanGeometry g)
      : geometry(std::move(g)), data(geometry.n_views * geometry.pixels_per_view(), 0.0f) {}

  std::size_t n_views() const { return geometry.n_views; }
  std::span<float> image(std::size_t k) {
    const std::size_t n = geometry.pixels_per_view();
    return {data.data() + k * n, n};
  }
  std::span<const float> image(std::size_t k) const {
    const std::size_t n = geometry.pixels_per_view();
    return {data.data() + k * n, n};
  }
  float at(std::size_t k, std::size_t iu, std::size_t iv) const {
    return data[k * geometry.pixels_per_view() + iv * geometry.det_shape.n_u + iu];
  }
  float max_value() const {
    float m = 0;
    for (float v : data) m = std::max(m, v);
    return m;
  }
};

inline constexpr std::size_t kDrrSamples = 512;

// Discrete ray attenuation integral with N_r + 1 uniformly spaced samples
// from the source (i = 0) to the detector point (i = N_r), inclusive:
//   e = |p_d - p_s| * (1/N_r) * sum_i mu(p_s + (i/N_r)(p_d - p_s)).
template <typename Mu>
double line_integral(Mu&& mu, const Ray& ray, std::size_t n_r) {
  require(n_r >= 1, "line_integral: n_r must be >= 1");
  const double inv = 1.0 / static_cast<double>(n_r);
  double sum = 0;
  for (std::size_t i = 0; i <= n_r; ++i) sum += mu(ray.at(static_cast<double>(i) * inv));
  return ray.length() * sum * inv;
}

inline ProjectionStack drr(const VoxelVolume& vol, const ScanGeometry& geom,
                           std::size_t n_r = kDrrSamples) {
  require(n_r >= 1, "drr: n_r must be >= 1");
  ProjectionStack out(geom);
  const std::size_t nu = geom.det_shape.n_u, nv = geom.det_shape.n_v;
  auto mu = [&](Vec3 p) { return sample_trilinear(vol, p); };
  // one task per detector row; each writes a disjoint span of the output
  parallel_for(geom.n_views * nv, [&](std::size_t task) {
    const std::size_t k = task / nv, iv = task % nv;
    float* row = out.data.data() + k * nu * nv + iv * nu;
    for (std::size_t iu = 0; iu < nu; ++iu) {
      const Ray ray = pixel_ray(geom, k, {static_cast<double>(iu), static_cast<double>(iv)});
      row[iu] = static_cast<float>(line_integral(mu, ray, n_r));
    }
  });
  return out;
}

// Parametric interval [t0, t1] of `ray` inside `box`; false when it misses.
inline bool clip_ray_to_box(const Ray& ray, const Box& box, double& t0, double& t1) {
  t0 = 0.0;
  t1 = 1.0;
  const Vec3 d = ray.p_d - ray.p_s;
  for (std::size_t a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (ray.p_s[a] < box.lo[a] || ray.p_s[a] > box.hi[a]) return false;
      continue;
    }
    double ta = (box.lo[a] - ray.p_s[a]) / d[a];
    double tb = (box.hi[a] - ray.p_s[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t1 > t0;
}

}  // namespace difgs
