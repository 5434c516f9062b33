#pragma once

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "difgs/dif_model.hpp"

namespace difgs {

// Test-time optimization settings. `lr` is absolute; the default is 0.1x the
// final training learning rate for the default schedule (0.01 * 0.001).
struct TtoConfig {
  std::size_t steps = 100;
  double lr = 1e-6;
  double momentum = nn::kMomentum;
  std::size_t rays_per_step = 256;
  std::size_t n_r = 192;
  // mu is taken as 0 outside the reconstruction volume (same as the DRR).
  bool clip_to_volume = true;
};

struct RaySample {
  Ray ray;
  std::size_t view = 0;
  std::size_t iu = 0, iv = 0;
  float e_true = 0;
};

// n distinct detector pixels drawn uniformly over all views.
inline std::vector<RaySample> sample_rays(const ProjectionStack& proj, std::size_t n, std::uint64_t seed) {
  require(n >= 1, "sample_rays: n must be >= 1");
  const auto& g = proj.geometry;
  const std::size_t per_view = g.pixels_per_view(), total = g.n_views * per_view;
  if (n > total)
    throw InvalidParameter("sample_rays: requested " + std::to_string(n) + " rays but only " +
                           std::to_string(total) + " pixels exist");
  std::vector<std::uint32_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0u);
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (total - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<RaySample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t flat = idx[i];
    auto& r = out[i];
    r.view = flat / per_view;
    r.iv = (flat % per_view) / g.det_shape.n_u;
    r.iu = flat % g.det_shape.n_u;
    r.ray = pixel_ray(g, r.view, {static_cast<double>(r.iu), static_cast<double>(r.iv)});
    r.e_true = proj.data[flat];
  }
  return out;
}

// Sample points of a ray bundle under the line-integral rule, grouped per ray.
struct RayPoints {
  std::vector<Vec3> points;
  std::vector<std::size_t> offsets;  // points of ray r: [offsets[r], offsets[r+1])
  std::vector<double> step;          // |p_d - p_s| / N_r per ray
};

inline RayPoints ray_points(const std::vector<Ray>& rays, std::size_t n_r, const Box* clip) {
  require(n_r >= 1, "render: n_r must be >= 1");
  RayPoints rp;
  rp.offsets.push_back(0);
  const double inv = 1.0 / static_cast<double>(n_r);
  for (const auto& ray : rays) {
    rp.step.push_back(ray.length() * inv);
    for (std::size_t i = 0; i <= n_r; ++i) {
      const Vec3 p = ray.at(static_cast<double>(i) * inv);
      if (clip && !clip->contains(p)) continue;
      rp.points.push_back(p);
    }
    rp.offsets.push_back(rp.points.size());
  }
  return rp;
}

template <typename T>
struct RenderedRays {
  RayPoints geometry;
  PointBatch<T> batch;
  std::vector<double> e_hat;
};

template <typename T>
RenderedRays<T> render_rays(const DifModel<T>& model, const ForwardContext<T>& ctx, const std::vector<Ray>& rays,
                            std::size_t n_r, bool clip_to_volume, bool keep_trace) {
  RenderedRays<T> out;
  const Box box = model.config.field_bounds();
  out.geometry = ray_points(rays, n_r, clip_to_volume ? &box : nullptr);
  out.batch = forward_points(model, ctx, out.geometry.points, keep_trace);
  out.e_hat.resize(rays.size());
  for (std::size_t r = 0; r < rays.size(); ++r) {
    double sum = 0;
    for (std::size_t i = out.geometry.offsets[r]; i < out.geometry.offsets[r + 1]; ++i)
      sum += static_cast<double>(out.batch.values[i]);
    out.e_hat[r] = out.geometry.step[r] * sum;
  }
  return out;
}

// e_hat(R) with mu = the model's prediction.
template <typename T>
double render_ray(const DifModel<T>& model, const ForwardContext<T>& ctx, const Ray& ray, std::size_t n_r,
                  bool clip_to_volume = true) {
  return render_rays(model, ctx, std::vector<Ray>{ray}, n_r, clip_to_volume, false).e_hat[0];
}

// Mean squared projection error over `rays` (measurements normalized by
// `scale`); accumulates parameter gradients into the model when requested.
template <typename T>
double projection_loss(DifModel<T>& model, const ForwardContext<T>& ctx, const std::vector<RaySample>& samples,
                       std::size_t n_r, bool clip_to_volume, double scale, bool with_grad) {
  std::vector<Ray> rays(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) rays[i] = samples[i].ray;
  const auto rr = render_rays(model, ctx, rays, n_r, clip_to_volume, with_grad);
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  const double inv_s = 1.0 / scale;
  double loss = 0;
  std::vector<T> dv(rr.geometry.points.size(), T(0));
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const double res = (rr.e_hat[r] - static_cast<double>(samples[r].e_true)) * inv_s;
    loss += res * res;
    const double g = 2.0 * res * inv_s * inv_n * rr.geometry.step[r];
    for (std::size_t i = rr.geometry.offsets[r]; i < rr.geometry.offsets[r + 1]; ++i) dv[i] = static_cast<T>(g);
  }
  loss *= inv_n;
  if (!std::isfinite(loss)) throw Divergence("projection loss became non-finite");
  if (with_grad) {
    const auto fg = backward_points(model, ctx, rr.batch, std::span<const T>(dv));
    backward_features(model, ctx, fg);
  }
  return loss;
}

// Projection-domain loss over every detector pixel.
template <typename T>
double full_projection_loss(DifModel<T>& model, const ProjectionStack& proj, std::size_t n_r, bool clip_to_volume) {
  const auto ctx = prepare(model, proj);
  const auto all = sample_rays(proj, proj.data.size(), 0);
  const double scale = proj.max_value() > 0 ? proj.max_value() : 1.0;
  return projection_loss(model, ctx, all, n_r, clip_to_volume, scale, false);
}

// Fine-tunes every parameter on one projection stack by minimizing the
// squared error between measured and re-rendered ray integrals. Returns the
// per-step loss (evaluated before each update).
template <typename T>
std::vector<double> tto_finetune(DifModel<T>& model, const ProjectionStack& proj, const TtoConfig& cfg,
                                 std::uint64_t seed) {
  check_projections(model, proj);
  std::vector<double> log;
  if (cfg.steps == 0) return log;
  const double scale = proj.max_value() > 0 ? proj.max_value() : 1.0;
  model.params.zero_grad();
  model.params.reset_momentum();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto ctx = prepare(model, proj);
    const auto rays = sample_rays(proj, cfg.rays_per_step, mix_seed(seed, step));
    log.push_back(projection_loss(model, ctx, rays, cfg.n_r, cfg.clip_to_volume, scale, true));
    nn::sgd_momentum_step(model.params, static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum));
  }
  return log;
}

}  // namespace difgs
