#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "difgs/diffcore.hpp"
#include "difgs/gaussian_field.hpp"
#include "difgs/geometry.hpp"
#include "difgs/projector.hpp"
#include "difgs/volume.hpp"

namespace difgs {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 1;
  std::size_t points_per_sample = 10000;
  double lr0 = 0.01;
  double momentum = nn::kMomentum;
};

struct ModelConfig {
  std::size_t k_views = 6;
  std::size_t c = 32;     // final 2D feature channels (F)
  std::size_t c_t = 128;  // intermediate channels (F^t), equals the deepest encoder width
  std::size_t c_g = 32;   // Gaussian feature channels
  std::size_t v = 8;      // Gaussian grid resolution, N_g = v^3
  std::size_t k_nearest = 3;
  bool enable_gaussians = true;
  std::vector<std::size_t> encoder_widths{16, 32, 64, 128};  // stride-2 stages
  std::size_t decoder_stages = 2;                            // upsampling stages with skips
  std::size_t gaussian_hidden = 128;
  std::vector<std::size_t> atten_hidden{64, 64};
  // Reconstruction volume; its voxel-center box is the query domain.
  Dims3 volume_dims{32, 32, 32};
  Vec3 volume_spacing{6, 6, 6};
  TrainConfig training;

  std::size_t n_gaussians() const { return v * v * v; }
  std::size_t feature_stride() const { return std::size_t{1} << (encoder_widths.size() - decoder_stages); }
  std::size_t intermediate_stride() const { return std::size_t{1} << encoder_widths.size(); }
  Box field_bounds() const { return VoxelVolume::centered(volume_dims, volume_spacing).bounds(); }

  void validate() const {
    require(k_views >= 1, "config: k_views must be >= 1");
    require(c >= 1 && c_t >= 1 && c_g >= 1, "config: channel widths must be >= 1");
    require(v >= 1, "config: V must be >= 1");
    require(k_nearest >= 1 && k_nearest <= n_gaussians(), "config: k_nearest must be in [1, V^3]");
    require(!encoder_widths.empty(), "config: encoder needs at least one stage");
    require(encoder_widths.back() == c_t, "config: deepest encoder width must equal C_t");
    require(decoder_stages < encoder_widths.size(), "config: decoder_stages must be < encoder stages");
    require(training.points_per_sample >= 1, "config: points_per_sample must be >= 1");
    require(training.batch_size >= 1, "config: batch_size must be >= 1");
    require(volume_dims[0] >= 2 && volume_dims[1] >= 2 && volume_dims[2] >= 2, "config: volume dims must be >= 2");
  }
};

inline constexpr std::size_t kPointChunk = 256;

template <typename T>
struct ConvLayer {
  nn::Tensor<T>* weight = nullptr;
  nn::Tensor<T>* bias = nullptr;
  std::size_t stride = 1;
};

/**
 * Trainable parameters plus the fixed Gaussian grid.
 *
 * Parameter names: enc.<i>.{w,b}, dec.<j>.{w,b}, gaussian_head.l<i>.{w,b},
 * atten_head.l<i>.{w,b}.
 */
template <typename T>
class DifModel {
 public:
  ModelConfig config;
  nn::ParamStore<T> params;
  GaussianGrid grid;  // initial positions in normalized [-1,1]^3 coordinates
  std::vector<ConvLayer<T>> encoder, decoder;
  nn::Mlp<T> gaussian_head, atten_head;

  explicit DifModel(ModelConfig cfg, std::uint64_t init_seed = 0) : config(std::move(cfg)) {
    config.validate();
    grid = GaussianGrid(config.v, Box{{-1, -1, -1}, {1, 1, 1}});
    std::size_t c_in = 1;
    for (std::size_t i = 0; i < config.encoder_widths.size(); ++i) {
      const std::size_t c_out = config.encoder_widths[i];
      auto& w = params.add("enc." + std::to_string(i) + ".w", {c_out, c_in, 3, 3});
      auto& b = params.add("enc." + std::to_string(i) + ".b", {c_out});
      encoder.push_back({&w, &b, 2});
      c_in = c_out;
    }
    const std::size_t n = config.encoder_widths.size();
    for (std::size_t j = 0; j < config.decoder_stages; ++j) {
      const std::size_t skip = config.encoder_widths[n - 2 - j];
      const std::size_t c_out = (j + 1 == config.decoder_stages) ? config.c : skip;
      auto& w = params.add("dec." + std::to_string(j) + ".w", {c_out, c_in + skip, 3, 3});
      auto& b = params.add("dec." + std::to_string(j) + ".b", {c_out});
      decoder.push_back({&w, &b, 1});
      c_in = c_out;
    }
    require(c_in == config.c || config.decoder_stages > 0 || config.c == config.c_t,
            "config: without decoder stages C must equal C_t");
    gaussian_head = nn::Mlp<T>::create(params, "gaussian_head",
                                       {config.c_t, config.gaussian_hidden, gaussian_param_width(config.c_g)});
    std::vector<std::size_t> widths{config.c_g + config.c};
    widths.insert(widths.end(), config.atten_hidden.begin(), config.atten_hidden.end());
    widths.push_back(1);
    atten_head = nn::Mlp<T>::create(params, "atten_head", widths);
    initialize(init_seed);
  }

  DifModel(const DifModel&) = delete;
  DifModel& operator=(const DifModel&) = delete;

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto* convs : {&encoder, &decoder})
      for (auto& l : *convs) nn::init_uniform(*l.weight, l.weight->dim(1) * 9, l.weight->dim(0) * 9, rng);
    for (auto* mlp : {&gaussian_head, &atten_head})
      for (auto& l : mlp->layers) nn::init_uniform(*l.weight, l.in(), l.out(), rng);
    // Zero output layer: Gaussians start as identity-shaped blobs at the centroids.
    std::fill(gaussian_head.layers.back().weight->values.begin(), gaussian_head.layers.back().weight->values.end(), T(0));
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params.name(i).ends_with(".b")) std::fill(params.at(i).values.begin(), params.at(i).values.end(), T(0));
  }

  // World mm -> normalized field coordinates ([-1,1] across the volume box).
  Vec3 normalize(Vec3 p) const {
    const Box b = config.field_bounds();
    const Vec3 c = b.center(), h = 0.5 * b.extent();
    return {(p.x - c.x) / h.x, (p.y - c.y) / h.y, (p.z - c.z) / h.z};
  }
  Vec3 denormalize(Vec3 q) const {
    const Box b = config.field_bounds();
    const Vec3 c = b.center(), h = 0.5 * b.extent();
    return {c.x + q.x * h.x, c.y + q.y * h.y, c.z + q.z * h.z};
  }
};

// ---------------------------------------------------------------------------
// Multi-view pooled query (shared by F^t at Gaussian centroids and F at points)
// ---------------------------------------------------------------------------

template <typename T>
struct PooledTrace {
  std::vector<nn::BilinearTaps<T>> taps;  // per view
  std::vector<std::uint32_t> argmax;       // per channel
};

// Projects p into every view, samples each [C, h, w] map bilinearly at
// (u/stride, v/stride) and max-pools over the views that see p.
template <typename T>
void query_pooled(const nn::Tensor<T>& maps, Vec3 p, const ScanGeometry& geom, std::size_t stride, T* out,
                  PooledTrace<T>* trace = nullptr) {
  const std::size_t k = maps.dim(0), c = maps.dim(1), h = maps.dim(2), w = maps.dim(3), hw = h * w;
  if (k != geom.n_views) throw ShapeMismatch("query_pooled: feature maps and geometry disagree on K");
  std::vector<T> stack(k * c, T(0));
  std::vector<nn::BilinearTaps<T>> taps(k);
  std::vector<std::uint8_t> valid(k, 0);
  const double inv = 1.0 / static_cast<double>(stride);
  for (std::size_t v = 0; v < k; ++v) {
    DetectorCoord uv;
    if (!try_project_point(geom, v, p, uv)) continue;
    valid[v] = 1;
    taps[v] = nn::bilinear_taps<T>(h, w, uv.u * inv, uv.v * inv);
    nn::bilinear_gather(maps.data() + v * c * hw, c, hw, taps[v], stack.data() + v * c);
  }
  auto pooled = nn::max_over_views<T>(stack, k, c, valid);
  std::copy(pooled.value.begin(), pooled.value.end(), out);
  if (trace) {
    trace->taps = std::move(taps);
    trace->argmax = std::move(pooled.argmax);
  }
}

template <typename T>
std::vector<T> query_pooled(const nn::Tensor<T>& maps, Vec3 p, const ScanGeometry& geom, std::size_t stride) {
  std::vector<T> out(maps.dim(1));
  query_pooled(maps, p, geom, stride, out.data());
  return out;
}

template <typename T>
void query_pooled_backward(nn::Tensor<T>& maps_grad, const PooledTrace<T>& trace, const T* g) {
  const std::size_t c = maps_grad.dim(1), hw = maps_grad.dim(2) * maps_grad.dim(3);
  for (std::size_t j = 0; j < c; ++j) {
    const std::size_t v = trace.argmax[j];
    const auto& t = trace.taps[v];
    T* base = maps_grad.data() + (v * c + j) * hw;
    for (int i = 0; i < 4; ++i)
      if (t.index[i] >= 0) base[t.index[i]] += t.weight[i] * g[j];
  }
}

// ---------------------------------------------------------------------------
// Forward context: encoder features + Gaussian set for one projection stack
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardContext {
  const ScanGeometry* geom = nullptr;
  double input_scale = 1.0;  // input images are divided by this
  nn::Tensor<T> input;       // [K, 1, n_v, n_u]
  std::vector<nn::Tensor<T>> enc_out;
  std::vector<nn::Tensor<T>> dec_in, dec_out;
  std::vector<PooledTrace<T>> centroid_traces;
  nn::MlpTrace<T> gaussian_trace;
  GaussianSet gaussians;
  bool has_gaussians = false;

  const nn::Tensor<T>& f_t() const { return enc_out.back(); }
  const nn::Tensor<T>& f() const { return dec_out.empty() ? enc_out.back() : dec_out.back(); }
};

template <typename T>
void check_projections(const DifModel<T>& model, const ProjectionStack& proj) {
  if (proj.n_views() != model.config.k_views)
    throw ShapeMismatch("projection stack has K=" + std::to_string(proj.n_views()) + " but the model expects K=" +
                        std::to_string(model.config.k_views));
  const std::size_t s = model.config.intermediate_stride();
  if (proj.geometry.det_shape.n_u % s != 0 || proj.geometry.det_shape.n_v % s != 0)
    throw ShapeMismatch("detector dimensions must be divisible by the encoder stride " + std::to_string(s));
}

// Shared 2D encoder over all views: F^t from the deepest stage, F from the
// decoder output.
template <typename T>
void encode(const DifModel<T>& model, const ProjectionStack& proj, ForwardContext<T>& ctx) {
  check_projections(model, proj);
  const auto& g = proj.geometry;
  ctx.geom = &proj.geometry;
  const float mx = proj.max_value();
  ctx.input_scale = mx > 0 ? static_cast<double>(mx) : 1.0;
  ctx.input = nn::Tensor<T>({g.n_views, 1, g.det_shape.n_v, g.det_shape.n_u});
  const T inv = static_cast<T>(1.0 / ctx.input_scale);
  for (std::size_t i = 0; i < proj.data.size(); ++i) ctx.input.values[i] = static_cast<T>(proj.data[i]) * inv;
  ctx.enc_out.clear();
  ctx.dec_in.clear();
  ctx.dec_out.clear();
  const nn::Tensor<T>* x = &ctx.input;
  for (const auto& l : model.encoder) {
    ctx.enc_out.push_back(nn::conv_block_forward(*x, *l.weight, *l.bias, l.stride));
    x = &ctx.enc_out.back();
  }
  const std::size_t n = model.encoder.size();
  for (std::size_t j = 0; j < model.decoder.size(); ++j) {
    const auto up = nn::upsample2x_forward(*x);
    ctx.dec_in.push_back(nn::concat_channels(up, ctx.enc_out[n - 2 - j]));
    const auto& l = model.decoder[j];
    ctx.dec_out.push_back(nn::conv_block_forward(ctx.dec_in.back(), *l.weight, *l.bias, l.stride));
    x = &ctx.dec_out.back();
  }
}

// Pooled F^t at every initial position -> Gaussian head -> activations.
template <typename T>
void build_gaussians(const DifModel<T>& model, ForwardContext<T>& ctx) {
  const std::size_t n_g = model.grid.size(), c_t = model.config.c_t;
  std::vector<T> pooled(n_g * c_t);
  ctx.centroid_traces.assign(n_g, {});
  for (std::size_t i = 0; i < n_g; ++i)
    query_pooled(ctx.f_t(), model.denormalize(model.grid.u_hat[i]), *ctx.geom, model.config.intermediate_stride(),
                 pooled.data() + i * c_t, &ctx.centroid_traces[i]);
  ctx.gaussian_trace = nn::mlp_forward<T>(model.gaussian_head, pooled, n_g);
  const auto raw_t = ctx.gaussian_trace.output();
  std::vector<double> raw(raw_t.begin(), raw_t.end());
  ctx.gaussians = activate_gaussians(model.grid, model.config.c_g, raw);
  ctx.has_gaussians = true;
}

template <typename T>
ForwardContext<T> prepare(const DifModel<T>& model, const ProjectionStack& proj) {
  ForwardContext<T> ctx;
  encode(model, proj, ctx);
  if (model.config.enable_gaussians) build_gaussians(model, ctx);
  return ctx;
}

// ---------------------------------------------------------------------------
// Point queries
// ---------------------------------------------------------------------------

template <typename T>
struct PointChunkTrace {
  std::size_t begin = 0, end = 0;
  std::vector<PooledTrace<T>> pooled;
  std::vector<FieldTap> taps;  // k per point
  nn::MlpTrace<T> mlp;
};

template <typename T>
struct PointBatch {
  std::vector<T> values;
  std::vector<PointChunkTrace<T>> chunks;  // empty unless traced
};

namespace detail {
template <typename T>
PointChunkTrace<T> forward_chunk(const DifModel<T>& model, const ForwardContext<T>& ctx, std::span<const Vec3> pts,
                                 std::size_t begin, std::size_t end, bool keep) {
  const auto& cfg = model.config;
  const std::size_t n = end - begin, width = cfg.c_g + cfg.c, k = cfg.k_nearest;
  std::vector<T> hybrid(n * width, T(0));
  PointChunkTrace<T> tr;
  tr.begin = begin;
  tr.end = end;
  if (keep) tr.pooled.resize(n);
  if (keep && ctx.has_gaussians) tr.taps.resize(n * k);
  std::vector<FieldTap> taps;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p = pts[begin + i];
    T* row = hybrid.data() + i * width;
    if (ctx.has_gaussians) {
      query_field(model.normalize(p), ctx.gaussians, k, row, taps);
      if (keep) std::copy(taps.begin(), taps.end(), tr.taps.begin() + static_cast<long>(i * k));
    }
    query_pooled(ctx.f(), p, *ctx.geom, cfg.feature_stride(), row + cfg.c_g, keep ? &tr.pooled[i] : nullptr);
  }
  tr.mlp = nn::mlp_forward<T>(model.atten_head, hybrid, n);
  return tr;
}
}  // namespace detail

// v = atten_head(concat[F^g(p), F(p)]) for every point. With gaussians
// disabled the F^g slot is zero.
template <typename T>
PointBatch<T> forward_points(const DifModel<T>& model, const ForwardContext<T>& ctx, std::span<const Vec3> pts,
                             bool keep_trace) {
  const auto ranges = make_chunks(pts.size(), kPointChunk);
  PointBatch<T> out;
  out.values.resize(pts.size());
  std::vector<PointChunkTrace<T>> chunks(ranges.size());
  parallel_for(ranges.size(), [&](std::size_t c) {
    chunks[c] = detail::forward_chunk(model, ctx, pts, ranges[c].begin, ranges[c].end, keep_trace);
    const auto v = chunks[c].mlp.output();
    std::copy(v.begin(), v.end(), out.values.begin() + static_cast<long>(ranges[c].begin));
    if (!keep_trace) chunks[c] = {};
  });
  if (keep_trace) out.chunks = std::move(chunks);
  return out;
}

template <typename T>
T predict_point(const DifModel<T>& model, const ForwardContext<T>& ctx, Vec3 p) {
  return forward_points(model, ctx, std::span<const Vec3>(&p, 1), false).values[0];
}

// Gradients w.r.t. the feature maps and the Gaussian set (the parameter
// gradients of the attenuation head go straight into the store).
template <typename T>
struct FeatureGrads {
  nn::Tensor<T> d_f;
  GaussianGrad d_gauss;
};

namespace detail {
template <typename T>
struct ChunkGrads {
  std::vector<std::vector<T>> dw, db;
  FeatureGrads<T> feat;
};
}  // namespace detail

// Back-propagates dL/dv through the point queries. Work is split into the
// same fixed chunks as the forward pass and reduced in chunk order.
template <typename T>
FeatureGrads<T> backward_points(DifModel<T>& model, const ForwardContext<T>& ctx, const PointBatch<T>& batch,
                                std::span<const T> dv) {
  const auto& cfg = model.config;
  const std::size_t width = cfg.c_g + cfg.c, k = cfg.k_nearest;
  auto& head = model.atten_head;
  std::vector<detail::ChunkGrads<T>> parts(batch.chunks.size());
  parallel_for(batch.chunks.size(), [&](std::size_t ci) {
    const auto& tr = batch.chunks[ci];
    auto& part = parts[ci];
    const std::size_t n = tr.end - tr.begin;
    // local copy of the head with private gradient buffers
    std::vector<nn::Tensor<T>> gw(head.layers.size()), gb(head.layers.size());
    nn::Mlp<T> local;
    for (std::size_t l = 0; l < head.layers.size(); ++l) {
      gw[l].shape = head.layers[l].weight->shape;
      gw[l].values = head.layers[l].weight->values;
      gb[l].shape = head.layers[l].bias->shape;
      gb[l].values = head.layers[l].bias->values;
      local.layers.push_back({&gw[l], &gb[l]});
    }
    const auto dh = nn::mlp_backward<T>(local, tr.mlp, dv.subspan(tr.begin, n), true);
    for (std::size_t l = 0; l < head.layers.size(); ++l) {
      part.dw.push_back(std::move(gw[l].grad));
      part.db.push_back(std::move(gb[l].grad));
    }
    part.feat.d_f = nn::Tensor<T>(ctx.f().shape);
    if (ctx.has_gaussians) part.feat.d_gauss = GaussianGrad(ctx.gaussians);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = dh.data() + i * width;
      query_pooled_backward(part.feat.d_f, tr.pooled[i], row + cfg.c_g);
      if (ctx.has_gaussians)
        query_field_backward(ctx.gaussians, std::span<const FieldTap>(tr.taps.data() + i * k, k), row,
                             part.feat.d_gauss);
    }
  });
  FeatureGrads<T> out;
  out.d_f = nn::Tensor<T>(ctx.f().shape);
  if (ctx.has_gaussians) out.d_gauss = GaussianGrad(ctx.gaussians);
  for (auto& l : head.layers) {
    if (l.weight->grad.size() != l.weight->size()) l.weight->grad.assign(l.weight->size(), T(0));
    if (l.bias->grad.size() != l.bias->size()) l.bias->grad.assign(l.bias->size(), T(0));
  }
  for (auto& part : parts) {
    for (std::size_t l = 0; l < head.layers.size(); ++l) {
      auto& w = head.layers[l].weight->grad;
      auto& b = head.layers[l].bias->grad;
      for (std::size_t j = 0; j < w.size(); ++j) w[j] += part.dw[l][j];
      for (std::size_t j = 0; j < b.size(); ++j) b[j] += part.db[l][j];
    }
    for (std::size_t j = 0; j < out.d_f.size(); ++j) out.d_f.values[j] += part.feat.d_f.values[j];
    if (ctx.has_gaussians) out.d_gauss += part.feat.d_gauss;
  }
  return out;
}

// Back-propagates feature gradients through the Gaussian head and encoder.
template <typename T>
void backward_features(DifModel<T>& model, const ForwardContext<T>& ctx, const FeatureGrads<T>& g) {
  nn::Tensor<T> d_ft(ctx.f_t().shape);
  if (ctx.has_gaussians) {
    const auto d_raw = activation_backward(ctx.gaussians, g.d_gauss);
    std::vector<T> d_raw_t(d_raw.begin(), d_raw.end());
    const auto d_pooled = nn::mlp_backward<T>(model.gaussian_head, ctx.gaussian_trace, d_raw_t, true);
    const std::size_t c_t = model.config.c_t;
    for (std::size_t i = 0; i < ctx.centroid_traces.size(); ++i)
      query_pooled_backward(d_ft, ctx.centroid_traces[i], d_pooled.data() + i * c_t);
  }
  const std::size_t n = model.encoder.size();
  std::vector<nn::Tensor<T>> d_skip(n);
  nn::Tensor<T> d_cur = ctx.dec_out.empty() ? nn::Tensor<T>(ctx.f_t().shape) : g.d_f;
  for (std::size_t j = model.decoder.size(); j-- > 0;) {
    auto& l = model.decoder[j];
    const auto d_cat = nn::conv_block_backward(ctx.dec_in[j], *l.weight, *l.bias, l.stride, ctx.dec_out[j], d_cur);
    const std::size_t c_up = ctx.dec_in[j].dim(1) - ctx.enc_out[n - 2 - j].dim(1);
    auto [d_up, d_sk] = nn::split_channels(d_cat, c_up);
    d_skip[n - 2 - j] = std::move(d_sk);
    d_cur = nn::upsample2x_backward(d_up);
  }
  if (ctx.dec_out.empty())
    for (std::size_t i = 0; i < d_cur.size(); ++i) d_cur.values[i] += g.d_f.values[i];
  for (std::size_t i = 0; i < d_cur.size(); ++i) d_cur.values[i] += d_ft.values[i];
  for (std::size_t s = n; s-- > 0;) {
    auto& l = model.encoder[s];
    const nn::Tensor<T>& x = s == 0 ? ctx.input : ctx.enc_out[s - 1];
    auto dx = nn::conv_block_backward(x, *l.weight, *l.bias, l.stride, ctx.enc_out[s], d_cur);
    if (s == 0) break;
    if (!d_skip[s - 1].values.empty())
      for (std::size_t i = 0; i < dx.size(); ++i) dx.values[i] += d_skip[s - 1].values[i];
    d_cur = std::move(dx);
  }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct PointSample {
  Vec3 p;
  float value;
};

// Uniform points over the voxel-center box with trilinear ground truth.
inline std::vector<PointSample> sample_points(const VoxelVolume& vol, std::size_t n, std::uint64_t seed) {
  require(n >= 1, "sample_points: n must be >= 1");
  std::mt19937_64 rng(seed);
  const Box b = vol.bounds();
  std::vector<PointSample> out(n);
  for (auto& s : out) {
    const double x = uniform(rng, b.lo.x, b.hi.x);
    const double y = uniform(rng, b.lo.y, b.hi.y);
    const double z = uniform(rng, b.lo.z, b.hi.z);
    s.p = {x, y, z};
    s.value = static_cast<float>(sample_trilinear(vol, s.p));
  }
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined key
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct TrainSample {
  VoxelVolume volume;
  ProjectionStack projections;
};

struct EpochLog {
  std::size_t epoch;
  double lr;
  double mse;
};

// One forward/backward pass on a sample; returns the point-wise MSE.
// Gradients are accumulated (scaled by `grad_scale`) into the model store.
template <typename T>
double accumulate_sample_gradient(DifModel<T>& model, const TrainSample& sample, std::size_t n_points,
                                  std::uint64_t seed, double grad_scale = 1.0) {
  auto ctx = prepare(model, sample.projections);
  const auto pts = sample_points(sample.volume, n_points, seed);
  std::vector<Vec3> xyz(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) xyz[i] = pts[i].p;
  const auto batch = forward_points(model, ctx, xyz, true);
  double sse = 0;
  std::vector<T> dv(pts.size());
  const double inv_n = 1.0 / static_cast<double>(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double r = static_cast<double>(batch.values[i]) - static_cast<double>(pts[i].value);
    sse += r * r;
    dv[i] = static_cast<T>(2.0 * r * inv_n * grad_scale);
  }
  const double mse = sse * inv_n;
  if (!std::isfinite(mse)) throw Divergence("training loss became non-finite");
  const auto fg = backward_points(model, ctx, batch, std::span<const T>(dv));
  backward_features(model, ctx, fg);
  return mse;
}

using EpochCallback = std::function<void(const EpochLog&)>;

// Point-wise MSE training with SGD momentum and per-epoch exponential decay.
template <typename T>
std::vector<EpochLog> train(DifModel<T>& model, const std::vector<TrainSample>& dataset, std::uint64_t seed,
                            const EpochCallback& on_epoch = {}) {
  require(!dataset.empty(), "train: dataset is empty");
  const auto& tc = model.config.training;
  for (const auto& s : dataset) {
    check_projections(model, s.projections);
    const auto& g0 = dataset.front().projections.geometry;
    const auto& g = s.projections.geometry;
    if (g.n_views != g0.n_views || g.sid != g0.sid || g.sdd != g0.sdd || !(g.det_shape == g0.det_shape) ||
        g.det_spacing != g0.det_spacing)
      throw InvalidParameter("train: all projection stacks must share one scan geometry");
  }
  model.params.zero_grad();
  std::vector<EpochLog> log;
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = nn::lr_at_epoch(tc.lr0, epoch, tc.epochs);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix_seed(seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
      const std::size_t count = std::min(tc.batch_size, order.size() - b);
      for (std::size_t n = b; n < b + count; ++n)
        total += accumulate_sample_gradient(model, dataset[order[n]], tc.points_per_sample,
                                            mix_seed(mix_seed(seed, epoch), order[n] + 1),
                                            1.0 / static_cast<double>(count));
      nn::sgd_momentum_step(model.params, static_cast<T>(lr), static_cast<T>(tc.momentum));
    }
    log.push_back({epoch, lr, total / static_cast<double>(dataset.size())});
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

template <typename T>
VoxelVolume reconstruct(const DifModel<T>& model, const ProjectionStack& proj, Dims3 dims, Vec3 spacing,
                        std::size_t chunk = 4096) {
  require(chunk >= 1, "reconstruct: chunk must be >= 1");
  const auto ctx = prepare(model, proj);
  VoxelVolume out = VoxelVolume::centered(dims, spacing);
  std::vector<Vec3> pts;
  for (std::size_t b = 0; b < out.size(); b += chunk) {
    const std::size_t e = std::min(out.size(), b + chunk);
    pts.resize(e - b);
    for (std::size_t i = b; i < e; ++i) pts[i - b] = out.voxel_center(i);
    const auto batch = forward_points(model, ctx, pts, false);
    for (std::size_t i = b; i < e; ++i)
      out.data[i] = static_cast<float>(std::clamp(static_cast<double>(batch.values[i - b]), 0.0, 1.0));
  }
  return out;
}

template <typename T>
VoxelVolume reconstruct(const DifModel<T>& model, const ProjectionStack& proj) {
  return reconstruct(model, proj, model.config.volume_dims, model.config.volume_spacing);
}

}  // namespace difgs
