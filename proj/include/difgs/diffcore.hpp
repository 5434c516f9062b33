#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "difgs/common.hpp"

/**
 * Minimal reverse-mode layer set for the reconstruction network.
 *
 * There is no tape: each layer exposes a forward function and a matching
 * backward function, and the model wires them in a fixed topology. All layers
 * are templated on the scalar type so the same code runs in float for
 * training and in double for finite-difference verification.
 */
namespace difgs::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // same length as values when tracked, empty otherwise
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, bool track = false)
      : shape(std::move(s)), values(numel(shape), T(0)), requires_grad(track) {
    if (track) grad.assign(values.size(), T(0));
  }

  std::size_t size() const { return values.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  T* data() { return values.data(); }
  const T* data() const { return values.data(); }
  void zero_grad() {
    if (requires_grad) std::fill(grad.begin(), grad.end(), T(0));
  }
};

// ---------------------------------------------------------------------------
// Parameter store + optimizer
// ---------------------------------------------------------------------------

template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Shape shape) {
    if (index_.contains(name)) throw InvalidParameter("ParamStore: duplicate parameter " + name);
    index_[name] = params_.size();
    names_.push_back(name);
    params_.emplace_back(std::move(shape), true);
    momentum_.emplace_back(params_.back().size(), T(0));
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  Tensor<T>& get(const std::string& name) { return params_[lookup(name)]; }
  const Tensor<T>& get(const std::string& name) const { return params_[lookup(name)]; }

  std::size_t size() const { return params_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<T>& at(std::size_t i) { return params_[i]; }
  const Tensor<T>& at(std::size_t i) const { return params_[i]; }
  std::vector<T>& momentum(std::size_t i) { return momentum_[i]; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void reset_momentum() {
    for (auto& m : momentum_) std::fill(m.begin(), m.end(), T(0));
  }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  // Copies values (not gradients or optimizer state) between stores of any
  // scalar type with identical layout.
  template <typename U>
  void copy_values_from(const ParamStore<U>& other) {
    if (other.size() != size()) throw ShapeMismatch("ParamStore: parameter count differs");
    for (std::size_t i = 0; i < size(); ++i) {
      if (other.name(i) != names_[i] || other.at(i).shape != params_[i].shape)
        throw ShapeMismatch("ParamStore: layout differs at " + names_[i]);
      for (std::size_t j = 0; j < params_[i].size(); ++j)
        params_[i].values[j] = static_cast<T>(other.at(i).values[j]);
    }
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidParameter("ParamStore: unknown parameter " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::deque<Tensor<T>> params_;  // deque keeps references stable across add()
  std::vector<std::vector<T>> momentum_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr double kMomentum = 0.98;

// Classical heavy-ball momentum without dampening:
//   m <- mu * m + g;  p <- p - lr * m;  then gradients are cleared.
template <typename T>
void sgd_momentum_step(ParamStore<T>& store, T lr, T momentum = T(kMomentum)) {
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.at(i).grad.size() != store.at(i).size())
      throw MissingGradient("sgd_momentum_step: no gradient for " + store.name(i));
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    auto& m = store.momentum(i);
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = momentum * m[j] + p.grad[j];
      p.values[j] -= lr * m[j];
    }
    p.zero_grad();
  }
}

// lr0 * 0.001^(epoch / max_epoch)
inline double lr_at_epoch(double lr0, std::size_t epoch, std::size_t max_epoch) {
  require(max_epoch >= 1, "lr_at_epoch: max_epoch must be >= 1");
  require(epoch <= max_epoch, "lr_at_epoch: epoch exceeds max_epoch");
  return lr0 * std::pow(0.001, static_cast<double>(epoch) / static_cast<double>(max_epoch));
}

template <typename T>
void init_uniform_bound(Tensor<T>& w, double a, std::mt19937_64& rng) {
  for (auto& v : w.values) v = static_cast<T>(a * (2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0));
}

// Glorot-uniform.
template <typename T>
void init_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  init_uniform_bound(w, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

// ---------------------------------------------------------------------------
// 3x3 conv + bias + ReLU, zero padding 1, stride 1 or 2
// ---------------------------------------------------------------------------

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRowMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRowMat = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T>
void im2col(const T* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t stride,
            std::size_t ho, std::size_t wo, std::vector<T>& cols) {
  cols.assign(c_in * 9 * ho * wo, T(0));
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = cols.data() + ((c * 3 + ky) * 3 + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          const T* src = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - 1;
            if (ix >= 0 && ix < static_cast<long>(w)) row[oy * wo + ox] = src[ix];
          }
        }
      }
}

template <typename T>
void col2im(const std::vector<T>& cols, std::size_t c_in, std::size_t h, std::size_t w,
            std::size_t stride, std::size_t ho, std::size_t wo, T* dx) {
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = cols.data() + ((c * 3 + ky) * 3 + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = dx + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - 1;
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

struct ConvShape {
  std::size_t views, c_in, h, w, c_out, stride;
  std::size_t ho() const { return h / stride; }
  std::size_t wo() const { return w / stride; }
};

template <typename T>
ConvShape conv_shape(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride) {
  if (x.shape.size() != 4) throw ShapeMismatch("conv_block: input must be [views,C,H,W], got " + shape_str(x.shape));
  if (stride != 1 && stride != 2) throw InvalidParameter("conv_block: stride must be 1 or 2");
  const ConvShape s{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.shape.empty() ? 0 : weight.dim(0), stride};
  if (weight.shape != Shape{s.c_out, s.c_in, 3, 3} || bias.shape != Shape{s.c_out})
    throw ShapeMismatch("conv_block: weight " + shape_str(weight.shape) + " / bias " + shape_str(bias.shape) +
                        " incompatible with input " + shape_str(x.shape));
  if (s.h % stride != 0 || s.w % stride != 0)
    throw ShapeMismatch("conv_block: H and W must be divisible by the stride");
  return s;
}

template <typename T>
Tensor<T> conv_block_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                             std::size_t stride) {
  const ConvShape s = conv_shape(x, weight, bias, stride);
  const std::size_t ho = s.ho(), wo = s.wo(), npix = ho * wo;
  Tensor<T> y({s.views, s.c_out, ho, wo});
  const CMapRowMat<T> wmat(weight.data(), s.c_out, s.c_in * 9);
  std::vector<T> cols;
  for (std::size_t v = 0; v < s.views; ++v) {
    detail::im2col(x.data() + v * s.c_in * s.h * s.w, s.c_in, s.h, s.w, stride, ho, wo, cols);
    const CMapRowMat<T> cmat(cols.data(), s.c_in * 9, npix);
    MapRowMat<T> out(y.data() + v * s.c_out * npix, s.c_out, npix);
    out.noalias() = wmat * cmat;
    for (std::size_t co = 0; co < s.c_out; ++co) {
      T* row = out.data() + co * npix;
      const T b = bias.values[co];
      for (std::size_t i = 0; i < npix; ++i) row[i] = std::max(row[i] + b, T(0));
    }
  }
  return y;
}

// Accumulates weight/bias gradients and returns dL/dx. `y` is the forward
// output (its positive entries define the ReLU mask).
template <typename T>
Tensor<T> conv_block_backward(const Tensor<T>& x, Tensor<T>& weight, Tensor<T>& bias, std::size_t stride,
                              const Tensor<T>& y, const Tensor<T>& dy) {
  const ConvShape s = conv_shape(x, weight, bias, stride);
  const std::size_t ho = s.ho(), wo = s.wo(), npix = ho * wo;
  if (dy.shape != y.shape) throw ShapeMismatch("conv_block_backward: dy shape " + shape_str(dy.shape));
  Tensor<T> dx(x.shape);
  if (weight.grad.size() != weight.size()) weight.grad.assign(weight.size(), T(0));
  if (bias.grad.size() != bias.size()) bias.grad.assign(bias.size(), T(0));
  const CMapRowMat<T> wmat(weight.data(), s.c_out, s.c_in * 9);
  MapRowMat<T> dw(weight.grad.data(), s.c_out, s.c_in * 9);
  std::vector<T> cols, dcols(s.c_in * 9 * npix);
  RowMat<T> g(s.c_out, npix);
  for (std::size_t v = 0; v < s.views; ++v) {
    const T* yv = y.data() + v * s.c_out * npix;
    const T* dyv = dy.data() + v * s.c_out * npix;
    for (std::size_t co = 0; co < s.c_out; ++co) {
      T bsum = 0;
      for (std::size_t i = 0; i < npix; ++i) {
        const T gi = yv[co * npix + i] > T(0) ? dyv[co * npix + i] : T(0);
        g(co, i) = gi;
        bsum += gi;
      }
      bias.grad[co] += bsum;
    }
    detail::im2col(x.data() + v * s.c_in * s.h * s.w, s.c_in, s.h, s.w, stride, ho, wo, cols);
    const CMapRowMat<T> cmat(cols.data(), s.c_in * 9, npix);
    dw.noalias() += g * cmat.transpose();
    MapRowMat<T> dc(dcols.data(), s.c_in * 9, npix);
    dc.noalias() = wmat.transpose() * g;
    detail::col2im(dcols, s.c_in, s.h, s.w, stride, ho, wo, dx.data() + v * s.c_in * s.h * s.w);
  }
  return dx;
}

// Nearest-neighbour 2x upsampling of [views, C, H, W].
template <typename T>
Tensor<T> upsample2x_forward(const Tensor<T>& x) {
  const std::size_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        y.values[(c * 2 * h + i) * 2 * w + j] = x.values[(c * h + i / 2) * w + j / 2];
  return y;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy) {
  const std::size_t n = dy.dim(0) * dy.dim(1), h = dy.dim(2) / 2, w = dy.dim(3) / 2;
  Tensor<T> dx({dy.dim(0), dy.dim(1), h, w});
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        dx.values[(c * h + i / 2) * w + j / 2] += dy.values[(c * 2 * h + i) * 2 * w + j];
  return dx;
}

// Channel concatenation of two [views, C?, H, W] tensors.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeMismatch("concat_channels: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const std::size_t views = a.dim(0), hw = a.dim(2) * a.dim(3);
  const std::size_t ca = a.dim(1), cb = b.dim(1);
  Tensor<T> y({views, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t v = 0; v < views; ++v) {
    std::copy_n(a.data() + v * ca * hw, ca * hw, y.data() + v * (ca + cb) * hw);
    std::copy_n(b.data() + v * cb * hw, cb * hw, y.data() + v * (ca + cb) * hw + ca * hw);
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& dy, std::size_t ca) {
  const std::size_t views = dy.dim(0), hw = dy.dim(2) * dy.dim(3), cb = dy.dim(1) - ca;
  Tensor<T> da({views, ca, dy.dim(2), dy.dim(3)}), db({views, cb, dy.dim(2), dy.dim(3)});
  for (std::size_t v = 0; v < views; ++v) {
    std::copy_n(dy.data() + v * (ca + cb) * hw, ca * hw, da.data() + v * ca * hw);
    std::copy_n(dy.data() + v * (ca + cb) * hw + ca * hw, cb * hw, db.data() + v * cb * hw);
  }
  return {std::move(da), std::move(db)};
}

// ---------------------------------------------------------------------------
// MLP: affine layers, ReLU between them, linear output
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Tensor<T>* weight = nullptr;  // [in, out]
  Tensor<T>* bias = nullptr;    // [out]
  std::size_t in() const { return weight->dim(0); }
  std::size_t out() const { return weight->dim(1); }
};

template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  std::size_t in() const { return layers.front().in(); }
  std::size_t out() const { return layers.back().out(); }

  // Registers parameters `<prefix>.l<i>.w` / `.b` for widths {in, h1, ..., out}.
  static Mlp create(ParamStore<T>& store, const std::string& prefix, const std::vector<std::size_t>& widths) {
    Mlp m;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      auto& w = store.add(prefix + ".l" + std::to_string(i) + ".w", {widths[i], widths[i + 1]});
      auto& b = store.add(prefix + ".l" + std::to_string(i) + ".b", {widths[i + 1]});
      m.layers.push_back({&w, &b});
    }
    return m;
  }
  static Mlp bind(ParamStore<T>& store, const std::string& prefix, std::size_t n_layers) {
    Mlp m;
    for (std::size_t i = 0; i < n_layers; ++i)
      m.layers.push_back({&store.get(prefix + ".l" + std::to_string(i) + ".w"),
                          &store.get(prefix + ".l" + std::to_string(i) + ".b")});
    return m;
  }
};

// Per-layer activations kept for the backward pass: acts[0] is the input,
// acts[i+1] the output of layer i (post-ReLU for hidden layers).
template <typename T>
struct MlpTrace {
  std::size_t rows = 0;
  std::vector<std::vector<T>> acts;
  std::span<const T> output() const { return acts.back(); }
};

namespace detail {
// y[r,:] = b + x[r,:] W, accumulated in ascending k so every row is computed
// identically regardless of batch size.
template <typename T>
void affine_rows(const T* x, std::size_t rows, const Linear<T>& l, T* y, bool relu) {
  const std::size_t in = l.in(), out = l.out();
  const T* w = l.weight->data();
  const T* b = l.bias->data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y + r * out;
    const T* xr = x + r * in;
    std::copy_n(b, out, yr);
    for (std::size_t k = 0; k < in; ++k) {
      const T xk = xr[k];
      const T* wk = w + k * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += xk * wk[j];
    }
    if (relu)
      for (std::size_t j = 0; j < out; ++j) yr[j] = std::max(yr[j], T(0));
  }
}
}  // namespace detail

template <typename T>
MlpTrace<T> mlp_forward(const Mlp<T>& mlp, std::span<const T> x, std::size_t rows) {
  if (x.size() != rows * mlp.in())
    throw ShapeMismatch("mlp_forward: input has " + std::to_string(x.size()) + " values, expected " +
                        std::to_string(rows) + "x" + std::to_string(mlp.in()));
  MlpTrace<T> tr;
  tr.rows = rows;
  tr.acts.reserve(mlp.layers.size() + 1);
  tr.acts.emplace_back(x.begin(), x.end());
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& l = mlp.layers[i];
    if (i > 0 && l.in() != mlp.layers[i - 1].out()) throw ShapeMismatch("mlp_forward: layer widths do not chain");
    std::vector<T> y(rows * l.out());
    detail::affine_rows(tr.acts.back().data(), rows, l, y.data(), i + 1 < mlp.layers.size());
    tr.acts.push_back(std::move(y));
  }
  return tr;
}

// Accumulates parameter gradients; returns dL/dx ([rows, in]) when requested.
template <typename T>
std::vector<T> mlp_backward(Mlp<T>& mlp, const MlpTrace<T>& tr, std::span<const T> dy, bool need_dx = true) {
  const std::size_t rows = tr.rows;
  if (dy.size() != rows * mlp.out()) throw ShapeMismatch("mlp_backward: dy has wrong size");
  std::vector<T> g(dy.begin(), dy.end());
  for (std::size_t li = mlp.layers.size(); li-- > 0;) {
    auto& l = mlp.layers[li];
    const std::size_t in = l.in(), out = l.out();
    if (l.weight->grad.size() != l.weight->size()) l.weight->grad.assign(l.weight->size(), T(0));
    if (l.bias->grad.size() != l.bias->size()) l.bias->grad.assign(l.bias->size(), T(0));
    if (li + 1 < mlp.layers.size()) {
      const auto& y = tr.acts[li + 1];
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(y[i] > T(0))) g[i] = T(0);
    }
    const auto& x = tr.acts[li];
    T* dw = l.weight->grad.data();
    T* db = l.bias->grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * out;
      const T* xr = x.data() + r * in;
      for (std::size_t j = 0; j < out; ++j) db[j] += gr[j];
      for (std::size_t k = 0; k < in; ++k) {
        const T xk = xr[k];
        T* dwk = dw + k * out;
        for (std::size_t j = 0; j < out; ++j) dwk[j] += xk * gr[j];
      }
    }
    if (li == 0 && !need_dx) return {};
    std::vector<T> dx(rows * in);
    const T* w = l.weight->data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * out;
      for (std::size_t k = 0; k < in; ++k) {
        const T* wk = w + k * out;
        T s = 0;
        for (std::size_t j = 0; j < out; ++j) s += gr[j] * wk[j];
        dx[r * in + k] = s;
      }
    }
    g = std::move(dx);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Bilinear sampling of a [C, H, W] feature map
// ---------------------------------------------------------------------------

// The four taps of a bilinear read. Taps that fall outside the raster carry
// index -1 and contribute zero (zero padding).
template <typename T>
struct BilinearTaps {
  long index[4] = {-1, -1, -1, -1};  // y * W + x
  T weight[4] = {0, 0, 0, 0};
};

template <typename T>
BilinearTaps<T> bilinear_taps(std::size_t h, std::size_t w, double x, double y) {
  BilinearTaps<T> t;
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  for (int i = 0; i < 4; ++i) {
    if (xs[i] < 0 || ys[i] < 0 || xs[i] >= static_cast<long>(w) || ys[i] >= static_cast<long>(h)) continue;
    t.index[i] = ys[i] * static_cast<long>(w) + xs[i];
    t.weight[i] = static_cast<T>(ws[i]);
  }
  return t;
}

// out[c] = sum_i weight_i * featmap[c, index_i]
template <typename T>
void bilinear_gather(const T* featmap, std::size_t channels, std::size_t hw, const BilinearTaps<T>& taps, T* out) {
  for (std::size_t c = 0; c < channels; ++c) out[c] = T(0);
  for (int i = 0; i < 4; ++i) {
    if (taps.index[i] < 0) continue;
    const T wi = taps.weight[i];
    const T* src = featmap + taps.index[i];
    for (std::size_t c = 0; c < channels; ++c) out[c] += wi * src[c * hw];
  }
}

template <typename T>
void bilinear_scatter(T* featmap_grad, std::size_t channels, std::size_t hw, const BilinearTaps<T>& taps,
                      const T* g) {
  for (int i = 0; i < 4; ++i) {
    if (taps.index[i] < 0) continue;
    const T wi = taps.weight[i];
    T* dst = featmap_grad + taps.index[i];
    for (std::size_t c = 0; c < channels; ++c) dst[c * hw] += wi * g[c];
  }
}

// Samples featmap [C, H, W] at continuous pixel coordinates (x along W, y
// along H). Coordinates are constants: the backward pass only produces
// gradients for the feature map.
template <typename T>
std::vector<T> bilinear_sample(const Tensor<T>& featmap, double x, double y) {
  if (featmap.shape.size() != 3) throw ShapeMismatch("bilinear_sample: featmap must be [C,H,W]");
  const std::size_t c = featmap.dim(0), h = featmap.dim(1), w = featmap.dim(2);
  std::vector<T> out(c);
  bilinear_gather(featmap.data(), c, h * w, bilinear_taps<T>(h, w, x, y), out.data());
  return out;
}

template <typename T>
void bilinear_sample_backward(Tensor<T>& featmap, double x, double y, std::span<const T> g) {
  const std::size_t c = featmap.dim(0), h = featmap.dim(1), w = featmap.dim(2);
  if (featmap.grad.size() != featmap.size()) featmap.grad.assign(featmap.size(), T(0));
  bilinear_scatter(featmap.grad.data(), c, h * w, bilinear_taps<T>(h, w, x, y), g.data());
}

// ---------------------------------------------------------------------------
// Max over views
// ---------------------------------------------------------------------------

template <typename T>
struct MaxPool {
  std::vector<T> value;             // [C]
  std::vector<std::uint32_t> argmax;  // [C] view index
};

// Per-channel max over the rows of stack [K, C]. Rows with valid[k] == false
// are skipped; ties resolve to the lowest view index.
template <typename T>
MaxPool<T> max_over_views(std::span<const T> stack, std::size_t k, std::size_t c,
                          std::span<const std::uint8_t> valid = {}) {
  if (stack.size() != k * c) throw ShapeMismatch("max_over_views: stack size mismatch");
  MaxPool<T> out;
  out.value.assign(c, -std::numeric_limits<T>::infinity());
  out.argmax.assign(c, 0);
  bool any = false;
  for (std::size_t v = 0; v < k; ++v) {
    if (!valid.empty() && !valid[v]) continue;
    const T* row = stack.data() + v * c;
    if (!any) {
      std::copy_n(row, c, out.value.begin());
      std::fill(out.argmax.begin(), out.argmax.end(), static_cast<std::uint32_t>(v));
      any = true;
      continue;
    }
    for (std::size_t j = 0; j < c; ++j)
      if (row[j] > out.value[j]) {
        out.value[j] = row[j];
        out.argmax[j] = static_cast<std::uint32_t>(v);
      }
  }
  if (!any) throw NoValidView("max_over_views: no valid view");
  return out;
}

// Routes g[C] to the argmax rows of a [K, C] gradient.
template <typename T>
std::vector<T> max_over_views_backward(const MaxPool<T>& pool, std::size_t k, std::span<const T> g) {
  const std::size_t c = pool.value.size();
  std::vector<T> d(k * c, T(0));
  for (std::size_t j = 0; j < c; ++j) d[pool.argmax[j] * c + j] += g[j];
  return d;
}

}  // namespace difgs::nn
