#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "nowcast/tensor.hpp"

namespace nowcast {

enum class Arch { unet2d, unet3d };

inline const char* to_string(Arch a) { return a == Arch::unet2d ? "unet2d" : "unet3d"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "unet2d") return Arch::unet2d;
  if (s == "unet3d") return Arch::unet3d;
  throw Error("unknown architecture '" + s + "' (expected unet2d or unet3d)");
}

/// U-Net hyperparameters. Inputs always arrive time-stacked as
/// (N, frames*bands, h, w); the 3D variant unstacks them into an explicit
/// time axis of length `frames` and convolves with 3x3x3 kernels.
struct UNetConfig {
  std::size_t in_channels = 16;
  std::size_t out_channels = 24;
  std::size_t depth = 3;
  std::size_t base_width = 16;
  double dropout = 0.0;
  Arch arch = Arch::unet2d;
  std::size_t frames = 1;

  void validate() const {
    if (depth < 1 || base_width < 1 || in_channels < 1 || out_channels < 1) {
      throw Error("U-Net depth, width and channel counts must be >= 1");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must lie in [0,1)");
    if (arch == Arch::unet3d && (frames < 1 || in_channels % frames)) {
      throw Error("unet3d needs in_channels divisible by the frame count");
    }
  }

  std::size_t time_axis() const { return arch == Arch::unet3d ? frames : 1; }
  std::size_t stem_channels() const { return in_channels / time_axis(); }
  std::size_t width(std::size_t level) const { return base_width << level; }
  std::size_t divisor() const { return std::size_t{1} << depth; }

  bool operator==(const UNetConfig&) const = default;
};

struct ConvSpec {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kt = 1;  // temporal kernel
  std::size_t k = 3;   // spatial kernel
  bool relu = true;

  std::size_t weight_count() const { return out * in * kt * k * k; }
};

// Layer table, in forward order:
//   enc{l}.conv0  w(l-1) -> w(l)     (level 0 reads the stem channels)
//   enc{l}.conv1  w(l)   -> w(l)
//   mid.conv0     w(d-1) -> w(d)
//   mid.conv1     w(d)   -> w(d)
//   dec{l}.conv0  w(l+1) + w(l) -> w(l)   (upsampled + skip), l = d-1 .. 0
//   dec{l}.conv1  w(l)   -> w(l)
//   head          w(0) * time -> out_channels, 1x1, no activation
// with w(l) = base_width * 2^l. Convs are 3x3 (3x3x3 for unet3d).
inline std::vector<ConvSpec> layer_table(const UNetConfig& cfg) {
  const std::size_t kt = cfg.arch == Arch::unet3d ? 3 : 1;
  std::vector<ConvSpec> specs;
  std::size_t prev = cfg.stem_channels();
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    specs.push_back({p + ".conv0", prev, cfg.width(l), kt, 3, true});
    specs.push_back({p + ".conv1", cfg.width(l), cfg.width(l), kt, 3, true});
    prev = cfg.width(l);
  }
  specs.push_back({"mid.conv0", prev, cfg.width(cfg.depth), kt, 3, true});
  specs.push_back({"mid.conv1", cfg.width(cfg.depth), cfg.width(cfg.depth), kt, 3, true});
  for (std::size_t l = cfg.depth; l-- > 0;) {
    const std::string p = "dec" + std::to_string(l);
    specs.push_back({p + ".conv0", cfg.width(l + 1) + cfg.width(l), cfg.width(l), kt, 3, true});
    specs.push_back({p + ".conv1", cfg.width(l), cfg.width(l), kt, 3, true});
  }
  specs.push_back({"head", cfg.width(0) * cfg.time_axis(), cfg.out_channels, 1, 1, false});
  return specs;
}

inline std::size_t parameter_count(const UNetConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : layer_table(cfg)) n += s.weight_count() + s.out;
  return n;
}

template <typename T>
using ParamMap = std::map<std::string, BasicTensor<T>>;

template <typename T>
struct ModelState {
  UNetConfig config;
  ParamMap<T> params;
  ParamMap<T> m;  // AdamW first moments
  ParamMap<T> v;  // AdamW second moments
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double lr = 0.0;

  template <typename U>
  ModelState<U> cast() const {
    ModelState<U> out;
    out.config = config;
    for (const auto& [k, t] : params) out.params.emplace(k, t.template cast<U>());
    for (const auto& [k, t] : m) out.m.emplace(k, t.template cast<U>());
    for (const auto& [k, t] : v) out.v.emplace(k, t.template cast<U>());
    out.step = step;
    out.epoch = epoch;
    out.best_val_loss = best_val_loss;
    out.lr = lr;
    return out;
  }
};

/// He-uniform weights (bound sqrt(6/fan_in)) for ReLU convs, LeCun-uniform
/// (sqrt(3/fan_in)) for the linear head, zero biases. Draw order follows
/// layer_table.
template <typename T>
ModelState<T> init_model(const UNetConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelState<T> s;
  s.config = cfg;
  for (const auto& spec : layer_table(cfg)) {
    const double fan_in = static_cast<double>(spec.in * spec.kt * spec.k * spec.k);
    const double bound = std::sqrt((spec.relu ? 6.0 : 3.0) / fan_in);
    BasicTensor<T> w({spec.out, spec.in, spec.kt, spec.k, spec.k});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-bound, bound));
    s.params.emplace(spec.name + ".weight", std::move(w));
    s.params.emplace(spec.name + ".bias", BasicTensor<T>({spec.out}));
  }
  for (const auto& [k, t] : s.params) {
    s.m.emplace(k, BasicTensor<T>(t.shape()));
    s.v.emplace(k, BasicTensor<T>(t.shape()));
  }
  return s;
}

namespace layers {

// Same-padded convolution over (N, C, D, H, W) with kernel (kt, k, k).
template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T>& in, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  const std::size_t N = in.dim(0), Ci = in.dim(1), D = in.dim(2), H = in.dim(3), W = in.dim(4);
  const std::size_t Co = w.dim(0), kt = w.dim(2), k = w.dim(4);
  if (w.dim(1) != Ci) throw Error("conv input channels " + std::to_string(Ci) + " do not match weight " + shape_str(w.shape()));
  const auto pt = static_cast<std::ptrdiff_t>(kt / 2);
  const auto p = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t plane = H * W;
  BasicTensor<T> out({N, Co, D, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Co; ++co) {
      T* o = &out[(n * Co + co) * D * plane];
      std::fill(o, o + D * plane, b[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T* src = &in[(n * Ci + ci) * D * plane];
        for (std::size_t tk = 0; tk < kt; ++tk) {
          for (std::size_t d = 0; d < D; ++d) {
            const auto sd = static_cast<std::ptrdiff_t>(d + tk) - pt;
            if (sd < 0 || sd >= static_cast<std::ptrdiff_t>(D)) continue;
            const T* sp = src + static_cast<std::size_t>(sd) * plane;
            T* op = o + d * plane;
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                const T wv = w[(((co * Ci + ci) * kt + tk) * k + ky) * k + kx];
                const auto dx = static_cast<std::ptrdiff_t>(kx) - p;
                const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
                for (std::size_t y = 0; y < H; ++y) {
                  const auto sy = static_cast<std::ptrdiff_t>(y + ky) - p;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                  const T* srow = sp + static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x0) + dx);
                  T* orow = op + y * W + x0;
                  for (std::size_t x = 0; x < x1 - x0; ++x) orow[x] += wv * srow[x];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Accumulates weight/bias gradients; returns the input gradient when want_input.
template <typename T>
BasicTensor<T> conv_backward(const BasicTensor<T>& in, const BasicTensor<T>& w, const BasicTensor<T>& gout,
                             BasicTensor<T>& gw, BasicTensor<T>& gb, bool want_input) {
  const std::size_t N = in.dim(0), Ci = in.dim(1), D = in.dim(2), H = in.dim(3), W = in.dim(4);
  const std::size_t Co = w.dim(0), kt = w.dim(2), k = w.dim(4);
  const auto pt = static_cast<std::ptrdiff_t>(kt / 2);
  const auto p = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t plane = H * W;
  BasicTensor<T> gin = want_input ? BasicTensor<T>(in.shape()) : BasicTensor<T>();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Co; ++co) {
      const T* g = &gout[(n * Co + co) * D * plane];
      T bsum = 0;
      for (std::size_t i = 0; i < D * plane; ++i) bsum += g[i];
      gb[co] += bsum;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T* src = &in[(n * Ci + ci) * D * plane];
        T* gsrc = want_input ? &gin[(n * Ci + ci) * D * plane] : nullptr;
        for (std::size_t tk = 0; tk < kt; ++tk) {
          for (std::size_t d = 0; d < D; ++d) {
            const auto sd = static_cast<std::ptrdiff_t>(d + tk) - pt;
            if (sd < 0 || sd >= static_cast<std::ptrdiff_t>(D)) continue;
            const T* sp = src + static_cast<std::size_t>(sd) * plane;
            T* gsp = gsrc ? gsrc + static_cast<std::size_t>(sd) * plane : nullptr;
            const T* gp = g + d * plane;
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t widx = (((co * Ci + ci) * kt + tk) * k + ky) * k + kx;
                const T wv = w[widx];
                const auto dx = static_cast<std::ptrdiff_t>(kx) - p;
                const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
                T acc = 0;
                for (std::size_t y = 0; y < H; ++y) {
                  const auto sy = static_cast<std::ptrdiff_t>(y + ky) - p;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                  const std::size_t shift = static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x0) + dx);
                  const T* srow = sp + shift;
                  const T* grow = gp + y * W + x0;
                  for (std::size_t x = 0; x < x1 - x0; ++x) acc += grow[x] * srow[x];
                  if (gsp) {
                    T* gsrow = gsp + shift;
                    for (std::size_t x = 0; x < x1 - x0; ++x) gsrow[x] += wv * grow[x];
                  }
                }
                gw[widx] += acc;
              }
            }
          }
        }
      }
    }
  }
  return gin;
}

template <typename T>
void relu_inplace(BasicTensor<T>& t) {
  for (auto& v : t.data()) v = v > T{0} ? v : T{0};
}

template <typename T>
void relu_backward_inplace(BasicTensor<T>& g, const BasicTensor<T>& out) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(out[i] > T{0})) g[i] = T{0};
  }
}

// 2x2 spatial max pool; argmax holds the winning offset (0..3) per output.
template <typename T>
BasicTensor<T> maxpool_forward(const BasicTensor<T>& in, std::vector<std::uint8_t>& argmax) {
  Shape s = in.shape();
  const std::size_t H = s[3], W = s[4];
  s[3] /= 2;
  s[4] /= 2;
  BasicTensor<T> out(s);
  argmax.assign(out.size(), 0);
  const std::size_t planes = in.size() / (H * W);
  const std::size_t h = H / 2, w = W / 2;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const T* base = &in[(pl * H + 2 * y) * W + 2 * x];
        const T c[4] = {base[0], base[1], base[W], base[W + 1]};
        std::uint8_t best = 0;
        for (std::uint8_t i = 1; i < 4; ++i) {
          if (c[i] > c[best]) best = i;
        }
        const std::size_t o = (pl * h + y) * w + x;
        out[o] = c[best];
        argmax[o] = best;
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> maxpool_backward(const BasicTensor<T>& gout, const std::vector<std::uint8_t>& argmax,
                                const Shape& in_shape) {
  BasicTensor<T> gin(in_shape);
  const std::size_t H = in_shape[3], W = in_shape[4];
  const std::size_t h = H / 2, w = W / 2;
  const std::size_t planes = gin.size() / (H * W);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t o = (pl * h + y) * w + x;
        const std::uint8_t a = argmax[o];
        gin[(pl * H + 2 * y + a / 2) * W + 2 * x + a % 2] = gout[o];
      }
    }
  }
  return gin;
}

template <typename T>
BasicTensor<T> upsample2_forward(const BasicTensor<T>& in) {
  Shape s = in.shape();
  const std::size_t h = s[3], w = s[4];
  s[3] *= 2;
  s[4] *= 2;
  BasicTensor<T> out(s);
  const std::size_t planes = in.size() / (h * w);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t x = 0; x < 2 * w; ++x) out[(pl * 2 * h + y) * 2 * w + x] = in[(pl * h + y / 2) * w + x / 2];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample2_backward(const BasicTensor<T>& gout) {
  Shape s = gout.shape();
  const std::size_t H = s[3], W = s[4];
  s[3] /= 2;
  s[4] /= 2;
  BasicTensor<T> gin(s);
  const std::size_t planes = gout.size() / (H * W);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) gin[(pl * (H / 2) + y / 2) * (W / 2) + x / 2] += gout[(pl * H + y) * W + x];
    }
  }
  return gin;
}

// Channel concatenation of (N, Ca, ...) and (N, Cb, ...).
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape s = a.shape();
  const std::size_t N = s[0], Ca = a.dim(1), Cb = b.dim(1);
  const std::size_t inner = a.size() / (N * Ca);
  s[1] = Ca + Cb;
  BasicTensor<T> out(s);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(&a[n * Ca * inner], Ca * inner, &out[n * (Ca + Cb) * inner]);
    std::copy_n(&b[n * Cb * inner], Cb * inner, &out[(n * (Ca + Cb) + Ca) * inner]);
  }
  return out;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& g, std::size_t Ca) {
  const std::size_t N = g.dim(0), C = g.dim(1), Cb = C - Ca;
  const std::size_t inner = g.size() / (N * C);
  Shape sa = g.shape(), sb = g.shape();
  sa[1] = Ca;
  sb[1] = Cb;
  BasicTensor<T> a(sa), b(sb);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(&g[n * C * inner], Ca * inner, &a[n * Ca * inner]);
    std::copy_n(&g[(n * C + Ca) * inner], Cb * inner, &b[n * Cb * inner]);
  }
  return {std::move(a), std::move(b)};
}

}  // namespace layers

template <typename T>
struct ForwardCache {
  struct ConvRecord {
    BasicTensor<T> input;
    BasicTensor<T> output;  // post-activation
  };
  std::map<std::string, ConvRecord> convs;
  std::vector<BasicTensor<T>> enc_masks;  // dropout masks, empty when inactive
  BasicTensor<T> mid_mask;
  bool mid_masked = false;
  std::vector<bool> enc_masked;
  std::vector<std::vector<std::uint8_t>> pool_argmax;
  std::vector<Shape> pool_in_shapes;
  Shape input_shape;
  Shape head_in_shape;
};

template <typename T>
using Gradients = ParamMap<T>;

namespace detail {

template <typename T>
BasicTensor<T> conv_layer(const ModelState<T>& s, const std::string& name, BasicTensor<T> x, bool relu,
                          ForwardCache<T>* cache) {
  BasicTensor<T> y = layers::conv_forward(x, s.params.at(name + ".weight"), s.params.at(name + ".bias"));
  if (relu) layers::relu_inplace(y);
  if (cache) cache->convs[name] = {std::move(x), y};
  return y;
}

template <typename T>
BasicTensor<T> conv_layer_backward(const ModelState<T>& s, const std::string& name, BasicTensor<T> g, bool relu,
                                   const ForwardCache<T>& cache, Gradients<T>& grads, bool want_input = true) {
  const auto& rec = cache.convs.at(name);
  if (relu) layers::relu_backward_inplace(g, rec.output);
  return layers::conv_backward(rec.input, s.params.at(name + ".weight"), g, grads.at(name + ".weight"),
                               grads.at(name + ".bias"), want_input);
}

template <typename T>
bool apply_dropout(BasicTensor<T>& x, double p, bool train_mode, Rng* rng, BasicTensor<T>& mask) {
  if (!train_mode || p <= 0.0) return false;
  if (!rng) throw Error("dropout in train mode needs a random generator");
  mask = BasicTensor<T>(x.shape());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng->uniform() < p ? T{0} : keep;
    x[i] *= mask[i];
  }
  return true;
}

template <typename T>
void mul_inplace(BasicTensor<T>& g, const BasicTensor<T>& mask) {
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask[i];
}

}  // namespace detail

/// Time-stacked inputs (N, in_channels, h, w) to logits (N, out_channels, h, w).
/// Pass a cache to record activations for backward().
template <typename T>
BasicTensor<T> forward(const ModelState<T>& s, const BasicTensor<T>& inputs, bool train_mode, Rng* rng,
                       ForwardCache<T>* cache = nullptr) {
  const UNetConfig& cfg = s.config;
  if (inputs.rank() != 4 || inputs.dim(1) != cfg.in_channels) {
    throw Error("network expects inputs (N," + std::to_string(cfg.in_channels) + ",h,w), got " +
                shape_str(inputs.shape()));
  }
  const std::size_t N = inputs.dim(0), H = inputs.dim(2), W = inputs.dim(3);
  if (H % cfg.divisor() || W % cfg.divisor()) {
    throw Error("spatial size " + std::to_string(H) + "x" + std::to_string(W) + " must be divisible by " +
                std::to_string(cfg.divisor()) + " (2^depth)");
  }
  const std::size_t D = cfg.time_axis();
  const std::size_t C = cfg.stem_channels();
  BasicTensor<T> x({N, C, D, H, W});
  // (N, F*C, h, w) -> (N, C, F, h, w); a no-op reorder when D == 1.
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t f = 0; f < D; ++f) {
      for (std::size_t c = 0; c < C; ++c) {
        std::copy_n(&inputs[((n * D + f) * C + c) * H * W], H * W, &x[(((n * C + c) * D) + f) * H * W]);
      }
    }
  }
  if (cache) {
    *cache = ForwardCache<T>{};
    cache->input_shape = x.shape();
    cache->enc_masks.resize(cfg.depth);
    cache->enc_masked.assign(cfg.depth, false);
  }

  std::vector<BasicTensor<T>> skips(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    x = detail::conv_layer(s, p + ".conv0", std::move(x), true, cache);
    x = detail::conv_layer(s, p + ".conv1", std::move(x), true, cache);
    BasicTensor<T> mask;
    const bool masked = detail::apply_dropout(x, cfg.dropout, train_mode, rng, mask);
    if (cache) {
      cache->enc_masked[l] = masked;
      cache->enc_masks[l] = std::move(mask);
      cache->pool_in_shapes.push_back(x.shape());
      cache->pool_argmax.emplace_back();
    }
    skips[l] = x;
    std::vector<std::uint8_t> argmax;
    x = layers::maxpool_forward(x, cache ? cache->pool_argmax.back() : argmax);
  }
  x = detail::conv_layer(s, "mid.conv0", std::move(x), true, cache);
  x = detail::conv_layer(s, "mid.conv1", std::move(x), true, cache);
  {
    BasicTensor<T> mask;
    const bool masked = detail::apply_dropout(x, cfg.dropout, train_mode, rng, mask);
    if (cache) {
      cache->mid_masked = masked;
      cache->mid_mask = std::move(mask);
    }
  }
  for (std::size_t l = cfg.depth; l-- > 0;) {
    const std::string p = "dec" + std::to_string(l);
    x = layers::concat_channels(layers::upsample2_forward(x), skips[l]);
    x = detail::conv_layer(s, p + ".conv0", std::move(x), true, cache);
    x = detail::conv_layer(s, p + ".conv1", std::move(x), true, cache);
  }
  x.reshape({N, cfg.width(0) * D, 1, H, W});
  if (cache) cache->head_in_shape = x.shape();
  x = detail::conv_layer(s, "head", std::move(x), false, cache);
  x.reshape({N, cfg.out_channels, H, W});
  return x;
}

/// Parameter gradients of sum(grad_logits * logits) for the cached forward pass.
template <typename T>
Gradients<T> backward(const ModelState<T>& s, const ForwardCache<T>& cache, const BasicTensor<T>& grad_logits) {
  const UNetConfig& cfg = s.config;
  if (cache.convs.empty()) throw Error("backward needs a cache recorded by forward");
  const Shape& in = cache.input_shape;
  if (grad_logits.shape() != Shape{in[0], cfg.out_channels, in[3], in[4]}) {
    throw Error("upstream gradient shape " + shape_str(grad_logits.shape()) + " does not match cached forward");
  }
  Gradients<T> grads;
  for (const auto& [k, t] : s.params) grads.emplace(k, BasicTensor<T>(t.shape()));

  BasicTensor<T> g = grad_logits.reshaped({in[0], cfg.out_channels, 1, in[3], in[4]});
  g = detail::conv_layer_backward(s, "head", std::move(g), false, cache, grads);
  g.reshape({in[0], cfg.width(0), in[2], in[3], in[4]});

  std::vector<BasicTensor<T>> skip_grads(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string p = "dec" + std::to_string(l);
    g = detail::conv_layer_backward(s, p + ".conv1", std::move(g), true, cache, grads);
    g = detail::conv_layer_backward(s, p + ".conv0", std::move(g), true, cache, grads);
    auto [up, skip] = layers::split_channels(g, cfg.width(l + 1));
    skip_grads[l] = std::move(skip);
    g = layers::upsample2_backward(up);
  }
  if (cache.mid_masked) detail::mul_inplace(g, cache.mid_mask);
  g = detail::conv_layer_backward(s, "mid.conv1", std::move(g), true, cache, grads);
  g = detail::conv_layer_backward(s, "mid.conv0", std::move(g), true, cache, grads);
  for (std::size_t l = cfg.depth; l-- > 0;) {
    const std::string p = "enc" + std::to_string(l);
    g = layers::maxpool_backward(g, cache.pool_argmax[l], cache.pool_in_shapes[l]);
    const auto& sg = skip_grads[l];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += sg[i];
    if (cache.enc_masked[l]) detail::mul_inplace(g, cache.enc_masks[l]);
    g = detail::conv_layer_backward(s, p + ".conv1", std::move(g), true, cache, grads);
    g = detail::conv_layer_backward(s, p + ".conv0", std::move(g), true, cache, grads, l > 0);
  }
  return grads;
}

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdamW update: decoupled decay theta *= (1 - lr*wd), then the
/// bias-corrected Adam step.
template <typename T>
void adamw_step(ModelState<T>& s, const Gradients<T>& grads, double lr, double weight_decay,
                const AdamWParams& hp = {}) {
  s.step += 1;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(s.step));
  for (auto& [name, theta] : s.params) {
    const auto git = grads.find(name);
    if (git == grads.end()) throw Error("missing gradient for parameter " + name);
    const auto& g = git->second;
    if (g.shape() != theta.shape()) throw Error("gradient shape mismatch for parameter " + name);
    auto& m = s.m.at(name);
    auto& v = s.v.at(name);
    const double decay = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      double th = static_cast<double>(theta[i]) * decay;
      const double mi = hp.beta1 * static_cast<double>(m[i]) + (1.0 - hp.beta1) * gi;
      const double vi = hp.beta2 * static_cast<double>(v[i]) + (1.0 - hp.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      th -= lr * (mi / c1) / (std::sqrt(vi / c2) + hp.eps);
      theta[i] = static_cast<T>(th);
    }
  }
}

}  // namespace nowcast
