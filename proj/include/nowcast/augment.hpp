#pragma once

#include <cstddef>
#include <string>

#include "nowcast/tensor.hpp"

namespace nowcast {

// Satellite inputs (F_in, C, H_s, W_s) paired with radar targets (T, H_r, W_r).
struct Sample {
  Tensor inputs;
  Tensor targets;
  std::string region;
  std::size_t start = 0;
};

// A Sample carrying one extra trailing input frame and one extra trailing target frame.
struct SampleExt {
  Tensor inputs;
  Tensor targets;
  std::string region;
  std::size_t start = 0;
};

enum class FlipKind { identity, vflip, hflip, vhflip };

inline constexpr FlipKind kAllFlips[] = {FlipKind::identity, FlipKind::vflip, FlipKind::hflip, FlipKind::vhflip};

inline const char* to_string(FlipKind k) {
  switch (k) {
    case FlipKind::identity: return "identity";
    case FlipKind::vflip: return "vflip";
    case FlipKind::hflip: return "hflip";
    case FlipKind::vhflip: return "vhflip";
  }
  return "?";
}

namespace detail {

inline void require_spatial(const Shape& s, const char* what) {
  if (s.size() < 2) throw Error(std::string(what) + ": tensor needs at least two spatial axes");
}

}  // namespace detail

// Frames [first, first+count) along axis 0.
template <typename T>
BasicTensor<T> slice_frames(const BasicTensor<T>& t, std::size_t first, std::size_t count) {
  if (t.rank() == 0 || count == 0 || first + count > t.dim(0)) {
    throw Error("frame slice [" + std::to_string(first) + ", " + std::to_string(first + count) +
                ") out of range for " + shape_str(t.shape()));
  }
  Shape shape = t.shape();
  shape[0] = count;
  const std::size_t frame = t.size() / t.dim(0);
  std::vector<T> data(t.vec().begin() + static_cast<std::ptrdiff_t>(first * frame),
                      t.vec().begin() + static_cast<std::ptrdiff_t>((first + count) * frame));
  return BasicTensor<T>(std::move(shape), std::move(data));
}

template <typename T>
BasicTensor<T> flip_spatial(const BasicTensor<T>& t, FlipKind kind) {
  detail::require_spatial(t.shape(), "flip");
  if (kind == FlipKind::identity) return t;
  const bool v = kind == FlipKind::vflip || kind == FlipKind::vhflip;
  const bool h = kind == FlipKind::hflip || kind == FlipKind::vhflip;
  const std::size_t H = t.dim(t.rank() - 2);
  const std::size_t W = t.dim(t.rank() - 1);
  const std::size_t planes = t.size() / (H * W);
  BasicTensor<T> out(t.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < H; ++y) {
      const std::size_t sy = v ? H - 1 - y : y;
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sx = h ? W - 1 - x : x;
        out[(p * H + y) * W + x] = t[(p * H + sy) * W + sx];
      }
    }
  }
  return out;
}

// Window of size (h, w) at (oy, ox) on the last two axes.
template <typename T>
BasicTensor<T> crop_spatial(const BasicTensor<T>& t, std::size_t oy, std::size_t ox, std::size_t h, std::size_t w) {
  detail::require_spatial(t.shape(), "crop");
  const std::size_t H = t.dim(t.rank() - 2);
  const std::size_t W = t.dim(t.rank() - 1);
  if (oy + h > H || ox + w > W) {
    throw Error("crop window " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(oy) + "," +
                std::to_string(ox) + ") exceeds " + std::to_string(H) + "x" + std::to_string(W));
  }
  Shape shape = t.shape();
  shape[shape.size() - 2] = h;
  shape[shape.size() - 1] = w;
  BasicTensor<T> out(shape);
  const std::size_t planes = t.size() / (H * W);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      const T* src = &t[(p * H + oy + y) * W + ox];
      std::copy(src, src + w, &out[(p * h + y) * w]);
    }
  }
  return out;
}

inline std::size_t center_offset(std::size_t size, std::size_t side) { return (size - side) / 2; }

template <typename T>
BasicTensor<T> center_crop(const BasicTensor<T>& t, std::size_t side) {
  detail::require_spatial(t.shape(), "crop");
  const std::size_t H = t.dim(t.rank() - 2);
  const std::size_t W = t.dim(t.rank() - 1);
  if (side == 0 || side > H || side > W) {
    throw Error("crop side " + std::to_string(side) + " larger than image " + std::to_string(H) + "x" +
                std::to_string(W));
  }
  return crop_spatial(t, center_offset(H, side), center_offset(W, side), side, side);
}

// Zero padding on the last two axes.
template <typename T>
BasicTensor<T> pad_spatial(const BasicTensor<T>& t, std::size_t lo, std::size_t hi) {
  detail::require_spatial(t.shape(), "pad");
  if (lo == 0 && hi == 0) return t;
  const std::size_t H = t.dim(t.rank() - 2);
  const std::size_t W = t.dim(t.rank() - 1);
  const std::size_t Hp = H + lo + hi;
  const std::size_t Wp = W + lo + hi;
  Shape shape = t.shape();
  shape[shape.size() - 2] = Hp;
  shape[shape.size() - 1] = Wp;
  BasicTensor<T> out(shape);
  const std::size_t planes = t.size() / (H * W);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < H; ++y) {
      const T* src = &t[(p * H + y) * W];
      std::copy(src, src + W, &out[(p * Hp + y + lo) * Wp + lo]);
    }
  }
  return out;
}

inline Tensor crop_input(const Tensor& inputs, std::size_t side) {
  if (inputs.rank() != 4) throw Error("inputs must have shape (F,C,H,W), got " + shape_str(inputs.shape()));
  return center_crop(inputs, side);
}

inline Tensor crop_target(const Tensor& targets, std::size_t side) {
  if (targets.rank() != 3) throw Error("targets must have shape (T,H,W), got " + shape_str(targets.shape()));
  return center_crop(targets, side);
}

// Nearest-neighbour block replication on the last two axes.
template <typename T>
BasicTensor<T> upsample_restore(const BasicTensor<T>& patch, std::size_t factor) {
  detail::require_spatial(patch.shape(), "upsample");
  if (factor == 0) throw Error("upsample factor must be >= 1");
  if (factor == 1) return patch;
  const std::size_t h = patch.dim(patch.rank() - 2);
  const std::size_t w = patch.dim(patch.rank() - 1);
  Shape shape = patch.shape();
  shape[shape.size() - 2] = h * factor;
  shape[shape.size() - 1] = w * factor;
  BasicTensor<T> out(shape);
  const std::size_t planes = patch.size() / (h * w);
  const std::size_t W = w * factor;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h * factor; ++y) {
      for (std::size_t x = 0; x < W; ++x) out[(p * h * factor + y) * W + x] = patch[(p * h + y / factor) * w + x / factor];
    }
  }
  return out;
}

// Block mean on the last two axes; sizes must be divisible by factor.
template <typename T>
BasicTensor<T> avg_pool(const BasicTensor<T>& t, std::size_t factor) {
  detail::require_spatial(t.shape(), "pool");
  if (factor == 0) throw Error("pool factor must be >= 1");
  if (factor == 1) return t;
  const std::size_t H = t.dim(t.rank() - 2);
  const std::size_t W = t.dim(t.rank() - 1);
  if (H % factor || W % factor) throw Error("pool factor does not divide " + shape_str(t.shape()));
  const std::size_t h = H / factor;
  const std::size_t w = W / factor;
  Shape shape = t.shape();
  shape[shape.size() - 2] = h;
  shape[shape.size() - 1] = w;
  BasicTensor<T> out(shape);
  const std::size_t planes = t.size() / (H * W);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < factor; ++dy) {
          for (std::size_t dx = 0; dx < factor; ++dx) acc += t[(p * H + y * factor + dy) * W + x * factor + dx];
        }
        out[(p * h + y) * w + x] = static_cast<T>(acc * inv);
      }
    }
  }
  return out;
}

inline Sample tfi(const SampleExt& ext, double lam) {
  if (!(lam >= 0.0 && lam <= 1.0)) throw Error("TFI mixing factor must lie in [0,1], got " + std::to_string(lam));
  if (ext.inputs.rank() != 4 || ext.targets.rank() != 3 || ext.inputs.dim(0) < 2 || ext.targets.dim(0) < 2) {
    throw Error("malformed extended sample: inputs " + shape_str(ext.inputs.shape()) + ", targets " +
                shape_str(ext.targets.shape()));
  }
  const std::size_t frames_in = ext.inputs.dim(0) - 1;
  const std::size_t lead = ext.targets.dim(0) - 1;
  Sample s;
  s.region = ext.region;
  s.start = ext.start;
  s.inputs = lerp(slice_frames(ext.inputs, 0, frames_in), slice_frames(ext.inputs, 1, frames_in), lam);
  s.targets = lerp(slice_frames(ext.targets, 0, lead), slice_frames(ext.targets, 1, lead), lam);
  return s;
}

template <typename S>
S geometric(const S& s, FlipKind kind) {
  S out = s;
  out.inputs = flip_spatial(s.inputs, kind);
  out.targets = flip_spatial(s.targets, kind);
  return out;
}

}  // namespace nowcast
