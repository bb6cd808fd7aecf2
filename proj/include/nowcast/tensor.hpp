#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor. Rank 0 is a scalar holding one element.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : shape_{}, data_(1, T{0}) {}

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_dims(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw Error("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                  shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  Shape strides() const {
    Shape s(shape_.size(), 1);
    for (std::size_t j = shape_.size(); j-- > 1;) s[j - 1] = s[j] * shape_[j];
    return s;
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t j = 0;
    for (std::size_t i : idx) off = off * shape_[j++] + i;
    return off;
  }

  template <typename... I>
  T& at(I... idx) { return data_[offset({static_cast<std::size_t>(idx)...})]; }
  template <typename... I>
  const T& at(I... idx) const { return data_[offset({static_cast<std::size_t>(idx)...})]; }

  // Same data, new shape with equal element count.
  BasicTensor reshaped(Shape shape) const& {
    BasicTensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  BasicTensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }
  void reshape(Shape shape) {
    check_dims(shape);
    if (shape_numel(shape) != data_.size()) {
      throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor& other) const = default;

 private:
  static void check_dims(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) throw Error("tensor dimension sizes must be >= 1, got " + shape_str(shape));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <typename T>
BasicTensor<T> lerp(const BasicTensor<T>& a, const BasicTensor<T>& b, double lam) {
  if (a.shape() != b.shape()) {
    throw Error("lerp shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (!(lam >= 0.0 && lam <= 1.0)) throw Error("lerp factor must lie in [0,1], got " + std::to_string(lam));
  // Endpoints are returned verbatim so that lam in {0,1} is bitwise exact.
  if (lam == 0.0) return a;
  if (lam == 1.0) return b;
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = (1.0 - lam) * static_cast<double>(a[i]) + lam * static_cast<double>(b[i]);
    // Rounding must not leave the segment [a, b].
    const auto [lo, hi] = std::minmax(a[i], b[i]);
    out[i] = std::clamp(static_cast<T>(v), lo, hi);
  }
  return out;
}

template <typename T>
BasicTensor<T> reduce_sum(const BasicTensor<T>& t, const std::set<std::size_t>& axes) {
  for (std::size_t ax : axes) {
    if (ax >= t.rank()) {
      throw Error("reduce_sum axis " + std::to_string(ax) + " out of range for rank " +
                  std::to_string(t.rank()));
    }
  }
  if (axes.empty()) return t;
  Shape out_shape;
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (!axes.count(i)) out_shape.push_back(t.dim(i));
  }
  std::vector<double> acc(shape_numel(out_shape), 0.0);
  const Shape in_strides = t.strides();
  Shape out_strides(t.rank(), 0);
  {
    std::size_t s = 1;
    for (std::size_t i = t.rank(); i-- > 0;) {
      if (!axes.count(i)) {
        out_strides[i] = s;
        s *= t.dim(i);
      }
    }
  }
  for (std::size_t flat = 0; flat < t.size(); ++flat) {
    std::size_t rem = flat;
    std::size_t o = 0;
    for (std::size_t i = 0; i < t.rank(); ++i) {
      const std::size_t c = rem / in_strides[i];
      rem %= in_strides[i];
      o += c * out_strides[i];
    }
    acc[o] += static_cast<double>(t[flat]);
  }
  std::vector<T> data(acc.begin(), acc.end());
  return BasicTensor<T>(out_shape, std::move(data));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from (seed, stream).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

/// Deterministic generator: std::mt19937_64 seeded with the 64-bit seed.
/// Uniform draws take the top 53 bits of one engine output. Normal and
/// gamma draws use the standard library distributions, so streams are
/// reproducible within one toolchain build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

  double gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

  template <typename It>
  void shuffle(It first, It last) {
    // Fisher-Yates on our own uniform so the permutation is toolchain independent.
    for (auto n = static_cast<std::size_t>(last - first); n > 1; --n) {
      std::swap(first[n - 1], first[index(n)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

inline double sample_beta(Rng& rng, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) {
    throw Error("beta parameters must be positive, got a=" + std::to_string(a) + " b=" + std::to_string(b));
  }
  if (a == 1.0 && b == 1.0) return rng.uniform();
  const double x = rng.gamma(a);
  const double y = rng.gamma(b);
  const double s = x + y;
  return s > 0.0 ? x / s : 0.5;
}

}  // namespace nowcast
