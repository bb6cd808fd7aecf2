#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>

#include "nowcast/tensor.hpp"

namespace nowcast {

inline constexpr std::size_t kNumThresholds = 5;
inline constexpr std::size_t kNumBins = kNumThresholds + 1;

// Event predicate shared by the exceedance loss and the CSI counts.
inline bool exceeds(double rate, double threshold) { return rate > threshold; }

/// Six half-open rainfall bins [s_i, s_{i+1}) cut by five thresholds (mm/h),
/// with one decode value per bin.
class RainBins {
 public:
  using Thresholds = std::array<double, kNumThresholds>;
  using Representatives = std::array<double, kNumBins>;

  RainBins() : RainBins(Thresholds{0.2, 1.0, 5.0, 10.0, 15.0}, Representatives{0.1, 0.6, 3.0, 7.5, 12.5, 20.0}) {}

  RainBins(Thresholds thresholds, Representatives representatives)
      : thresholds_(thresholds), representatives_(representatives) {
    for (std::size_t i = 0; i < kNumThresholds; ++i) {
      if (!(thresholds_[i] > 0.0) || (i > 0 && !(thresholds_[i] > thresholds_[i - 1]))) {
        throw Error("rain thresholds must be positive and strictly increasing");
      }
    }
    for (std::size_t i = 0; i < kNumBins; ++i) {
      // Checked at float precision too: decoded rates are stored as float.
      // Above bin 0 the lower edge is exclusive so a decoded value always
      // sits strictly on one side of every threshold.
      const double r = representatives_[i];
      const double rf = static_cast<float>(r);
      const bool above_lo = i == 0 ? (r >= 0.0 && rf >= 0.0) : (r > thresholds_[i - 1] && rf > thresholds_[i - 1]);
      const bool below_hi = i == kNumThresholds || (r < thresholds_[i] && rf < thresholds_[i]);
      if (!std::isfinite(r) || !std::isfinite(rf) || !above_lo || !below_hi) {
        throw Error("representative " + std::to_string(r) + " lies outside bin " + std::to_string(i));
      }
    }
  }

  // Replaces only the top-bin decode value (must exceed the last threshold).
  RainBins with_top_representative(double value) const {
    Representatives reps = representatives_;
    reps[kNumThresholds] = value;
    return RainBins(thresholds_, reps);
  }

  const Thresholds& thresholds() const noexcept { return thresholds_; }
  const Representatives& representatives() const noexcept { return representatives_; }
  double threshold(std::size_t i) const { return thresholds_.at(i); }
  double representative(std::size_t i) const { return representatives_.at(i); }

 private:
  Thresholds thresholds_;
  Representatives representatives_;
};

inline std::size_t quantize(double rate, const RainBins& bins) {
  if (!std::isfinite(rate) || rate < 0.0) {
    throw Error("rain rate must be finite and non-negative, got " + std::to_string(rate));
  }
  std::size_t i = 0;
  while (i < kNumThresholds && rate >= bins.threshold(i)) ++i;
  return i;
}

/// Per-pixel bin distribution, shape (B, 6, H, W) with B any leading batch of
/// timesteps. Construction checks range and normalisation.
template <typename T>
class ProbabilityField {
 public:
  static ProbabilityField checked(BasicTensor<T> probs, double tol = 1e-5) {
    validate_shape(probs.shape());
    const std::size_t plane = probs.dim(2) * probs.dim(3);
    for (std::size_t b = 0; b < probs.dim(0); ++b) {
      for (std::size_t p = 0; p < plane; ++p) {
        double sum = 0.0;
        for (std::size_t c = 0; c < kNumBins; ++c) {
          const double v = probs[(b * kNumBins + c) * plane + p];
          if (!(v >= -tol && v <= 1.0 + tol)) throw Error("probability outside [0,1]");
          sum += v;
        }
        if (std::abs(sum - 1.0) > tol) throw Error("bin probabilities do not sum to 1");
      }
    }
    return ProbabilityField(std::move(probs));
  }

  // For producers that guarantee the invariant by construction (softmax).
  static ProbabilityField trusted(BasicTensor<T> probs) {
    validate_shape(probs.shape());
    return ProbabilityField(std::move(probs));
  }

  const BasicTensor<T>& tensor() const noexcept { return probs_; }
  std::size_t batch() const { return probs_.dim(0); }
  std::size_t height() const { return probs_.dim(2); }
  std::size_t width() const { return probs_.dim(3); }

 private:
  explicit ProbabilityField(BasicTensor<T> probs) : probs_(std::move(probs)) {}

  static void validate_shape(const Shape& s) {
    if (s.size() != 4 || s[1] != kNumBins) {
      throw Error("probability field must have shape (T,6,H,W), got " + shape_str(s));
    }
  }

  BasicTensor<T> probs_;
};

template <typename T>
BasicTensor<T> onehot_targets(const BasicTensor<T>& truth, const RainBins& bins) {
  if (truth.rank() != 3) throw Error("truth must have shape (T,H,W), got " + shape_str(truth.shape()));
  const std::size_t n = truth.dim(0);
  const std::size_t plane = truth.dim(1) * truth.dim(2);
  BasicTensor<T> out({n, kNumBins, truth.dim(1), truth.dim(2)});
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t bin = quantize(static_cast<double>(truth[t * plane + p]), bins);
      out[(t * kNumBins + bin) * plane + p] = T{1};
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> exceedance(const ProbabilityField<T>& field, std::size_t threshold_index) {
  if (threshold_index >= kNumThresholds) {
    throw Error("threshold index " + std::to_string(threshold_index) + " out of range 0..4");
  }
  const auto& probs = field.tensor();
  const std::size_t plane = field.height() * field.width();
  BasicTensor<T> out({field.batch(), field.height(), field.width()});
  for (std::size_t t = 0; t < field.batch(); ++t) {
    for (std::size_t p = 0; p < plane; ++p) {
      double tail = 0.0;
      for (std::size_t m = threshold_index + 1; m < kNumBins; ++m) tail += probs[(t * kNumBins + m) * plane + p];
      out[t * plane + p] = static_cast<T>(tail);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> decode(const ProbabilityField<T>& field, const RainBins& bins) {
  const auto& probs = field.tensor();
  const std::size_t plane = field.height() * field.width();
  BasicTensor<T> out({field.batch(), field.height(), field.width()});
  for (std::size_t t = 0; t < field.batch(); ++t) {
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      T best_p = probs[(t * kNumBins) * plane + p];
      for (std::size_t c = 1; c < kNumBins; ++c) {
        const T v = probs[(t * kNumBins + c) * plane + p];
        if (v > best_p) {  // strict: ties stay with the lower bin
          best_p = v;
          best = c;
        }
      }
      out[t * plane + p] = static_cast<T>(bins.representative(best));
    }
  }
  return out;
}

}  // namespace nowcast
