#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nowcast/binning.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

enum class LossKind { dice, ml_dice };

inline const char* to_string(LossKind k) { return k == LossKind::dice ? "dice" : "ml_dice"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "dice") return LossKind::dice;
  if (s == "ml_dice") return LossKind::ml_dice;
  throw Error("unknown loss kind '" + s + "' (expected dice or ml_dice)");
}

struct LossConfig {
  double epsilon = 1e-6;
  // 2 is the usual Dice numerator; 1 reproduces the formula exactly as printed.
  int numerator_factor = 2;
  bool use_logcosh = true;
  LossKind kind = LossKind::ml_dice;

  void validate() const {
    if (!(epsilon > 0.0)) throw Error("loss epsilon must be positive");
    if (numerator_factor != 1 && numerator_factor != 2) throw Error("numerator_factor must be 1 or 2");
  }
};

template <typename T>
struct LossResult {
  double value = 0.0;
  BasicTensor<T> grad_logits;
};

template <typename T>
ProbabilityField<T> softmax_bins(const BasicTensor<T>& logits) {
  if (logits.rank() != 4 || logits.dim(1) != kNumBins) {
    throw Error("logits must have shape (T,6,H,W), got " + shape_str(logits.shape()));
  }
  const std::size_t plane = logits.dim(2) * logits.dim(3);
  BasicTensor<T> probs(logits.shape());
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const std::size_t base = b * kNumBins * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = -INFINITY;
      for (std::size_t c = 0; c < kNumBins; ++c) {
        const double z = logits[base + c * plane + p];
        if (!std::isfinite(z)) throw Error("non-finite logit");
        mx = std::max(mx, z);
      }
      double e[kNumBins];
      double sum = 0.0;
      for (std::size_t c = 0; c < kNumBins; ++c) {
        e[c] = std::exp(static_cast<double>(logits[base + c * plane + p]) - mx);
        sum += e[c];
      }
      for (std::size_t c = 0; c < kNumBins; ++c) probs[base + c * plane + p] = static_cast<T>(e[c] / sum);
    }
  }
  return ProbabilityField<T>::trusted(std::move(probs));
}

// ln(cosh(x)) without overflow.
inline double logcosh_wrap(double x) {
  const double a = std::abs(x);
  return a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0);
}

namespace detail {

// Soft set agreement summed over K channels of (B,K,H,W) tensors:
//   loss = 1 - mean_k (f*sum(g*q) + eps) / (sum(g) + sum(q) + eps)
// Sums pool the batch and spatial axes. Writes dloss/dq when grad is non-null.
template <typename T>
double soft_dice(const BasicTensor<T>& g, const BasicTensor<T>& q, std::size_t K, const LossConfig& cfg,
                 BasicTensor<T>* grad) {
  const std::size_t B = g.dim(0);
  const std::size_t plane = g.size() / (B * K);
  std::vector<double> inter(K, 0.0), card(K, 0.0), pred(K, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t base = (b * K + k) * plane;
      double si = 0.0, sg = 0.0, sq = 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        const double gv = g[base + p];
        const double qv = q[base + p];
        si += gv * qv;
        sg += gv;
        sq += qv;
      }
      inter[k] += si;
      card[k] += sg;
      pred[k] += sq;
    }
  }
  const double f = cfg.numerator_factor;
  const double eps = cfg.epsilon;
  double mean_coef = 0.0;
  std::vector<double> d_inter(K), d_den(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double num = f * inter[k] + eps;
    const double den = card[k] + pred[k] + eps;
    mean_coef += num / den;
    // d coef/d q_n = f*g_n/den - num/den^2, scaled by -1/K.
    d_inter[k] = -f / (den * static_cast<double>(K));
    d_den[k] = num / (den * den * static_cast<double>(K));
  }
  mean_coef /= static_cast<double>(K);
  if (grad) {
    *grad = BasicTensor<T>(q.shape());
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t base = (b * K + k) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          (*grad)[base + p] = static_cast<T>(d_inter[k] * static_cast<double>(g[base + p]) + d_den[k]);
        }
      }
    }
  }
  return 1.0 - mean_coef;
}

template <typename T>
void require_same_spatial(const BasicTensor<T>& probs, const BasicTensor<T>& truth) {
  if (truth.rank() != 3 || truth.dim(0) != probs.dim(0) || truth.dim(1) != probs.dim(2) ||
      truth.dim(2) != probs.dim(3)) {
    throw Error("truth shape " + shape_str(truth.shape()) + " does not match probabilities " +
                shape_str(probs.shape()));
  }
}

// Tail sums of the bin distribution, shape (B,5,H,W).
template <typename T>
BasicTensor<T> exceedance_stack(const ProbabilityField<T>& field) {
  const auto& probs = field.tensor();
  const std::size_t plane = field.height() * field.width();
  BasicTensor<T> q({field.batch(), kNumThresholds, field.height(), field.width()});
  for (std::size_t b = 0; b < field.batch(); ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      double tail = 0.0;
      for (std::size_t m = kNumBins; m-- > 1;) {
        tail += probs[(b * kNumBins + m) * plane + p];
        q[(b * kNumThresholds + m - 1) * plane + p] = static_cast<T>(tail);
      }
    }
  }
  return q;
}

// Indicator of truth > s_k, shape (B,5,H,W).
template <typename T>
BasicTensor<T> exceedance_targets(const BasicTensor<T>& truth, const RainBins& bins) {
  const std::size_t plane = truth.dim(1) * truth.dim(2);
  BasicTensor<T> g({truth.dim(0), kNumThresholds, truth.dim(1), truth.dim(2)});
  for (std::size_t b = 0; b < truth.dim(0); ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double y = truth[b * plane + p];
      if (!std::isfinite(y) || y < 0.0) throw Error("rain rate must be finite and non-negative");
      for (std::size_t k = 0; k < kNumThresholds; ++k) {
        g[(b * kNumThresholds + k) * plane + p] = exceeds(y, bins.threshold(k)) ? T{1} : T{0};
      }
    }
  }
  return g;
}

}  // namespace detail

template <typename T>
double dice_loss(const ProbabilityField<T>& field, const BasicTensor<T>& onehot, const LossConfig& cfg) {
  cfg.validate();
  if (onehot.shape() != field.tensor().shape()) {
    throw Error("one-hot shape " + shape_str(onehot.shape()) + " does not match probabilities " +
                shape_str(field.tensor().shape()));
  }
  return detail::soft_dice<T>(onehot, field.tensor(), kNumBins, cfg, nullptr);
}

template <typename T>
double ml_dice_loss(const ProbabilityField<T>& field, const BasicTensor<T>& truth_rates, const RainBins& bins,
                    const LossConfig& cfg) {
  cfg.validate();
  detail::require_same_spatial(field.tensor(), truth_rates);
  const auto q = detail::exceedance_stack(field);
  const auto g = detail::exceedance_targets(truth_rates, bins);
  return detail::soft_dice<T>(g, q, kNumThresholds, cfg, nullptr);
}

/// Loss value and its exact gradient with respect to the logits, composing
/// softmax, the configured Dice variant and the optional logcosh wrapper.
template <typename T>
LossResult<T> loss_with_grad(const BasicTensor<T>& logits, const BasicTensor<T>& truth_rates, const RainBins& bins,
                             const LossConfig& cfg) {
  cfg.validate();
  const auto field = softmax_bins(logits);
  const auto& probs = field.tensor();
  detail::require_same_spatial(probs, truth_rates);
  const std::size_t B = field.batch();
  const std::size_t plane = field.height() * field.width();

  BasicTensor<T> grad_probs(probs.shape());
  double raw = 0.0;
  if (cfg.kind == LossKind::dice) {
    const auto onehot = onehot_targets(truth_rates, bins);
    raw = detail::soft_dice<T>(onehot, probs, kNumBins, cfg, &grad_probs);
  } else {
    const auto q = detail::exceedance_stack(field);
    const auto g = detail::exceedance_targets(truth_rates, bins);
    BasicTensor<T> grad_q;
    raw = detail::soft_dice<T>(g, q, kNumThresholds, cfg, &grad_q);
    // q_k = sum_{m>k} p_m, so dL/dp_m = sum_{k<m} dL/dq_k.
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t p = 0; p < plane; ++p) {
        double run = 0.0;
        grad_probs[(b * kNumBins) * plane + p] = T{0};
        for (std::size_t m = 1; m < kNumBins; ++m) {
          run += grad_q[(b * kNumThresholds + m - 1) * plane + p];
          grad_probs[(b * kNumBins + m) * plane + p] = static_cast<T>(run);
        }
      }
    }
  }

  double scale = 1.0;
  LossResult<T> result;
  result.value = raw;
  if (cfg.use_logcosh) {
    result.value = logcosh_wrap(raw);
    scale = std::tanh(raw);
  }

  // Softmax backward: dz_j = p_j (dp_j - sum_k p_k dp_k).
  result.grad_logits = BasicTensor<T>(logits.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t base = b * kNumBins * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < kNumBins; ++c) {
        dot += static_cast<double>(probs[base + c * plane + p]) * grad_probs[base + c * plane + p];
      }
      for (std::size_t c = 0; c < kNumBins; ++c) {
        const double pc = probs[base + c * plane + p];
        result.grad_logits[base + c * plane + p] =
            static_cast<T>(scale * pc * (static_cast<double>(grad_probs[base + c * plane + p]) - dot));
      }
    }
  }
  return result;
}

template <typename T>
double loss_value(const BasicTensor<T>& logits, const BasicTensor<T>& truth_rates, const RainBins& bins,
                  const LossConfig& cfg) {
  const auto field = softmax_bins(logits);
  const double raw = cfg.kind == LossKind::dice ? dice_loss(field, onehot_targets(truth_rates, bins), cfg)
                                                : ml_dice_loss(field, truth_rates, bins, cfg);
  return cfg.use_logcosh ? logcosh_wrap(raw) : raw;
}

// Rates spread evenly over the six bins; the top bin draws from [s_4, s_4 + 10).
inline double random_rate(Rng& rng, const RainBins& bins) {
  const std::size_t bin = rng.index(kNumBins);
  const double lo = bin == 0 ? 0.0 : bins.threshold(bin - 1);
  const double hi = bin == kNumThresholds ? bins.threshold(kNumThresholds - 1) + 10.0 : bins.threshold(bin);
  return lo + (hi - lo) * rng.uniform();
}

struct GradTrial {
  Shape logits_shape{2, kNumBins, 4, 4};
  std::uint64_t seed = 0;
  double step = 1e-3;
  // Test hook: added to every analytic gradient entry to show the check can fail.
  double corrupt = 0.0;
};

/// Max over logits of |analytic - numeric| / max(1, |numeric|), numeric by
/// central differences. T selects the evaluation precision.
template <typename T = double>
double grad_check(const LossConfig& cfg, const GradTrial& trial, const RainBins& bins = RainBins()) {
  Rng rng(trial.seed);
  BasicTensor<T> logits(trial.logits_shape);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = static_cast<T>(1.5 * rng.normal());
  const Shape& s = trial.logits_shape;
  BasicTensor<T> truth({s.at(0), s.at(2), s.at(3)});
  for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = static_cast<T>(random_rate(rng, bins));

  const auto analytic = loss_with_grad(logits, truth, bins, cfg).grad_logits;
  double worst = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const T orig = logits[i];
    const T hi = static_cast<T>(orig + trial.step);
    const T lo = static_cast<T>(orig - trial.step);
    logits[i] = hi;
    const double up = loss_value(logits, truth, bins, cfg);
    logits[i] = lo;
    const double down = loss_value(logits, truth, bins, cfg);
    logits[i] = orig;
    const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double a = static_cast<double>(analytic[i]) + trial.corrupt;
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace nowcast
