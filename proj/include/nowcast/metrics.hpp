#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "nowcast/binning.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

struct ConfusionCounts {
  std::array<std::int64_t, kNumThresholds> tp{};
  std::array<std::int64_t, kNumThresholds> fp{};
  std::array<std::int64_t, kNumThresholds> fn{};
  std::int64_t pixels = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    for (std::size_t i = 0; i < kNumThresholds; ++i) {
      tp[i] += o.tp[i];
      fp[i] += o.fp[i];
      fn[i] += o.fn[i];
    }
    pixels += o.pixels;
    return *this;
  }

  bool operator==(const ConfusionCounts&) const = default;
};

struct ScoreReport {
  std::array<double, kNumThresholds> thresholds{};
  std::array<double, kNumThresholds> csi{};
  std::array<double, kNumThresholds> f1{};
  ConfusionCounts counts;
  double mcsi = 0.0;
  double mf1 = 0.0;
  std::int64_t pixels = 0;
};

template <typename T>
void accumulate(ConfusionCounts& counts, const BasicTensor<T>& pred, const BasicTensor<T>& truth,
                const RainBins& bins) {
  if (pred.shape() != truth.shape()) {
    throw Error("prediction shape " + shape_str(pred.shape()) + " does not match truth " + shape_str(truth.shape()));
  }
  for (std::size_t n = 0; n < pred.size(); ++n) {
    const double p = pred[n];
    const double y = truth[n];
    if (!(p >= 0.0) || !(y >= 0.0)) throw Error("rain rates must be non-negative");
    for (std::size_t i = 0; i < kNumThresholds; ++i) {
      const bool pe = exceeds(p, bins.threshold(i));
      const bool te = exceeds(y, bins.threshold(i));
      counts.tp[i] += pe && te;
      counts.fp[i] += pe && !te;
      counts.fn[i] += !pe && te;
    }
  }
  counts.pixels += static_cast<std::int64_t>(pred.size());
}

// A threshold with no events on either side scores 1.
inline ScoreReport finalize(const ConfusionCounts& counts, const RainBins& bins = RainBins()) {
  ScoreReport r;
  r.counts = counts;
  r.pixels = counts.pixels;
  for (std::size_t i = 0; i < kNumThresholds; ++i) {
    const auto tp = static_cast<double>(counts.tp[i]);
    const auto fp = static_cast<double>(counts.fp[i]);
    const auto fn = static_cast<double>(counts.fn[i]);
    r.thresholds[i] = bins.threshold(i);
    if (counts.tp[i] + counts.fp[i] + counts.fn[i] == 0) {
      r.csi[i] = 1.0;
      r.f1[i] = 1.0;
    } else {
      r.csi[i] = tp / (tp + fp + fn);
      r.f1[i] = 2.0 * tp / (2.0 * tp + fp + fn);
    }
    r.mcsi += r.csi[i];
    r.mf1 += r.f1[i];
  }
  r.mcsi /= kNumThresholds;
  r.mf1 /= kNumThresholds;
  return r;
}

// Micro accumulation over every pair, then one finalize.
template <typename T>
ScoreReport evaluate(const std::vector<BasicTensor<T>>& preds, const std::vector<BasicTensor<T>>& truths,
                     const RainBins& bins) {
  if (preds.size() != truths.size()) {
    throw Error("prediction count " + std::to_string(preds.size()) + " does not match truth count " +
                std::to_string(truths.size()));
  }
  ConfusionCounts counts;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].shape() != truths[i].shape()) {
      throw Error("pair " + std::to_string(i) + ": prediction shape " + shape_str(preds[i].shape()) +
                  " does not match truth " + shape_str(truths[i].shape()));
    }
    accumulate(counts, preds[i], truths[i], bins);
  }
  return finalize(counts, bins);
}

inline std::string format_fixed5(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.5f", v);
  return buf;
}

// Tab-separated table: header, one row per threshold, then mCSI and mF1.
inline void write_score_tsv(std::ostream& os, const ScoreReport& r) {
  os << "threshold\ttp\tfp\tfn\tcsi\tf1\n";
  for (std::size_t i = 0; i < kNumThresholds; ++i) {
    os << format_fixed5(r.thresholds[i]) << '\t' << r.counts.tp[i] << '\t' << r.counts.fp[i] << '\t'
       << r.counts.fn[i] << '\t' << format_fixed5(r.csi[i]) << '\t' << format_fixed5(r.f1[i]) << '\n';
  }
  os << "mCSI\t" << format_fixed5(r.mcsi) << '\n';
  os << "mF1\t" << format_fixed5(r.mf1) << '\n';
}

}  // namespace nowcast
