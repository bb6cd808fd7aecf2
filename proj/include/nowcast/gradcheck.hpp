#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "nowcast/losses.hpp"
#include "nowcast/unet.hpp"

namespace nowcast {

struct NetworkGradTrial {
  std::uint64_t seed = 0;
  std::size_t samples = 50;  // randomly chosen weights to probe
  double step = 0.0;     // 0: 1e-3 in float32, 1e-5 in float64 (smaller steps cross fewer ReLU kinks)
  double corrupt = 0.0;  // test hook, added to each analytic entry
};

/// End-to-end check of the network backward pass: a depth-1, width-2 U-Net on
/// 8x8 inputs under the ML-Dice loss, compared against central differences on
/// randomly sampled weights. Returns the max relative error.
template <typename T>
double network_grad_check(const NetworkGradTrial& trial, const RainBins& bins = RainBins()) {
  UNetConfig cfg;
  cfg.in_channels = 2;
  cfg.out_channels = 2 * kNumBins;
  cfg.depth = 1;
  cfg.base_width = 2;
  Rng rng(trial.seed);
  ModelState<T> state = init_model<T>(cfg, rng);
  // Non-zero biases so every parameter carries a generic gradient.
  for (auto& [name, t] : state.params) {
    if (name.ends_with(".bias")) {
      for (auto& v : t.data()) v = static_cast<T>(0.1 * rng.normal());
    }
  }
  const std::size_t N = 2, S = 8;
  BasicTensor<T> x({N, cfg.in_channels, S, S});
  for (auto& v : x.data()) v = static_cast<T>(rng.normal());
  BasicTensor<T> truth({N * 2, S, S});
  for (auto& v : truth.data()) v = static_cast<T>(random_rate(rng, bins));
  LossConfig lc;
  lc.kind = LossKind::ml_dice;
  lc.use_logcosh = false;

  const auto loss_at = [&](const ModelState<T>& s) {
    const BasicTensor<T> logits = forward(s, x, false, nullptr);
    return loss_value(logits.reshaped({N * 2, kNumBins, S, S}), truth, bins, lc);
  };

  ForwardCache<T> cache;
  const BasicTensor<T> logits = forward(state, x, false, nullptr, &cache);
  const auto res = loss_with_grad(logits.reshaped({N * 2, kNumBins, S, S}), truth, bins, lc);
  const Gradients<T> grads = backward(state, cache, res.grad_logits.reshaped(logits.shape()));

  std::vector<std::pair<std::string, std::size_t>> all;
  for (const auto& [name, t] : state.params) {
    for (std::size_t i = 0; i < t.size(); ++i) all.emplace_back(name, i);
  }
  rng.shuffle(all.begin(), all.end());
  all.resize(std::min(all.size(), trial.samples));

  const double step = trial.step > 0.0 ? trial.step : (sizeof(T) == 4 ? 1e-3 : 1e-5);
  double worst = 0.0;
  for (const auto& [name, i] : all) {
    T& w = state.params.at(name)[i];
    const T orig = w;
    const T hi = static_cast<T>(orig + step);
    const T lo = static_cast<T>(orig - step);
    w = hi;
    const double up = loss_at(state);
    w = lo;
    const double down = loss_at(state);
    w = orig;
    const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double analytic = static_cast<double>(grads.at(name)[i]) + trial.corrupt;
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace nowcast
