#pragma once

#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nowcast/augment.hpp"
#include "nowcast/binning.hpp"
#include "nowcast/dataio.hpp"
#include "nowcast/losses.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/unet.hpp"

namespace nowcast {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.02;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 90;
  double lr_decay_factor = 0.9;
  std::size_t early_stop_patience = 10;
  std::uint64_t seed = 0;
  LossConfig loss;
  bool tfi_enabled = true;
  bool geometric_enabled = true;
  double tfi_a = 1.0;
  double tfi_b = 1.0;
  // Start the head at the training-set bin frequencies instead of uniform.
  bool prior_bias_init = true;

  void validate() const {
    if (!(lr > 0.0)) throw Error("learning rate must be positive");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0)) throw Error("lr decay factor must lie in (0,1)");
    if (batch_size < 1) throw Error("batch size must be >= 1");
    if (weight_decay < 0.0) throw Error("weight decay must be non-negative");
    if (!(tfi_a > 0.0 && tfi_b > 0.0)) throw Error("TFI beta parameters must be positive");
    loss.validate();
  }
};

/// Where the network sees the data: the input crop is zero-padded up to a
/// multiple of 2^depth, and the output patch sits centred inside the crop.
struct NetGeometry {
  std::size_t crop = 0;
  std::size_t padded = 0;
  std::size_t pad_lo = 0;
  std::size_t pad_hi = 0;
  std::size_t patch = 0;
  std::size_t patch_offset = 0;  // in padded logits coordinates
  std::size_t factor = 1;

  static NetGeometry make(const DatasetInfo& info, std::size_t depth) {
    info.validate();
    NetGeometry g;
    const std::size_t div = std::size_t{1} << depth;
    g.crop = info.input_crop;
    g.padded = (g.crop + div - 1) / div * div;
    g.pad_lo = (g.padded - g.crop) / 2;
    g.pad_hi = g.padded - g.crop - g.pad_lo;
    g.patch = info.patch();
    g.patch_offset = g.pad_lo + center_offset(g.crop, g.patch);
    g.factor = info.factor;
    return g;
  }
};

inline UNetConfig unet_for(const DatasetInfo& info, UNetConfig base) {
  base.in_channels = info.frames_in * info.bands;
  base.out_channels = info.lead_times * kNumBins;
  base.frames = info.frames_in;
  base.validate();
  return base;
}

// (F, C, H_s, W_s) -> (F*C, padded, padded)
inline Tensor network_input(const Tensor& inputs, const NetGeometry& g) {
  Tensor x = crop_input(inputs, g.crop);
  x.reshape({x.dim(0) * x.dim(1), g.crop, g.crop});
  return pad_spatial(x, g.pad_lo, g.pad_hi);
}

// Supervision target at satellite resolution: block-mean of the radar frames.
inline Tensor training_target(const Tensor& targets, const NetGeometry& g) { return avg_pool(targets, g.factor); }

inline Tensor stack_batch(const std::vector<Tensor>& items) {
  Shape s = items.at(0).shape();
  s.insert(s.begin(), items.size());
  Tensor out(s);
  const std::size_t n = items[0].size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items[0].shape()) throw Error("inconsistent shapes within a batch");
    std::copy_n(items[i].data().data(), n, &out[i * n]);
  }
  return out;
}

// Logits (N, T*6, P, P) -> (N*T, 6, patch, patch).
template <typename T>
BasicTensor<T> logits_patch(const BasicTensor<T>& logits, const NetGeometry& g) {
  const std::size_t N = logits.dim(0);
  const std::size_t lead = logits.dim(1) / kNumBins;
  return crop_spatial(logits, g.patch_offset, g.patch_offset, g.patch, g.patch)
      .reshaped({N * lead, kNumBins, g.patch, g.patch});
}

// Inverse of logits_patch for gradients; zeros outside the patch.
template <typename T>
BasicTensor<T> scatter_patch_grad(const BasicTensor<T>& grad, const Shape& logits_shape, const NetGeometry& g) {
  BasicTensor<T> out(logits_shape);
  const std::size_t P = logits_shape[2];
  const std::size_t planes = out.size() / (P * P);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t y = 0; y < g.patch; ++y) {
      std::copy_n(&grad[(pl * g.patch + y) * g.patch], g.patch,
                  &out[(pl * P + g.patch_offset + y) * P + g.patch_offset]);
    }
  }
  return out;
}

/// Eval-mode rain rates (T, H_r, W_r) for a batch of raw input sequences.
inline std::vector<Tensor> predict_batch(const ModelState<float>& state, const DatasetInfo& info,
                                         const std::vector<Tensor>& inputs, const RainBins& bins) {
  const NetGeometry g = NetGeometry::make(info, state.config.depth);
  std::vector<Tensor> xs;
  for (const auto& in : inputs) {
    if (in.rank() != 4 || in.dim(0) != info.frames_in || in.dim(1) != info.bands || in.dim(2) != info.sat_side ||
        in.dim(3) != info.sat_side) {
      throw Error("input " + shape_str(in.shape()) + " does not match model geometry: " + info.describe());
    }
    xs.push_back(network_input(in, g));
  }
  const Tensor logits = forward(state, stack_batch(xs), false, nullptr);
  const auto field = softmax_bins(logits_patch(logits, g));
  const Tensor rates = upsample_restore(decode(field, bins), g.factor);
  std::vector<Tensor> out;
  const std::size_t per = info.lead_times * info.radar_side * info.radar_side;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<float> d(rates.vec().begin() + static_cast<std::ptrdiff_t>(i * per),
                         rates.vec().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    out.emplace_back(Shape{info.lead_times, info.radar_side, info.radar_side}, std::move(d));
  }
  return out;
}

inline Tensor predict(const ModelState<float>& state, const DatasetInfo& info, const Tensor& inputs,
                      const RainBins& bins = RainBins()) {
  return predict_batch(state, info, {inputs}, bins).front();
}

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate used during the epoch
  double val_mcsi = 0.0;
};

inline void write_history_tsv(std::ostream& os, const std::vector<HistoryRow>& rows) {
  os << "epoch\ttrain_loss\tval_loss\tlr\tval_mcsi\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu\t%.8f\t%.8f\t%.8g\t%.5f\n", r.epoch, r.train_loss, r.val_loss, r.lr,
                  r.val_mcsi);
    os << buf;
  }
}

struct ValidationResult {
  double loss = 0.0;
  ScoreReport report;
};

inline ValidationResult validate_model(const ModelState<float>& state, const Dataset& val, const TrainConfig& tcfg,
                                       const RainBins& bins) {
  const NetGeometry g = NetGeometry::make(val.info(), state.config.depth);
  ValidationResult r;
  ConfusionCounts counts;
  std::size_t batches = 0;
  for (std::size_t b0 = 0; b0 < val.size(); b0 += tcfg.batch_size) {
    const std::size_t b1 = std::min(val.size(), b0 + tcfg.batch_size);
    std::vector<Tensor> xs, ys, truths;
    for (std::size_t i = b0; i < b1; ++i) {
      Sample s = val.sample(i);
      xs.push_back(network_input(s.inputs, g));
      ys.push_back(training_target(s.targets, g));
      truths.push_back(std::move(s.targets));
    }
    const Tensor logits = forward(state, stack_batch(xs), false, nullptr);
    const Tensor patch = logits_patch(logits, g);
    Tensor y = stack_batch(ys);
    y.reshape({patch.dim(0), g.patch, g.patch});
    r.loss += loss_value(patch, y, bins, tcfg.loss);
    ++batches;
    const Tensor rates = upsample_restore(decode(softmax_bins(patch), bins), g.factor);
    Tensor truth = stack_batch(truths);
    truth.reshape(rates.shape());
    accumulate(counts, rates, truth, bins);
  }
  r.loss /= static_cast<double>(batches);
  r.report = finalize(counts, bins);
  return r;
}

/// Log bin frequencies of the training targets (add-one smoothed, centred),
/// one value per bin.
inline std::array<double, kNumBins> log_bin_prior(const Dataset& ds, const NetGeometry& g, const RainBins& bins) {
  std::array<double, kNumBins> count;
  count.fill(1.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor t = training_target(ds.sample(i).targets, g);
    for (float v : t.data()) count[quantize(v, bins)] += 1.0;
  }
  std::array<double, kNumBins> out;
  double mean = 0.0;
  for (std::size_t k = 0; k < kNumBins; ++k) mean += (out[k] = std::log(count[k])) / kNumBins;
  for (auto& v : out) v -= mean;
  return out;
}

struct TrainResult {
  ModelState<float> state;  // parameters of the best validation epoch
  std::vector<HistoryRow> history;
};

using EpochCallback = std::function<void(const HistoryRow&)>;

/// Mini-batch AdamW training with TFI and flip augmentation, the
/// worsening-validation learning-rate decay and early stopping.
inline TrainResult train(const Dataset& train_set, const Dataset& val_set, UNetConfig ucfg, const TrainConfig& tcfg,
                         const RainBins& bins = RainBins(), const EpochCallback& on_epoch = {}) {
  tcfg.validate();
  if (train_set.empty()) throw Error("training set is empty");
  if (val_set.empty()) throw Error("validation set is empty");
  if (!(train_set.info() == val_set.info())) throw Error("training and validation geometry differ");
  const DatasetInfo& info = train_set.info();
  ucfg = unet_for(info, ucfg);
  const NetGeometry g = NetGeometry::make(info, ucfg.depth);

  Rng init_rng(mix_seed(tcfg.seed, 1));
  Rng data_rng(mix_seed(tcfg.seed, 2));
  Rng dropout_rng(mix_seed(tcfg.seed, 3));

  ModelState<float> state = init_model<float>(ucfg, init_rng);
  if (tcfg.prior_bias_init) {
    // Uniform initial bins put P(rate > 0.2) at 5/6 everywhere, which starts
    // the lowest-threshold Dice term in its "rain everywhere" plateau.
    const auto prior = log_bin_prior(train_set, g, bins);
    auto& bias = state.params.at("head.bias");
    for (std::size_t c = 0; c < bias.size(); ++c) bias[c] = static_cast<float>(prior[c % kNumBins]);
  }
  state.lr = tcfg.lr;
  TrainResult result;
  result.state = state;
  double lr = tcfg.lr;
  double prev_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    data_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += tcfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + tcfg.batch_size);
      std::vector<Tensor> xs, ys;
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        Sample s;
        if (tcfg.tfi_enabled) {
          const double lam = sample_beta(data_rng, tcfg.tfi_a, tcfg.tfi_b);
          auto ext = train_set.sample_ext(i);
          s = ext ? tfi(*ext, lam) : train_set.sample(i);
        } else {
          s = train_set.sample(i);
        }
        if (tcfg.geometric_enabled) s = geometric(s, kAllFlips[data_rng.index(4)]);
        xs.push_back(network_input(s.inputs, g));
        ys.push_back(training_target(s.targets, g));
      }
      ForwardCache<float> cache;
      const Tensor logits = forward(state, stack_batch(xs), true, &dropout_rng, &cache);
      const Tensor patch = logits_patch(logits, g);
      Tensor y = stack_batch(ys);
      y.reshape({patch.dim(0), g.patch, g.patch});
      const auto lr_res = loss_with_grad(patch, y, bins, tcfg.loss);
      const Tensor grad = scatter_patch_grad(
          lr_res.grad_logits.reshaped({logits.dim(0), logits.dim(1), g.patch, g.patch}), logits.shape(), g);
      adamw_step(state, backward(state, cache, grad), lr, tcfg.weight_decay);
      loss_sum += lr_res.value;
      ++batches;
    }

    const ValidationResult v = validate_model(state, val_set, tcfg, bins);
    HistoryRow row{epoch, loss_sum / static_cast<double>(batches), v.loss, lr, v.report.mcsi};
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);

    state.epoch = epoch;
    if (v.loss < state.best_val_loss) {
      state.best_val_loss = v.loss;
      since_best = 0;
      result.state = state;
      result.state.lr = lr;
    } else {
      ++since_best;
    }
    if (v.loss > prev_val) lr *= tcfg.lr_decay_factor;
    prev_val = v.loss;
    state.lr = lr;
    if (since_best >= tcfg.early_stop_patience) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: a tensor archive with keys param/<path>, adam_m/<path> and
// adam_v/<path>, plus key = value metadata.
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelState<float> state;
  DatasetInfo geometry;
  TrainConfig train;
};

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string encode_checkpoint(const Checkpoint& c) {
  KeyValues kv = c.geometry.to_key_values();
  const auto& u = c.state.config;
  kv["arch"] = to_string(u.arch);
  kv["depth"] = std::to_string(u.depth);
  kv["base_width"] = std::to_string(u.base_width);
  kv["dropout"] = format_double(u.dropout);
  kv["in_channels"] = std::to_string(u.in_channels);
  kv["out_channels"] = std::to_string(u.out_channels);
  kv["epoch"] = std::to_string(c.state.epoch);
  kv["step"] = std::to_string(c.state.step);
  kv["best_val_loss"] = format_double(c.state.best_val_loss);
  kv["lr"] = format_double(c.state.lr);
  kv["seed"] = std::to_string(c.train.seed);
  kv["loss"] = to_string(c.train.loss.kind);
  kv["logcosh"] = c.train.loss.use_logcosh ? "on" : "off";
  kv["epsilon"] = format_double(c.train.loss.epsilon);
  kv["numerator_factor"] = std::to_string(c.train.loss.numerator_factor);
  kv["tfi"] = c.train.tfi_enabled ? "on" : "off";
  kv["aug"] = c.train.geometric_enabled ? "on" : "off";
  kv["prior_init"] = c.train.prior_bias_init ? "on" : "off";
  kv["initial_lr"] = format_double(c.train.lr);
  kv["weight_decay"] = format_double(c.train.weight_decay);
  kv["batch_size"] = std::to_string(c.train.batch_size);
  TensorArchive a;
  a.metadata = format_key_values(kv);
  for (const auto& [k, t] : c.state.params) a.tensors.emplace("param/" + k, t);
  for (const auto& [k, t] : c.state.m) a.tensors.emplace("adam_m/" + k, t);
  for (const auto& [k, t] : c.state.v) a.tensors.emplace("adam_v/" + k, t);
  return encode_archive(a);
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& context = "checkpoint") {
  const TensorArchive a = decode_archive(bytes, context);
  const KeyValues kv = parse_key_values(a.metadata, context);
  Checkpoint c;
  c.geometry = DatasetInfo::from_key_values(kv, context);
  UNetConfig u;
  u.arch = parse_arch(require_key(kv, "arch", context));
  u.depth = require_size(kv, "depth", context);
  u.base_width = require_size(kv, "base_width", context);
  u.dropout = std::stod(require_key(kv, "dropout", context));
  u = unet_for(c.geometry, u);
  if (u.in_channels != require_size(kv, "in_channels", context) ||
      u.out_channels != require_size(kv, "out_channels", context)) {
    throw Error(context + ": channel counts inconsistent with geometry");
  }
  c.state.config = u;
  c.state.epoch = require_size(kv, "epoch", context);
  c.state.step = require_size(kv, "step", context);
  c.state.best_val_loss = std::stod(require_key(kv, "best_val_loss", context));
  c.state.lr = std::stod(require_key(kv, "lr", context));
  c.train.seed = require_size(kv, "seed", context);
  c.train.loss.kind = parse_loss_kind(require_key(kv, "loss", context));
  c.train.loss.use_logcosh = require_key(kv, "logcosh", context) == "on";
  c.train.loss.epsilon = std::stod(require_key(kv, "epsilon", context));
  c.train.loss.numerator_factor = static_cast<int>(require_size(kv, "numerator_factor", context));
  c.train.tfi_enabled = require_key(kv, "tfi", context) == "on";
  c.train.geometric_enabled = require_key(kv, "aug", context) == "on";
  c.train.prior_bias_init = require_key(kv, "prior_init", context) == "on";
  c.train.lr = std::stod(require_key(kv, "initial_lr", context));
  c.train.weight_decay = std::stod(require_key(kv, "weight_decay", context));
  c.train.batch_size = require_size(kv, "batch_size", context);
  for (const auto& spec : layer_table(u)) {
    for (const char* suffix : {".weight", ".bias"}) {
      const std::string name = spec.name + suffix;
      const Shape want = std::string(suffix) == ".weight" ? Shape{spec.out, spec.in, spec.kt, spec.k, spec.k}
                                                           : Shape{spec.out};
      for (const char* group : {"param/", "adam_m/", "adam_v/"}) {
        const auto it = a.tensors.find(group + name);
        if (it == a.tensors.end()) throw Error(context + ": missing tensor " + group + name);
        if (it->second.shape() != want) throw Error(context + ": tensor " + group + name + " has wrong shape");
      }
      c.state.params.emplace(name, a.tensors.at("param/" + name));
      c.state.m.emplace(name, a.tensors.at("adam_m/" + name));
      c.state.v.emplace(name, a.tensors.at("adam_v/" + name));
    }
  }
  return c;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) { detail::spit(path, encode_checkpoint(c)); }

inline Checkpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(detail::slurp(path), path.string());
}

}  // namespace nowcast
