#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nowcast/dataio.hpp"
#include "nowcast/gradcheck.hpp"
#include "nowcast/losses.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/pipeline.hpp"

namespace nowcast::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kCheckFailed = 1;
inline constexpr int kUsage = 2;

// Gradient-check tolerances: 64-bit loss checks and the 32-bit network check.
inline constexpr double kLossGradTol = 1e-4;
inline constexpr double kNetworkGradTol32 = 1e-2;
inline constexpr double kNetworkGradTol64 = 1e-4;

inline std::string manifest_for_split(const std::string& split) {
  if (split == "train") return "manifest.txt";
  if (split == "val") return "manifest_val.txt";
  throw UsageError("unknown split '" + split + "' (expected train or val)");
}

inline bool on_off(const std::string& v) { return v == "on"; }

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::string preset = "desk";
  std::optional<std::size_t> sequences;
};

struct TrainArgs {
  std::string data;
  std::string out;
  std::string history;
  std::string loss = "ml_dice";
  std::string tfi = "on";
  std::string aug = "on";
  std::string arch = "unet2d";
  std::string logcosh = "on";
  std::size_t epochs = TrainConfig{}.max_epochs;
  std::uint64_t seed = 0;
  double lr = TrainConfig{}.lr;
  double weight_decay = TrainConfig{}.weight_decay;
  std::size_t batch_size = TrainConfig{}.batch_size;
  double lr_decay = TrainConfig{}.lr_decay_factor;
  std::size_t patience = TrainConfig{}.early_stop_patience;
  std::size_t depth = UNetConfig{}.depth;
  std::size_t width = UNetConfig{}.base_width;
  double dropout = UNetConfig{}.dropout;
  double epsilon = LossConfig{}.epsilon;
  int numerator_factor = LossConfig{}.numerator_factor;
  bool quiet = false;
};

struct PredictArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string split = "val";
};

struct ScoreArgs {
  std::string pred;
  std::string truth;
  std::string split = "val";
};

struct GradcheckArgs {
  std::vector<std::string> loss{"dice", "ml_dice"};
  std::vector<std::string> logcosh{"off", "on"};
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  double corrupt = 0.0;
};

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  SynthConfig cfg = a.preset == "geometry" ? SynthConfig::geometry_preset() : SynthConfig::desk();
  cfg.seed = a.seed;
  if (a.sequences) {
    if (*a.sequences < 1) throw UsageError("--sequences must be >= 1");
    cfg.train_sequences = *a.sequences;
    cfg.val_sequences = std::max<std::size_t>(1, (*a.sequences + 2) / 3);
  }
  const SynthSummary s = synth_generate(cfg, a.out);
  out << "dataset: " << a.out << " (" << a.preset << ", seed " << a.seed << ")\n";
  out << "geometry: " << cfg.geometry.describe() << "\n";
  out << "sequences: " << s.train_sequences << " train, " << s.val_sequences << " val\n";
  out << "windows: " << s.train_windows << " train, " << s.val_windows << " val\n";
  out << "train radar bin histogram:";
  for (auto c : s.train_bin_histogram) out << ' ' << c;
  out << "\n";
  return kOk;
}

inline TrainConfig train_config_from(const TrainArgs& a) {
  TrainConfig t;
  t.lr = a.lr;
  t.weight_decay = a.weight_decay;
  t.batch_size = a.batch_size;
  t.max_epochs = a.epochs;
  t.lr_decay_factor = a.lr_decay;
  t.early_stop_patience = a.patience;
  t.seed = a.seed;
  t.loss.kind = parse_loss_kind(a.loss);
  t.loss.use_logcosh = on_off(a.logcosh);
  t.loss.epsilon = a.epsilon;
  t.loss.numerator_factor = a.numerator_factor;
  t.tfi_enabled = on_off(a.tfi);
  t.geometric_enabled = on_off(a.aug);
  t.validate();
  return t;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  const TrainConfig tcfg = train_config_from(a);
  UNetConfig ucfg;
  ucfg.depth = a.depth;
  ucfg.base_width = a.width;
  ucfg.dropout = a.dropout;
  ucfg.arch = parse_arch(a.arch);
  const Dataset train_set = Dataset::load(a.data, "manifest.txt");
  const Dataset val_set = Dataset::load(a.data, "manifest_val.txt");
  const auto on_epoch = [&](const HistoryRow& r) {
    if (a.quiet) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %3zu  train %.5f  val %.5f  lr %.3g  val mCSI %.5f\n", r.epoch,
                  r.train_loss, r.val_loss, r.lr, r.val_mcsi);
    out << buf << std::flush;
  };
  const TrainResult res = train(train_set, val_set, ucfg, tcfg, RainBins(), on_epoch);
  save_checkpoint(a.out, Checkpoint{res.state, train_set.info(), tcfg});
  const std::string hist = a.history.empty() ? a.out + ".history.tsv" : a.history;
  std::ofstream h(hist, std::ios::trunc);
  if (!h) throw FormatError(FormatError::Kind::io, "cannot write " + hist);
  write_history_tsv(h, res.history);
  out << "checkpoint: " << a.out << " (best epoch " << res.state.epoch << ", val loss "
      << format_double(res.state.best_val_loss) << ")\nhistory: " << hist << "\n";
  return kOk;
}

inline int cmd_predict(const PredictArgs& a, std::ostream& out, std::ostream& err) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const fs::path dir(a.data);
  const DatasetInfo data_geom = DatasetInfo::from_key_values(
      parse_key_values(detail::slurp(dir / "dataset.cfg"), (dir / "dataset.cfg").string()),
      (dir / "dataset.cfg").string());
  if (!(data_geom == ckpt.geometry)) {
    err << "error: dataset geometry [" << data_geom.describe() << "] does not match checkpoint geometry ["
        << ckpt.geometry.describe() << "]\n";
    return kCheckFailed;
  }
  const Dataset ds = Dataset::load(dir, manifest_for_split(a.split));
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (!fs::is_directory(a.out)) throw FormatError(FormatError::Kind::io, "cannot create " + a.out);
  const RainBins bins;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_tensor(fs::path(a.out) / detail::seq_name(i), predict(ckpt.state, ckpt.geometry, ds.sample(i).inputs, bins));
  }
  out << "wrote " << ds.size() << " predictions to " << a.out << "\n";
  return kOk;
}

// A dataset directory yields its split's target windows; any other directory
// yields its *.nwt files in name order.
inline std::vector<Tensor> load_rate_files(const fs::path& dir, const std::string& split) {
  if (fs::exists(dir / "dataset.cfg")) return truth_frames(Dataset::load(dir, manifest_for_split(split)));
  if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".nwt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor> out;
  for (const auto& f : files) out.push_back(read_tensor(f));
  return out;
}

inline int cmd_score(const ScoreArgs& a, std::ostream& out, std::ostream& err) {
  const auto preds = load_rate_files(a.pred, a.split);
  const auto truths = load_rate_files(a.truth, a.split);
  if (preds.size() != truths.size()) {
    err << "error: " << preds.size() << " prediction files but " << truths.size() << " truth files\n";
    return kUsage;
  }
  write_score_tsv(out, evaluate(preds, truths, RainBins()));
  return kOk;
}

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  bool ok = true;
  char buf[200];
  for (const auto& loss : a.loss) {
    for (const auto& lc : a.logcosh) {
      LossConfig cfg;
      cfg.kind = parse_loss_kind(loss);
      cfg.use_logcosh = on_off(lc);
      double worst = 0.0;
      for (std::size_t k = 0; k < a.seeds; ++k) {
        GradTrial trial;
        trial.seed = a.seed + k;
        trial.corrupt = a.corrupt;
        worst = std::max(worst, grad_check<double>(cfg, trial));
      }
      const bool pass = worst < kLossGradTol;
      ok = ok && pass;
      std::snprintf(buf, sizeof buf, "loss=%s logcosh=%s seeds=%zu max_rel_err=%.3e %s\n", loss.c_str(), lc.c_str(),
                    a.seeds, worst, pass ? "PASS" : "FAIL");
      out << buf;
    }
  }
  NetworkGradTrial nt;
  nt.seed = a.seed;
  nt.corrupt = a.corrupt;
  const double e32 = network_grad_check<float>(nt);
  const double e64 = network_grad_check<double>(nt);
  const bool p32 = e32 < kNetworkGradTol32;
  const bool p64 = e64 < kNetworkGradTol64;
  ok = ok && p32 && p64;
  std::snprintf(buf, sizeof buf, "network float32 max_rel_err=%.3e %s\nnetwork float64 max_rel_err=%.3e %s\n", e32,
                p32 ? "PASS" : "FAIL", e64, p64 ? "PASS" : "FAIL");
  out << buf;
  return ok ? kOk : kCheckFailed;
}

// Expands `train --config FILE` into explicit `--key=value` arguments placed
// before the command-line ones. Keys already given on the command line win;
// unknown keys surface as ordinary parse errors.
inline std::vector<std::string> expand_train_config(std::vector<std::string> args) {
  if (args.size() < 2 || args[1] != "train") return args;
  std::string path;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].starts_with("--config=")) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  const KeyValues kv = parse_key_values(detail::slurp(path), path);
  std::vector<std::string> extra;
  for (const auto& [key, value] : kv) {
    const std::string flag = "--" + key;
    const bool given = std::any_of(args.begin() + 2, args.end(), [&](const std::string& a) {
      return a == flag || a.starts_with(flag + "=");
    });
    if (key == "config") throw UsageError(path + ": config files cannot include other config files");
    if (!given) extra.push_back(flag + "=" + value);
  }
  args.insert(args.begin() + 2, extra.begin(), extra.end());
  return args;
}

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Precipitation nowcasting toolkit: synthetic data, U-Net training, prediction and CSI scoring"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  const std::vector<std::string> on_off_values{"on", "off"};

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic satellite/radar dataset");
  gen->add_option("--out", g.out, "Output dataset directory")->required();
  gen->add_option("--seed", g.seed, "Generator seed");
  gen->add_option("--preset", g.preset, "Grid preset")->check(CLI::IsMember({"desk", "geometry"}));
  gen->add_option("--sequences", g.sequences, "Training sequences (validation gets a third as many)");

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a U-Net on a dataset directory");
  std::string config_path;
  tr->add_option("--config", config_path, "Flat 'key = value' file; keys are option names without dashes");
  tr->add_option("--data", t.data, "Dataset directory")->required();
  tr->add_option("--out", t.out, "Checkpoint path")->required();
  tr->add_option("--history", t.history, "History TSV path (default <out>.history.tsv)");
  tr->add_option("--loss", t.loss, "Training loss")->check(CLI::IsMember({"dice", "ml_dice"}));
  tr->add_option("--tfi", t.tfi, "Temporal frame interpolation")->check(CLI::IsMember(on_off_values));
  tr->add_option("--aug", t.aug, "Random flips")->check(CLI::IsMember(on_off_values));
  tr->add_option("--arch", t.arch, "Network variant")->check(CLI::IsMember({"unet2d", "unet3d"}));
  tr->add_option("--logcosh", t.logcosh, "logcosh wrapper on the loss")->check(CLI::IsMember(on_off_values));
  tr->add_option("--epochs", t.epochs, "Maximum epochs");
  tr->add_option("--seed", t.seed, "Training seed");
  tr->add_option("--lr", t.lr, "Initial learning rate");
  tr->add_option("--weight_decay", t.weight_decay, "AdamW decoupled weight decay");
  tr->add_option("--batch_size", t.batch_size, "Mini-batch size");
  tr->add_option("--lr_decay", t.lr_decay, "LR factor applied when validation loss worsens");
  tr->add_option("--patience", t.patience, "Early-stopping patience in epochs");
  tr->add_option("--depth", t.depth, "U-Net levels");
  tr->add_option("--width", t.width, "Channels at the first level");
  tr->add_option("--dropout", t.dropout, "Dropout probability");
  tr->add_option("--epsilon", t.epsilon, "Dice smoothing");
  tr->add_option("--numerator_factor", t.numerator_factor, "Dice numerator factor (1 or 2)")
      ->check(CLI::IsMember({1, 2}));
  tr->add_flag("--quiet", t.quiet, "Suppress per-epoch progress");

  PredictArgs p;
  auto* pr = app.add_subcommand("predict", "Write rain-rate predictions for every manifest entry");
  pr->add_option("--ckpt", p.ckpt, "Checkpoint path")->required();
  pr->add_option("--data", p.data, "Dataset directory")->required();
  pr->add_option("--out", p.out, "Output directory")->required();
  pr->add_option("--split", p.split, "Manifest to predict")->check(CLI::IsMember({"train", "val"}));

  ScoreArgs s;
  auto* sc = app.add_subcommand("score", "Per-threshold CSI/F1 table of predictions against truth");
  sc->add_option("--pred", s.pred, "Prediction directory")->required();
  sc->add_option("--truth", s.truth, "Truth directory (rate files or a dataset directory)")->required();
  sc->add_option("--split", s.split, "Split used when a directory is a dataset")->check(CLI::IsMember({"train", "val"}));

  GradcheckArgs gc;
  auto* gk = app.add_subcommand("gradcheck", "Finite-difference checks of the loss and network gradients");
  gk->add_option("--loss", gc.loss, "Losses to check")->check(CLI::IsMember({"dice", "ml_dice"}));
  gk->add_option("--logcosh", gc.logcosh, "logcosh settings to check")->check(CLI::IsMember(on_off_values));
  gk->add_option("--seed", gc.seed, "First trial seed");
  gk->add_option("--seeds", gc.seeds, "Number of consecutive seeds per loss check");
  gk->add_option("--corrupt-grad", gc.corrupt)->group("");

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_train_config(std::move(args));
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  try {
    // CLI11 consumes the vector form back to front.
    if (!args.empty()) app.name(fs::path(args[0]).filename().string());
    std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(g, out);
    if (*tr) return cmd_train(t, out);
    if (*pr) return cmd_predict(p, out, err);
    if (*sc) return cmd_score(s, out, err);
    if (*gk) return cmd_gradcheck(gc, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}

}  // namespace nowcast::cli
