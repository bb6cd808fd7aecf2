// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset; exit status is non-zero if any selected one fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "nowcast/nowcast.hpp"
#include "test_util.hpp"

using namespace nowcast;
using nowcast::testing::random_tensor;
using nowcast::testing::snapshot;
using nowcast::testing::TempDir;

namespace {

// Reference values from the calibration run of criterion 6 (desk preset,
// seed 0, configs/desk.cfg), pinned with the allowed slack.
constexpr double kRefLossRatio = 0.198;         // final / epoch-1 training loss
constexpr double kRefValMcsi = 0.5488;          // best-epoch validation mCSI
constexpr double kRefPersistenceMcsi = 0.4909;  // persistence on the validation split
constexpr double kRatioSlack = 0.10;            // relative
constexpr double kMcsiSlack = 0.02;             // absolute

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Desk training shared by criteria 6 and 7.
// ---------------------------------------------------------------------------

cli::TrainArgs desk_args() {
  const std::string path = std::string(NOWCAST_SOURCE_DIR) + "/configs/desk.cfg";
  const KeyValues kv = parse_key_values(detail::slurp(path), path);
  cli::TrainArgs a;
  const std::map<std::string, std::function<void(const std::string&)>> setters{
      {"lr", [&](const std::string& v) { a.lr = std::stod(v); }},
      {"weight_decay", [&](const std::string& v) { a.weight_decay = std::stod(v); }},
      {"batch_size", [&](const std::string& v) { a.batch_size = std::stoul(v); }},
      {"epochs", [&](const std::string& v) { a.epochs = std::stoul(v); }},
      {"lr_decay", [&](const std::string& v) { a.lr_decay = std::stod(v); }},
      {"patience", [&](const std::string& v) { a.patience = std::stoul(v); }},
      {"depth", [&](const std::string& v) { a.depth = std::stoul(v); }},
      {"width", [&](const std::string& v) { a.width = std::stoul(v); }},
      {"dropout", [&](const std::string& v) { a.dropout = std::stod(v); }},
      {"loss", [&](const std::string& v) { a.loss = v; }},
      {"tfi", [&](const std::string& v) { a.tfi = v; }},
      {"aug", [&](const std::string& v) { a.aug = v; }},
      {"logcosh", [&](const std::string& v) { a.logcosh = v; }},
      {"arch", [&](const std::string& v) { a.arch = v; }},
  };
  for (const auto& [k, v] : kv) {
    const auto it = setters.find(k);
    if (it == setters.end()) throw Error(path + ": key '" + k + "' not handled by the acceptance runner");
    it->second(v);
  }
  return a;
}

struct DeskRun {
  std::vector<HistoryRow> history;
  double val_mcsi = 0.0;
  double seconds = 0.0;
};

class DeskRunner {
 public:
  DeskRunner() : train_(synth_split(SynthConfig::desk(), false)), val_(synth_split(SynthConfig::desk(), true)) {}

  const Dataset& val() const { return val_; }

  const DeskRun& get(const std::string& loss, bool tfi, std::uint64_t seed) {
    const auto key = loss + (tfi ? "+tfi" : "-tfi") + "#" + std::to_string(seed);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    cli::TrainArgs a = desk_args();
    a.loss = loss;
    a.tfi = tfi ? "on" : "off";
    a.seed = seed;
    const TrainConfig tc = cli::train_config_from(a);
    UNetConfig u;
    u.depth = a.depth;
    u.base_width = a.width;
    u.dropout = a.dropout;
    u.arch = parse_arch(a.arch);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = train(train_, val_, u, tc);
    DeskRun run;
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.history = r.history;
    run.val_mcsi = validate_model(r.state, val_, tc, RainBins()).report.mcsi;
    std::ostringstream tsv;
    write_history_tsv(tsv, r.history);
    std::cout << "  run " << key << " (" << fmt("%.0f", run.seconds) << " s) history:\n";
    std::istringstream lines(tsv.str());
    for (std::string line; std::getline(lines, line);) std::cout << "    " << line << "\n";
    return cache_.emplace(key, std::move(run)).first->second;
  }

 private:
  Dataset train_, val_;
  std::map<std::string, DeskRun> cache_;
};

DeskRunner& desk() {
  static DeskRunner r;
  return r;
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst64 = 0.0;
  for (LossKind kind : {LossKind::dice, LossKind::ml_dice}) {
    for (bool lc : {false, true}) {
      LossConfig cfg;
      cfg.kind = kind;
      cfg.use_logcosh = lc;
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        GradTrial t;
        t.seed = seed;
        worst64 = std::max(worst64, grad_check<double>(cfg, t));
      }
    }
  }
  NetworkGradTrial nt;
  const double net32 = network_grad_check<float>(nt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.detail << "loss max_rel_err " << fmt("%.2e", worst64) << " (< 1e-4), network float32 " << fmt("%.2e", net32)
           << " (< 1e-2), " << fmt("%.1f", secs) << " s";
  o.check(worst64 < 1e-4, "loss gradients");
  o.check(net32 < 1e-2, "network gradient");
  o.check(secs < 60.0, "runtime");
  return o;
}

Outcome criterion2() {
  Outcome o;
  const RainBins bins;
  LossConfig ml;
  ml.kind = LossKind::ml_dice;
  ml.use_logcosh = false;
  LossConfig dc = ml;
  dc.kind = LossKind::dice;
  double table[kNumBins][kNumBins];
  double dice_spread = 0.0;
  for (std::size_t truth = 0; truth < kNumBins; ++truth) {
    const BasicTensor<double> rate({1, 1, 1}, bins.representative(truth));
    double wrong_min = INFINITY, wrong_max = -INFINITY;
    for (std::size_t pred = 0; pred < kNumBins; ++pred) {
      BasicTensor<double> p({1, kNumBins, 1, 1});
      p[pred] = 1.0;
      const auto field = ProbabilityField<double>::checked(p);
      table[truth][pred] = ml_dice_loss(field, rate, bins, ml);
      if (pred != truth) {
        const double d = dice_loss(field, onehot_targets(rate, bins), dc);
        wrong_min = std::min(wrong_min, d);
        wrong_max = std::max(wrong_max, d);
      }
    }
    dice_spread = std::max(dice_spread, wrong_max - wrong_min);
  }
  bool monotone = true;
  for (std::size_t t = 0; t < kNumBins; ++t) {
    for (std::size_t p = t + 1; p < kNumBins; ++p) monotone = monotone && table[t][p] > table[t][p - 1];
    for (std::size_t p = t; p-- > 0;) monotone = monotone && table[t][p] > table[t][p + 1];
  }
  o.detail << "36 pairs, ML-Dice strictly ordinal: " << (monotone ? "yes" : "no") << ", dice spread over wrong bins "
           << fmt("%.1e", dice_spread) << " (<= 1e-9)";
  o.check(monotone, "ordinal monotonicity");
  o.check(dice_spread <= 1e-9, "dice indifference");
  return o;
}

Outcome criterion3() {
  Outcome o;
  Rng rng(3);
  bool endpoints = true, commute = true, envelope = true;
  for (int trial = 0; trial < 100; ++trial) {
    SampleExt e;
    const std::size_t f = 1 + rng.index(4), c = 1 + rng.index(3), t = 1 + rng.index(4), h = 1 + rng.index(7);
    e.inputs = random_tensor(rng, {f + 1, c, h, h}, -3, 3);
    e.targets = random_tensor(rng, {t + 1, h, h}, 0, 30);
    endpoints = endpoints && tfi(e, 0.0).inputs == slice_frames(e.inputs, 0, f) &&
                tfi(e, 0.0).targets == slice_frames(e.targets, 0, t) &&
                tfi(e, 1.0).inputs == slice_frames(e.inputs, 1, f) &&
                tfi(e, 1.0).targets == slice_frames(e.targets, 1, t);
    const double lam = rng.uniform();
    const Sample s = tfi(e, lam);
    for (FlipKind k : kAllFlips) {
      const Sample a = geometric(s, k), b = tfi(geometric(e, k), lam);
      commute = commute && a.inputs == b.inputs && a.targets == b.targets;
    }
    const std::size_t in_frame = e.inputs.size() / (f + 1), tg_frame = e.targets.size() / (t + 1);
    for (std::size_t i = 0; i < s.inputs.size(); ++i) {
      const float a = e.inputs[i], b = e.inputs[i + in_frame];
      envelope = envelope && s.inputs[i] >= std::min(a, b) && s.inputs[i] <= std::max(a, b);
    }
    for (std::size_t i = 0; i < s.targets.size(); ++i) {
      const float a = e.targets[i], b = e.targets[i + tg_frame];
      envelope = envelope && s.targets[i] >= std::min(a, b) && s.targets[i] <= std::max(a, b);
    }
  }
  o.detail << "100 samples: endpoints " << endpoints << ", flip commutation " << commute << ", convex envelope "
           << envelope;
  o.check(endpoints, "endpoint identities");
  o.check(commute, "flip commutation");
  o.check(envelope, "convex envelope");
  return o;
}

Outcome criterion4() {
  Outcome o;
  Rng rng(4);
  const RainBins bins;
  const double thr[5] = {0.2, 1, 5, 10, 15};
  bool exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> preds, truths;
    std::int64_t tp[5] = {}, fp[5] = {}, fn[5] = {};
    for (std::size_t file = 0, n = 1 + rng.index(3); file < n; ++file) {
      const Shape s{1 + rng.index(3), 1 + rng.index(6), 1 + rng.index(6)};
      Tensor p(s), t(s);
      for (auto& v : p.data()) v = static_cast<float>(random_rate(rng, bins));
      for (auto& v : t.data()) v = static_cast<float>(random_rate(rng, bins));
      for (std::size_t k = 0; k < p.size(); k += 3) p[k] = static_cast<float>(thr[rng.index(5)]);
      for (std::size_t k = 0; k < p.size(); ++k) {
        for (int i = 0; i < 5; ++i) {
          const bool a = p[k] > thr[i], b = t[k] > thr[i];
          tp[i] += a && b;
          fp[i] += a && !b;
          fn[i] += !a && b;
        }
      }
      preds.push_back(p);
      truths.push_back(t);
    }
    const ScoreReport r = evaluate(preds, truths, bins);
    for (int i = 0; i < 5; ++i) {
      exact = exact && r.counts.tp[i] == tp[i] && r.counts.fp[i] == fp[i] && r.counts.fn[i] == fn[i];
    }
  }
  ConfusionCounts c;
  c.tp[0] = 1;
  c.fn[0] = 1;
  const ScoreReport spot = finalize(c);
  const double csi_err = std::abs(spot.csi[0] - 0.5), f1_err = std::abs(spot.f1[0] - 2.0 / 3.0);
  o.detail << "50 random field sets counted exactly: " << exact << ", CSI/F1 spot errors " << fmt("%.1e", csi_err)
           << "/" << fmt("%.1e", f1_err);
  o.check(exact, "oracle counts");
  o.check(csi_err <= 1e-12 && f1_err <= 1e-12, "closed forms");
  return o;
}

Outcome criterion5() {
  Outcome o;
  Rng rng(5);
  const RainBins base;
  Tensor logits({4, kNumBins, 8, 8});
  for (auto& v : logits.data()) v = static_cast<float>(2 * rng.normal());
  const auto field = softmax_bins(logits);
  Tensor truth({4, 8, 8});
  for (auto& v : truth.data()) v = static_cast<float>(random_rate(rng, base));
  const ScoreReport ref = evaluate<float>({decode(field, base)}, {truth}, base);
  int unchanged = 0;
  for (int trial = 0; trial < 20; ++trial) {
    RainBins::Representatives reps;
    for (std::size_t i = 0; i < kNumBins; ++i) {
      const double lo = i == 0 ? 0.0 : base.threshold(i - 1);
      const double hi = i == kNumThresholds ? 100.0 : base.threshold(i);
      reps[i] = lo + (hi - lo) * (0.001 + 0.998 * rng.uniform());
    }
    const RainBins alt(base.thresholds(), reps);
    unchanged += evaluate<float>({decode(field, alt)}, {truth}, alt).csi == ref.csi;
  }
  o.detail << unchanged << "/20 perturbations leave every CSI unchanged";
  o.check(unchanged == 20, "invariance");
  return o;
}

Outcome criterion6() {
  Outcome o;
  const double persistence = persistence_baseline(desk().val()).mcsi;
  const DeskRun& r = desk().get("ml_dice", true, 0);
  const double first = r.history.front().train_loss, last = r.history.back().train_loss;
  const double ratio = last / first;
  o.detail << r.history.size() << " epochs in " << fmt("%.0f", r.seconds) << " s; train loss " << fmt("%.5f", first)
           << " -> " << fmt("%.5f", last) << " (ratio " << fmt("%.3f", ratio) << ", pinned "
           << fmt("%.3f", kRefLossRatio) << "); val mCSI " << fmt("%.4f", r.val_mcsi) << " (pinned "
           << fmt("%.4f", kRefValMcsi) << ") vs persistence " << fmt("%.4f", persistence) << " (pinned "
           << fmt("%.4f", kRefPersistenceMcsi) << ")";
  o.check(ratio <= 0.5, "loss ratio <= 0.5");
  o.check(std::abs(ratio - kRefLossRatio) <= kRatioSlack * kRefLossRatio, "loss ratio within 10% of reference");
  o.check(r.val_mcsi >= persistence + 0.05, "val mCSI >= persistence + 0.05");
  o.check(std::abs(r.val_mcsi - kRefValMcsi) <= kMcsiSlack, "val mCSI within 0.02 of reference");
  o.check(std::abs(persistence - kRefPersistenceMcsi) <= kMcsiSlack, "persistence within 0.02 of reference");
  o.check(r.seconds < 15 * 60, "runtime");
  return o;
}

Outcome criterion7() {
  Outcome o;
  double ml_tfi = 0, dice_tfi = 0, ml_notfi = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ml_tfi += desk().get("ml_dice", true, seed).val_mcsi / 3;
    dice_tfi += desk().get("dice", true, seed).val_mcsi / 3;
    ml_notfi += desk().get("ml_dice", false, seed).val_mcsi / 3;
  }
  o.detail << "mean val mCSI over seeds 0-2: ML-Dice " << fmt("%.4f", ml_tfi) << " vs Dice " << fmt("%.4f", dice_tfi)
           << "; TFI on " << fmt("%.4f", ml_tfi) << " vs off " << fmt("%.4f", ml_notfi);
  o.check(ml_tfi >= dice_tfi - 0.005, "ML-Dice >= Dice - 0.005");
  o.check(ml_tfi >= ml_notfi - 0.005, "TFI on >= TFI off - 0.005");
  return o;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nowcast");
  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cout << "  nowcast " << args[1] << " exited " << code << ": " << err.str();
  return code;
}

Outcome criterion8() {
  Outcome o;
  TempDir d;
  const auto a = (d / "a").string(), b = (d / "b").string();
  bool ok = run_cli({"gen-data", "--out", a, "--seed", "0", "--preset", "desk"}) == 0 &&
            run_cli({"gen-data", "--out", b, "--seed", "0", "--preset", "desk"}) == 0;
  const bool same_data = ok && snapshot(a) == snapshot(b);
  for (const char* name : {"m1", "m2"}) {
    ok = ok && run_cli({"train", "--data", a, "--out", (d / (std::string(name) + ".ckpt")).string(), "--epochs", "3",
                        "--width", "4", "--batch_size", "4", "--lr", "3e-3", "--quiet"}) == 0;
  }
  using nowcast::testing::read_file;
  const bool same_ckpt = ok && read_file(d / "m1.ckpt") == read_file(d / "m2.ckpt");
  const bool same_hist = ok && read_file(d / "m1.ckpt.history.tsv") == read_file(d / "m2.ckpt.history.tsv");
  o.detail << "gen-data identical: " << same_data << ", checkpoints identical: " << same_ckpt
           << ", histories identical: " << same_hist;
  o.check(ok, "commands succeed");
  o.check(same_data && same_ckpt && same_hist, "byte identity");
  return o;
}

Outcome criterion9() {
  Outcome o;
  const SynthConfig sc = SynthConfig::geometry_preset();
  const Dataset ds = synth_split(sc, true);
  const DatasetInfo& info = ds.info();
  const NetGeometry g = NetGeometry::make(info, 3);
  UNetConfig base;
  base.base_width = 2;
  Rng rng(9);
  const auto state = init_model<float>(unet_for(info, base), rng);
  const Tensor out = predict(state, info, ds.sample(0).inputs);
  bool blocks = out.shape() == Shape{info.lead_times, 252, 252};
  for (std::size_t t = 0; blocks && t < out.dim(0); ++t) {
    for (std::size_t y = 0; y < 252; ++y) {
      for (std::size_t x = 0; x < 252; ++x) blocks = blocks && out.at(t, y, x) == out.at(t, y / 6 * 6, x / 6 * 6);
    }
  }
  const std::size_t in_off = center_offset(info.sat_side, g.crop);
  o.detail << "crop " << g.crop << " pad " << g.padded << " patch " << g.patch << " x" << info.factor << "; output "
           << shape_str(out.shape()) << ", 6x6 blocks constant: " << blocks << "; offsets " << in_off << " and "
           << center_offset(info.sat_side, g.patch);
  o.check(g.crop == 126 && g.padded == 128 && g.patch == 42, "pipeline sizes");
  o.check(blocks, "constant 6x6 blocks on 252x252");
  o.check(in_off == 63 && center_offset(info.sat_side, g.patch) == 105, "offsets 63 and 105");
  return o;
}

Outcome criterion10() {
  Outcome o;
  Rng rng(10);
  int exact = 0, crashes = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor t = random_tensor(rng, nowcast::testing::random_shape(rng, rng.index(5), 6), -1e30, 1e30);
    const std::string b = encode_tensor(t);
    try {
      const Tensor u = decode_tensor(b);
      exact += u.shape() == t.shape() && encode_tensor(u) == b;
      // Random header damage must either decode consistently or raise FormatError.
      std::string bad = b;
      const std::size_t pos = rng.index(std::min<std::size_t>(bad.size(), 16 + 8 * t.rank()));
      bad[pos] = static_cast<char>(bad[pos] ^ (1 + rng.index(255)));
      try {
        const Tensor v = decode_tensor(bad);
        if (encode_tensor(v) != bad) ++crashes;
      } catch (const FormatError&) {
      }
      try {
        decode_tensor(b.substr(0, rng.index(b.size())));
        ++crashes;
      } catch (const FormatError&) {
      }
    } catch (const std::exception&) {
      ++crashes;
    }
  }
  auto kind_of = [](const std::string& bytes) -> int {
    try {
      decode_tensor(bytes);
    } catch (const FormatError& e) {
      return static_cast<int>(e.kind());
    } catch (...) {
    }
    return -1;
  };
  const std::string good = encode_tensor(Tensor({2, 2}, 1.0f));
  auto patched = [&](std::size_t at, std::uint32_t v) {
    std::string s = good;
    for (int i = 0; i < 4; ++i) s[at + i] = static_cast<char>((v >> (8 * i)) & 0xff);
    return s;
  };
  std::string magic = good;
  magic[1] = '?';
  using K = FormatError::Kind;
  const bool kinds = kind_of(magic) == static_cast<int>(K::bad_magic) &&
                     kind_of(patched(4, 9)) == static_cast<int>(K::unsupported_version) &&
                     kind_of(patched(8, 2)) == static_cast<int>(K::unsupported_dtype) &&
                     kind_of(patched(12, 1000)) == static_cast<int>(K::bad_shape) &&
                     kind_of(good.substr(0, 20)) == static_cast<int>(K::truncated);
  o.detail << exact << "/1000 bit-exact round trips, " << crashes << " unexpected outcomes on damaged input, error kinds "
           << (kinds ? "as designated" : "WRONG");
  o.check(exact == 1000, "round trip");
  o.check(crashes == 0, "damaged input handling");
  o.check(kinds, "error kinds");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                       criterion6, criterion7, criterion8, criterion9, criterion10};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failures += !o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail.str() << std::endl;
  }
  return failures ? 1 : 0;
}
