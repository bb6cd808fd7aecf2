#include <gtest/gtest.h>

#include <cmath>

#include "nowcast/losses.hpp"
#include "test_util.hpp"

using namespace nowcast;

namespace {

LossConfig raw_cfg(LossKind kind, int factor = 2) {
  LossConfig c;
  c.kind = kind;
  c.use_logcosh = false;
  c.numerator_factor = factor;
  return c;
}

ProbabilityField<double> onehot_pixel(std::size_t bin) {
  BasicTensor<double> p({1, kNumBins, 1, 1});
  p[bin] = 1.0;
  return ProbabilityField<double>::checked(p);
}

BasicTensor<double> rate_pixel(double r) { return BasicTensor<double>({1, 1, 1}, r); }

// Midpoint-ish rate inside bin i.
double rate_in_bin(std::size_t i) { return RainBins().representative(i); }

double ml_single(std::size_t truth_bin, std::size_t pred_bin, const LossConfig& cfg = raw_cfg(LossKind::ml_dice)) {
  return ml_dice_loss(onehot_pixel(pred_bin), rate_pixel(rate_in_bin(truth_bin)), RainBins(), cfg);
}

double dice_single(std::size_t truth_bin, std::size_t pred_bin, const LossConfig& cfg = raw_cfg(LossKind::dice)) {
  return dice_loss(onehot_pixel(pred_bin), onehot_targets(rate_pixel(rate_in_bin(truth_bin)), RainBins()), cfg);
}

}  // namespace

TEST(Softmax, Examples) {
  const auto u = softmax_bins(Tensor({1, kNumBins, 1, 1}, 3.0f));
  for (float v : u.tensor().data()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-7);

  Tensor l({1, kNumBins, 1, 1});
  l[0] = 10.0f;
  EXPECT_NEAR(softmax_bins(l).tensor()[0], std::exp(10.0) / (std::exp(10.0) + 5), 1e-6);

  Rng rng(1);
  BasicTensor<double> z({2, kNumBins, 2, 3});
  for (auto& v : z.data()) v = rng.normal();
  auto shifted = z;
  for (auto& v : shifted.data()) v += 17.25;
  const auto a = softmax_bins(z).tensor();
  const auto b = softmax_bins(shifted).tensor();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Softmax, ErrorsOnNonFiniteOrBadShape) {
  Tensor l({1, kNumBins, 1, 1});
  l[2] = NAN;
  EXPECT_THROW(softmax_bins(l), Error);
  l[2] = INFINITY;
  EXPECT_THROW(softmax_bins(l), Error);
  EXPECT_THROW(softmax_bins(Tensor({1, 5, 1, 1})), Error);
}

TEST(SoftmaxProperty, RowsSumToOne) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor l({3, kNumBins, 4, 4});
    for (auto& v : l.data()) v = static_cast<float>(rng.uniform(-50, 50));
    EXPECT_NO_THROW(ProbabilityField<float>::checked(softmax_bins(l).tensor()));
  }
}

TEST(DiceLoss, SinglePixelExamples) {
  // Smoothing eps = 1e-6 shifts each value by O(eps).
  EXPECT_NEAR(dice_single(2, 2), 0.0, 1e-6);
  EXPECT_NEAR(dice_single(2, 3), 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(dice_single(2, 4), 1.0 / 3.0, 1e-6);
}

TEST(DiceLoss, ShapeMismatch) {
  EXPECT_THROW(dice_loss(onehot_pixel(0), BasicTensor<double>({1, kNumBins, 1, 2}), raw_cfg(LossKind::dice)), Error);
}

TEST(MlDiceLoss, SinglePixelExamples) {
  // Truth 3 mm/h lies in [1, 5).
  const auto truth = rate_pixel(3.0);
  const auto cfg = raw_cfg(LossKind::ml_dice);
  EXPECT_NEAR(ml_dice_loss(onehot_pixel(2), truth, RainBins(), cfg), 0.0, 1e-6);
  EXPECT_NEAR(ml_dice_loss(onehot_pixel(3), truth, RainBins(), cfg), 0.2, 1e-6);
  EXPECT_NEAR(ml_dice_loss(onehot_pixel(4), truth, RainBins(), cfg), 0.4, 1e-6);
}

TEST(MlDiceLoss, OrdinalOracleAll36Pairs) {
  // Direct evaluation of the per-threshold coefficients for one pixel in the
  // eps -> 0 limit: threshold k scores 1 when truth and prediction agree on
  // "exceeds s_k", else 0. Loss = (number of disagreeing thresholds) / 5.
  for (std::size_t i = 0; i < kNumBins; ++i) {
    for (std::size_t j = 0; j < kNumBins; ++j) {
      const double oracle = static_cast<double>(i > j ? i - j : j - i) / 5.0;
      EXPECT_NEAR(ml_single(i, j), oracle, 1e-6) << i << "," << j;
    }
    for (std::size_t j = i + 1; j + 1 < kNumBins; ++j) EXPECT_LT(ml_single(i, j), ml_single(i, j + 1));
    for (std::size_t j = i; j-- > 1;) EXPECT_LT(ml_single(i, j), ml_single(i, j - 1));
  }
}

TEST(DiceLoss, IndifferentAcrossWrongBins) {
  for (std::size_t i = 0; i < kNumBins; ++i) {
    double ref = -1.0;
    for (std::size_t j = 0; j < kNumBins; ++j) {
      if (j == i) continue;
      const double l = dice_single(i, j);
      if (ref < 0) ref = l;
      EXPECT_NEAR(l, ref, 1e-9) << i << "," << j;
    }
  }
}

TEST(Losses, PerfectPredictionNearZero) {
  Rng rng(3);
  const RainBins bins;
  BasicTensor<double> truth({2, 5, 5});
  for (auto& v : truth.data()) v = random_rate(rng, bins);
  const auto onehot = onehot_targets(truth, bins);
  const auto field = ProbabilityField<double>::checked(onehot);
  const LossConfig d = raw_cfg(LossKind::dice);
  EXPECT_LE(dice_loss(field, onehot, d), 10 * d.epsilon);
  EXPECT_LE(ml_dice_loss(field, truth, bins, raw_cfg(LossKind::ml_dice)), 10 * d.epsilon);
}

TEST(LossesProperty, RawLossInUnitInterval) {
  Rng rng(4);
  const RainBins bins;
  for (int trial = 0; trial < 50; ++trial) {
    BasicTensor<double> logits({1 + rng.index(3), kNumBins, 1 + rng.index(4), 1 + rng.index(4)});
    for (auto& v : logits.data()) v = 3 * rng.normal();
    BasicTensor<double> truth({logits.dim(0), logits.dim(2), logits.dim(3)});
    for (auto& v : truth.data()) v = random_rate(rng, bins);
    for (LossKind k : {LossKind::dice, LossKind::ml_dice}) {
      const double l = loss_value(logits, truth, bins, raw_cfg(k));
      ASSERT_GE(l, 0.0);
      ASSERT_LE(l, 1.0);
    }
  }
}

TEST(Losses, PaperLiteralFactorHalvesCoefficients) {
  // With factor 1 a perfect single pixel scores coefficient 1/2 on the present class.
  const auto cfg = raw_cfg(LossKind::dice, 1);
  EXPECT_NEAR(dice_single(2, 2, cfg), 1.0 - (5.0 + 0.5) / 6.0, 1e-6);
}

TEST(Losses, ConfigValidation) {
  LossConfig c;
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = LossConfig{};
  c.numerator_factor = 3;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_THROW(parse_loss_kind("focal"), Error);
}

TEST(Logcosh, Examples) {
  EXPECT_EQ(logcosh_wrap(0.0), 0.0);
  EXPECT_NEAR(logcosh_wrap(0.01), 0.00005, 1e-8);
  EXPECT_NEAR(logcosh_wrap(100.0), 99.30685, 1e-5);
  EXPECT_NEAR(logcosh_wrap(1000.0), 1000.0 - std::log(2.0), 1e-9);
}

TEST(LogcoshProperty, MonotoneAndBelowIdentity) {
  double prev = 0.0;
  for (int i = 1; i <= 1000; ++i) {
    const double x = i * 0.01;
    const double v = logcosh_wrap(x);
    ASSERT_GT(v, prev);
    ASSERT_LE(v, x);
    ASSERT_NEAR(v, std::log(std::cosh(x)), 1e-12);
    prev = v;
  }
}

TEST(LossWithGrad, ValueMatchesComposition) {
  Rng rng(5);
  const RainBins bins;
  BasicTensor<double> logits({2, kNumBins, 3, 3});
  for (auto& v : logits.data()) v = rng.normal();
  BasicTensor<double> truth({2, 3, 3});
  for (auto& v : truth.data()) v = random_rate(rng, bins);
  for (LossKind k : {LossKind::dice, LossKind::ml_dice}) {
    for (bool lc : {false, true}) {
      LossConfig c = raw_cfg(k);
      c.use_logcosh = lc;
      EXPECT_NEAR(loss_with_grad(logits, truth, bins, c).value, loss_value(logits, truth, bins, c), 1e-15);
    }
  }
}

TEST(LossWithGrad, ShiftInvarianceAndZeroChannelSum) {
  Rng rng(6);
  const RainBins bins;
  BasicTensor<double> logits({2, kNumBins, 2, 2});
  for (auto& v : logits.data()) v = rng.normal();
  BasicTensor<double> truth({2, 2, 2});
  for (auto& v : truth.data()) v = random_rate(rng, bins);
  for (LossKind k : {LossKind::dice, LossKind::ml_dice}) {
    LossConfig c;
    c.kind = k;
    const auto r = loss_with_grad(logits, truth, bins, c);
    auto shifted = logits;
    for (auto& v : shifted.data()) v += 4.0;
    EXPECT_NEAR(loss_value(shifted, truth, bins, c), r.value, 1e-12);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t p = 0; p < 4; ++p) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < kNumBins; ++ch) s += r.grad_logits[(b * kNumBins + ch) * 4 + p];
        EXPECT_NEAR(s, 0.0, 1e-12);
      }
    }
  }
}

TEST(GradCheck, ConstantLogitsUniformTruth) {
  // Hand-rolled: constant logits, dice, every pixel in bin 1.
  BasicTensor<double> logits({1, kNumBins, 3, 3}, 0.5);
  BasicTensor<double> truth({1, 3, 3}, 0.5);
  const LossConfig c = raw_cfg(LossKind::dice);
  const auto r = loss_with_grad(logits, truth, RainBins(), c);
  const double h = 1e-4;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    auto up = logits, down = logits;
    up[i] += h;
    down[i] -= h;
    const double num = (loss_value(up, truth, RainBins(), c) - loss_value(down, truth, RainBins(), c)) / (2 * h);
    EXPECT_LE(std::abs(r.grad_logits[i] - num) / std::max(1.0, std::abs(num)), 1e-3);
  }
}

TEST(GradCheck, SinglePixelMlDiceCases) {
  for (std::size_t j : {2u, 3u, 4u}) {
    BasicTensor<double> logits({1, kNumBins, 1, 1});
    logits[j] = 3.0;  // soft version of one-hot bin j
    const auto truth = rate_pixel(3.0);
    for (bool lc : {false, true}) {
      LossConfig c = raw_cfg(LossKind::ml_dice);
      c.use_logcosh = lc;
      const auto r = loss_with_grad(logits, truth, RainBins(), c);
      for (std::size_t i = 0; i < kNumBins; ++i) {
        auto up = logits, down = logits;
        up[i] += 1e-5;
        down[i] -= 1e-5;
        const double num =
            (loss_value(up, truth, RainBins(), c) - loss_value(down, truth, RainBins(), c)) / 2e-5;
        EXPECT_LE(std::abs(r.grad_logits[i] - num) / std::max(1.0, std::abs(num)), 1e-3) << j << " " << i;
      }
    }
  }
}

TEST(GradCheck, RandomShapesAllVariants) {
  for (LossKind k : {LossKind::dice, LossKind::ml_dice}) {
    for (bool lc : {false, true}) {
      LossConfig c;
      c.kind = k;
      c.use_logcosh = lc;
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        GradTrial t;
        t.seed = seed;
        EXPECT_LT(grad_check<double>(c, t), 1e-5) << to_string(k) << " logcosh=" << lc << " seed=" << seed;
      }
    }
  }
}

TEST(GradCheck, FloatModeWithinLooseTolerance) {
  LossConfig c;
  GradTrial t;
  EXPECT_LT(grad_check<float>(c, t), 1e-2);
}

TEST(GradCheck, DetectsCorruptedGradient) {
  GradTrial t;
  t.corrupt = 1e-2;
  EXPECT_GT(grad_check<double>(LossConfig{}, t), 1e-3);
}

TEST(Losses, PredicateSharedWithMetricsAtBoundaries) {
  // A rate exactly on a threshold does not exceed it: the exceedance target is 0.
  const RainBins bins;
  for (std::size_t k = 0; k < kNumThresholds; ++k) {
    const double s = bins.threshold(k);
    const auto g = detail::exceedance_targets(rate_pixel(s), bins);
    EXPECT_EQ(g[k], 0.0);
    EXPECT_EQ(g[k] != 0.0, exceeds(s, s));
    if (k > 0) {
      EXPECT_EQ(g[k - 1], 1.0);
    }
  }
}
