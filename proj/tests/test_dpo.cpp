// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "realdpo/dpo.hpp"
#include "test_util.hpp"

using namespace realdpo;
using namespace realdpo::dpo;

namespace {

constexpr double kLn2 = 0.6931471805599453;

long double softplus_oracle(long double z) {
  return std::max(z, 0.0L) + std::log1p(std::exp(-std::fabs(z)));
}

}  // namespace

TEST(LogisticCore, EqualDeltasGiveLn2) {
  for (double c : {0.1, 1.0, 2.5, 1000.0})
    for (double d : {-3.0, 0.0, 7.5}) EXPECT_NEAR(dpo_logistic_core(d, d, c), kLn2, 1e-15);
}

TEST(LogisticCore, ZeroCoefficientGivesLn2) {
  EXPECT_NEAR(dpo_logistic_core(-5.0, 9.0, 0.0), kLn2, 1e-15);
}

TEST(LogisticCore, MinusLogSigmoidTwo) {
  EXPECT_NEAR(dpo_logistic_core(-1.0, 1.0, 1.0), 0.1269280110429726, 1e-15);
}

TEST(LogisticCore, SweepAgainstExtendedPrecision) {
  for (int i = 0; i <= 14000; ++i) {
    const double z = -700.0 + 0.1 * i;
    const long double ref = softplus_oracle(z);
    const double got = dpo_logistic_core(z, 0.0, 1.0);
    EXPECT_LE(std::abs(static_cast<long double>(got) - ref), 1e-12L * std::max(1.0L, ref)) << z;
  }
}

TEST(LogisticCore, NonFiniteIsNumericError) {
  EXPECT_THROW(dpo_logistic_core(std::nan(""), 0.0, 1.0), NumericError);
  EXPECT_THROW(dpo_logistic_core(0.0, INFINITY, 1.0), NumericError);
}

TEST(LogisticCore, SlopeAtZeroIsHalfCoefficient) {
  const double c = 3.0, h = 1e-6;
  const double slope = (dpo_logistic_core(h, 0, c) - dpo_logistic_core(-h, 0, c)) / (2 * h);
  EXPECT_NEAR(slope, c / 2, 1e-8);
}

TEST(LossWeighting, Coefficients) {
  LossWeighting w;
  w.beta = 2.0;
  EXPECT_EQ(w.coefficient(), 1.0);
  w.mode = WeightingMode::snr_weighted;
  w.T = 10;
  w.omega_lambda = 0.5;
  EXPECT_EQ(w.coefficient(), 10.0);
  w.T = 0.5;
  EXPECT_THROW(w.validate(), ConfigError);
  EXPECT_EQ(weighting_mode_from_string(to_string(WeightingMode::snr_weighted)), WeightingMode::snr_weighted);
  EXPECT_THROW(weighting_mode_from_string("cosine"), ConfigError);
}

TEST(RealDpoLoss, IdenticalTrainerAndReferenceGivesLn2) {
  Rng r(1);
  const Vec x0w = r.normal_vec(8), x0l = r.normal_vec(8), pw = r.normal_vec(8), pl = r.normal_vec(8);
  const auto b = realdpo_loss({x0w, pw, pw, x0l, pl, pl}, {});
  EXPECT_EQ(b.w_diff, 0.0);
  EXPECT_EQ(b.l_diff, 0.0);
  EXPECT_NEAR(b.loss, kLn2, 1e-15);
  EXPECT_FALSE(b.implicit_correct);
}

TEST(RealDpoLoss, ExactWinReconstructionLowersLoss) {
  Rng r(2);
  const Vec x0w = r.normal_vec(8), x0l = r.normal_vec(8), ref_w = r.normal_vec(8), pl = r.normal_vec(8);
  const auto b = realdpo_loss({x0w, x0w, ref_w, x0l, pl, pl}, {});
  EXPECT_LT(b.w_diff, 0.0);
  EXPECT_EQ(b.l_diff, 0.0);
  EXPECT_LT(b.loss, kLn2);
  EXPECT_TRUE(b.implicit_correct);
}

TEST(RealDpoLoss, BetaTwoConstantExample) {
  // w_diff = 0 - 1 = -1, l_diff = 1 - 0 = 1 -> softplus(1 * -2) = -log sigmoid(2)
  const Vec zero{0.0}, one{1.0};
  LossWeighting w;
  w.beta = 2.0;
  const auto b = realdpo_loss({zero, zero, one, zero, one, zero}, w);
  EXPECT_EQ(b.w_diff, -1.0);
  EXPECT_EQ(b.l_diff, 1.0);
  EXPECT_NEAR(b.loss, 0.1269280110429726, 1e-15);
}

TEST(RealDpoLoss, NonFiniteReconstructionIsNumericError) {
  const Vec a{0.0}, bad{std::nan("")};
  EXPECT_THROW(realdpo_loss({a, bad, a, a, a, a}, {}), NumericError);
}

TEST(RealDpoAdjoint, MatchesFiniteDifferences) {
  Rng r(3);
  const std::size_t n = 6;
  const Vec x0w = r.normal_vec(n), x0l = r.normal_vec(n), tw = r.normal_vec(n), tl = r.normal_vec(n);
  Vec hw = r.normal_vec(n), hl = r.normal_vec(n);
  LossWeighting w;
  w.beta = 0.7;
  const auto b = realdpo_loss({x0w, hw, tw, x0l, hl, tl}, w);
  const auto adj = realdpo_adjoint({x0w, hw, tw, x0l, hl, tl}, b, w);
  const double h = 1e-6;
  for (std::size_t i = 0; i < n; ++i) {
    Vec up = hw, dn = hw;
    up[i] += h;
    dn[i] -= h;
    const double fd = (realdpo_loss({x0w, up, tw, x0l, hl, tl}, w).loss -
                       realdpo_loss({x0w, dn, tw, x0l, hl, tl}, w).loss) /
                      (2 * h);
    EXPECT_NEAR(adj.d_xhat0_w[i], fd, 1e-7);
    up = hl;
    dn = hl;
    up[i] += h;
    dn[i] -= h;
    const double fdl = (realdpo_loss({x0w, hw, tw, x0l, up, tl}, w).loss -
                        realdpo_loss({x0w, hw, tw, x0l, dn, tl}, w).loss) /
                       (2 * h);
    EXPECT_NEAR(adj.d_xhat0_l[i], fdl, 1e-7);
  }
}

TEST(EpsLoss, AllPredictionsEqualReferenceGivesLn2) {
  Rng r(4);
  const Vec e = r.normal_vec(5), p = r.normal_vec(5);
  EXPECT_NEAR(diffusion_dpo_eps_loss(e, p, p, e, p, p, {}).loss, kLn2, 1e-15);
}

TEST(EpsLoss, SameDeltasSameLossAsLatentForm) {
  const Vec zero{0.0}, one{1.0};
  LossWeighting w;
  w.beta = 2.0;
  const auto a = realdpo_loss({zero, zero, one, zero, one, zero}, w);
  const auto b = diffusion_dpo_eps_loss(zero, zero, one, zero, one, zero, w);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.margin, b.margin);
}

TEST(EpsLoss, BruteForceNorms) {
  Rng r(5);
  const std::size_t n = 16;
  const Vec ew = r.normal_vec(n), hw = r.normal_vec(n), tw = r.normal_vec(n);
  const Vec el = r.normal_vec(n), hl = r.normal_vec(n), tl = r.normal_vec(n);
  auto sq = [&](const Vec& a, const Vec& b) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };
  const double dw = sq(ew, hw) - sq(ew, tw), dl = sq(el, hl) - sq(el, tl);
  LossWeighting w;
  w.beta = 0.3;
  EXPECT_NEAR(diffusion_dpo_eps_loss(ew, hw, tw, el, hl, tl, w).loss, dpo_logistic_core(dw, dl, 0.15), 1e-13);
}

TEST(SftLoss, Examples) {
  EXPECT_EQ(sft_loss(Vec{1, 2}, Vec{1, 2}), 0.0);
  EXPECT_EQ(sft_loss(Vec{1, 0}, Vec{0, 0}), 0.5);
  EXPECT_THROW(sft_loss(Vec{}, Vec{}), ShapeError);
  EXPECT_THROW(sft_loss(Vec{1}, Vec{1, 2}), ShapeError);
}

TEST(SftLoss, BruteForceMean) {
  Rng r(6);
  const Vec a = r.normal_vec(32), b = r.normal_vec(32);
  double s = 0;
  for (int i = 0; i < 32; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_NEAR(sft_loss(a, b), s / 32, 1e-14);
  const Vec g = sft_adjoint(a, b);
  for (int i = 0; i < 32; ++i) EXPECT_NEAR(g[i], -2.0 * (a[i] - b[i]) / 32, 1e-15);
}
