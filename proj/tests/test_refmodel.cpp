// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "realdpo/refmodel.hpp"
#include "test_util.hpp"

using namespace realdpo;
using namespace realdpo::refmodel;

namespace {

DenoiserParams filled(const ModelArch& arch, double v) { return DenoiserParams(arch, Vec(arch.param_count(), v)); }

}  // namespace

TEST(EmaUpdate, FixedPoint) {
  Rng r(1);
  const auto p = testutil::random_params(r, testutil::tiny_arch());
  EXPECT_EQ(ema_update(p, p, 0.996), p);
}

TEST(EmaUpdate, ScalarExample) {
  const auto arch = testutil::tiny_arch();
  const auto out = ema_update(filled(arch, 1.0), filled(arch, 0.0), 0.996);
  for (double v : out.values) EXPECT_NEAR(v, 0.996, 1e-15);
}

TEST(EmaUpdate, ClosedFormAfterNUpdates) {
  Rng r(2);
  const auto arch = testutil::tiny_arch();
  const auto train = testutil::random_params(r, arch);
  const auto ref0 = testutil::random_params(r, arch);
  for (int n : {1, 10, 1000}) {
    auto ref = ref0;
    for (int i = 0; i < n; ++i) ref = ema_update(ref, train, 0.996);
    const double wn = std::pow(0.996, n);
    for (std::size_t i = 0; i < ref.size(); ++i)
      EXPECT_NEAR(ref.values[i], train.values[i] + wn * (ref0.values[i] - train.values[i]), 1e-12) << n;
  }
}

TEST(EmaUpdate, StaysInsideSegment) {
  Rng r(3);
  const auto arch = testutil::tiny_arch();
  const auto a = testutil::random_params(r, arch), b = testutil::random_params(r, arch);
  for (double w : {0.0, 0.3, 0.996, 1.0}) {
    const auto out = ema_update(a, b, w);
    for (std::size_t i = 0; i < out.size(); ++i) {
      EXPECT_GE(out.values[i], std::min(a.values[i], b.values[i]));
      EXPECT_LE(out.values[i], std::max(a.values[i], b.values[i]));
    }
  }
  EXPECT_EQ(ema_update(a, b, 1.0), a);
  EXPECT_EQ(ema_update(a, b, 0.0).values, b.values);
}

TEST(EmaUpdate, RejectsBadInputs) {
  const auto a = filled(testutil::tiny_arch(), 0.0);
  EXPECT_THROW(ema_update(a, a, 1.5), ConfigError);
  EXPECT_THROW(ema_update(a, filled(testutil::tiny_arch(5), 0.0), 0.5), ShapeError);
}

TEST(MaybeUpdate, IntervalBoundaries) {
  const auto arch = testutil::tiny_arch();
  auto ref = filled(arch, 1.0);
  const auto train = filled(arch, 0.0);
  RefModelConfig cfg;
  EXPECT_FALSE(maybe_update(99, ref, train, cfg));
  EXPECT_EQ(ref.values[0], 1.0);
  EXPECT_TRUE(maybe_update(100, ref, train, cfg));
  EXPECT_NEAR(ref.values[0], 0.996, 1e-15);
  EXPECT_FALSE(maybe_update(0, ref, train, cfg));
}

TEST(MaybeUpdate, TenUpdatesOverThousandSteps) {
  const auto arch = testutil::tiny_arch();
  auto ref = filled(arch, 1.0);
  const auto train = filled(arch, 0.0);
  int updates = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) updates += maybe_update(s + 1, ref, train, {}) ? 1 : 0;
  EXPECT_EQ(updates, 10);
  RefModelConfig bad;
  bad.update_interval = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}
