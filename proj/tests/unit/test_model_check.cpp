#include <gtest/gtest.h>

#include <chrono>

#include "cdepth/gradcheck.hpp"
#include "cdepth/model_check.hpp"

namespace cdepth {
namespace {

TEST(RoundoffFloor, ScalesWithLossAndNeverDropsBelowBase) {
  EXPECT_EQ(roundoff_floor(0.0, 1e-6, 1e-5), 1e-8);
  EXPECT_NEAR(roundoff_floor(5.0, 1e-6, 1e-5), 8.0 * 2.220446049250313e-16 * 5.0 / 1e-11, 1e-18);
  EXPECT_LT(roundoff_floor(1.0, 1e-6, 1e-5), 2e-4);
}

TEST(RoundoffFloor, OnePercentErrorOnSmallComponentStillFails) {
  const double floor = roundoff_floor(5.0, 1e-6, 1e-5);
  EXPECT_GT(relative_error(1e-4, 1.01e-4, floor), 1e-5);
}

class ObjectiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(ObjectiveGradients, VaePasses) {
  const auto c = check_vae_objective(static_cast<std::uint64_t>(GetParam()));
  EXPECT_EQ(c.report.kink_crossings, 0);
  EXPECT_LE(c.report.max_rel_error(), 1e-5);
  EXPECT_TRUE(c.pass());
  EXPECT_FALSE(c.report.leaves.count("sampler.head.w"));
  EXPECT_TRUE(c.report.leaves.count("text.fc1.w"));
  EXPECT_TRUE(c.report.leaves.count("decoder.up1.w"));
}

TEST_P(ObjectiveGradients, CsPassesAndDetachIsExact) {
  const auto c = check_cs_objective(static_cast<std::uint64_t>(GetParam()));
  EXPECT_EQ(c.report.kink_crossings, 0);
  EXPECT_LE(c.report.max_rel_error(), 1e-5);
  EXPECT_TRUE(c.detach_exact_zero);
  EXPECT_TRUE(c.pass());
  EXPECT_TRUE(c.report.leaves.count("sampler.head.w"));
  EXPECT_TRUE(c.report.leaves.count("text.fc3.b"));
}

INSTANTIATE_TEST_SUITE_P(Seeds, ObjectiveGradients, ::testing::Values(1, 2, 3));

TEST(ObjectiveGradients, ThreeSeedsUnderTwoMinutes) {
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t s = 11; s <= 13; ++s) {
    EXPECT_TRUE(check_vae_objective(s).pass());
    EXPECT_TRUE(check_cs_objective(s).pass());
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 120.0);
}

}  // namespace
}  // namespace cdepth
