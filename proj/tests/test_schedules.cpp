#include <gtest/gtest.h>

#include "mcammd/schedules.hpp"

using namespace mcammd;

namespace {

ScheduleConfig cyclical(std::size_t total = 1000, std::size_t cycles = 4, double ramp = 0.5, double beta_max = 1.0) {
  return ScheduleConfig{ScheduleKind::cyclical, beta_max, total, cycles, ramp};
}

}  // namespace

TEST(Cyclical, Examples) {
  const Schedule s(cyclical());
  EXPECT_EQ(s.beta_at(0), 0.0);
  EXPECT_EQ(s.beta_at(125), 1.0);
  EXPECT_EQ(s.beta_at(250), 0.0);
  EXPECT_DOUBLE_EQ(s.beta_at(62), 62.0 / 125.0);
  EXPECT_EQ(beta_at(125, s), 1.0);
}

TEST(Cyclical, ZeroAtEveryCycleStartAndPeakWithinEachCycle) {
  const Schedule s(cyclical());
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(s.beta_at(250 * c), 0.0);
    EXPECT_EQ(s.beta_at(250 * c + 125), 1.0);
    EXPECT_EQ(s.beta_at(250 * c + 249), 1.0);
  }
}

TEST(Cyclical, UnevenPeriodUsesCeiling) {
  const Schedule s(cyclical(10, 3, 0.5));  // period 4
  EXPECT_EQ(s.beta_at(4), 0.0);
  EXPECT_EQ(s.beta_at(8), 0.0);
  EXPECT_EQ(s.beta_at(6), 1.0);
}

TEST(Cyclical, SingleCycleMatchesMonotonic) {
  for (double ramp : {0.1, 0.5, 1.0}) {
    const Schedule c(cyclical(1000, 1, ramp, 0.8));
    const Schedule m(ScheduleConfig{ScheduleKind::monotonic, 0.8, 1000, 1, ramp});
    for (std::size_t t = 0; t < 1000; ++t) EXPECT_EQ(c.beta_at(t), m.beta_at(t)) << "step " << t;
  }
}

TEST(Schedules, ValuesStayInRange) {
  for (auto kind : {ScheduleKind::constant, ScheduleKind::monotonic, ScheduleKind::cyclical}) {
    const Schedule s(ScheduleConfig{kind, 0.7, 1000, 4, 0.3});
    for (std::size_t t = 0; t < 1200; ++t) {
      EXPECT_GE(s.beta_at(t), 0.0);
      EXPECT_LE(s.beta_at(t), 0.7);
    }
  }
}

TEST(Monotonic, NonDecreasingAndSaturates) {
  const Schedule s(ScheduleConfig{ScheduleKind::monotonic, 1.0, 100, 1, 0.5});
  for (std::size_t t = 1; t < 100; ++t) EXPECT_GE(s.beta_at(t), s.beta_at(t - 1));
  EXPECT_EQ(s.beta_at(50), 1.0);
  EXPECT_DOUBLE_EQ(s.beta_at(25), 0.5);
}

TEST(Constant, AlwaysBetaMax) {
  const Schedule s(ScheduleConfig{ScheduleKind::constant, 0.3, 10, 1, 1.0});
  EXPECT_EQ(s.beta_at(0), 0.3);
  EXPECT_EQ(s.beta_at(9), 0.3);
}

TEST(Schedules, StepsPastTheEndHoldTheLastValue) {
  const Schedule s(cyclical(1000, 4, 0.9));
  EXPECT_EQ(s.beta_at(1000), s.beta_at(999));
  EXPECT_EQ(s.beta_at(123456), s.beta_at(999));
}

TEST(Schedules, InvalidConfigFailsAtConstruction) {
  EXPECT_THROW(Schedule(cyclical(1000, 4, 0.5, 1.5)), ConfigError);
  EXPECT_THROW(Schedule(cyclical(1000, 4, 0.5, -0.1)), ConfigError);
  EXPECT_THROW(Schedule(cyclical(0)), ConfigError);
  EXPECT_THROW(Schedule(cyclical(1000, 0)), ConfigError);
  EXPECT_THROW(Schedule(cyclical(1000, 4, 0.0)), ConfigError);
  EXPECT_THROW(Schedule(cyclical(1000, 4, 1.1)), ConfigError);
  EXPECT_NO_THROW(Schedule(cyclical(1000, 4, 1.0)));
}
