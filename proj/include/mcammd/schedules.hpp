#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "mcammd/errors.hpp"

namespace mcammd {

enum class ScheduleKind { constant, monotonic, cyclical };

// Defaults (4 cycles, ramp over the first half of each cycle, beta_max 1)
// follow common practice for cyclical KL annealing; they are assumptions,
// not tuned values.
struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::cyclical;
  double beta_max = 1.0;
  std::size_t total_steps = 2000;
  std::size_t cycles = 4;   // cyclical only
  double ramp_ratio = 0.5;  // R: fraction of a period spent ramping

  bool operator==(const ScheduleConfig&) const = default;

  void validate() const {
    if (!(beta_max >= 0.0 && beta_max <= 1.0)) throw ConfigError("schedule.beta_max must lie in [0, 1]");
    if (total_steps == 0) throw ConfigError("schedule.total_steps must be positive");
    if (cycles == 0) throw ConfigError("schedule.cycles must be at least 1");
    if (!(ramp_ratio > 0.0 && ramp_ratio <= 1.0)) throw ConfigError("schedule.ramp_ratio must lie in (0, 1]");
  }
};

// A validated schedule; construction is where configuration errors surface.
class Schedule {
 public:
  explicit Schedule(const ScheduleConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

  const ScheduleConfig& config() const { return cfg_; }

  // Linear ramps. Steps at or past total_steps hold the last step's value.
  double beta_at(std::size_t step) const {
    step = std::min(step, cfg_.total_steps - 1);
    const double total = static_cast<double>(cfg_.total_steps);
    switch (cfg_.kind) {
      case ScheduleKind::constant:
        return cfg_.beta_max;
      case ScheduleKind::monotonic: {
        const double tau = static_cast<double>(step) / total;
        return cfg_.beta_max * std::min(1.0, tau / cfg_.ramp_ratio);
      }
      case ScheduleKind::cyclical: {
        const std::size_t period = (cfg_.total_steps + cfg_.cycles - 1) / cfg_.cycles;
        const double tau = static_cast<double>(step % period) / static_cast<double>(period);
        return cfg_.beta_max * std::min(1.0, tau / cfg_.ramp_ratio);
      }
    }
    return cfg_.beta_max;
  }

 private:
  ScheduleConfig cfg_;
};

inline double beta_at(std::size_t step, const Schedule& schedule) { return schedule.beta_at(step); }

}  // namespace mcammd
