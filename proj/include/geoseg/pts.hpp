// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "geoseg/error.hpp"
#include "geoseg/rng.hpp"

namespace geoseg {

enum class Task { kInteractive, kReferring, kReasoning };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::kInteractive: return "interactive";
    case Task::kReferring: return "referring";
    case Task::kReasoning: return "reasoning";
  }
  return "?";
}

inline Task task_from_string(std::string_view s) {
  if (s == "interactive") return Task::kInteractive;
  if (s == "referring") return Task::kReferring;
  if (s == "reasoning") return Task::kReasoning;
  throw Error(ErrorCode::kInvalidArgument, "unknown task '" + std::string(s) + "'");
}

using TaskWeights = std::map<Task, double>;

// Progressive task scheduling: the interactive share is scaled by a factor
// that falls linearly from 1 to `interactive_final_multiplier` over training;
// the released mass goes to reasoning and referring stays fixed.
struct SamplingSchedule {
  TaskWeights base_shares;
  double interactive_final_multiplier = 0.7;
  std::int64_t total_steps = 1;

  void validate() const {
    require(total_steps >= 1, ErrorCode::kInvalidArgument, "schedule: total_steps must be >= 1");
    require(interactive_final_multiplier > 0.0 && interactive_final_multiplier <= 1.0,
            ErrorCode::kInvalidArgument, "schedule: final multiplier must lie in (0, 1]");
    double sum = 0.0;
    for (Task t : {Task::kInteractive, Task::kReferring, Task::kReasoning}) {
      auto it = base_shares.find(t);
      require(it != base_shares.end() && it->second > 0.0, ErrorCode::kInvalidArgument,
              "schedule: base share for " + std::string(to_string(t)) + " must be positive");
      sum += it->second;
    }
    require(base_shares.size() == 3, ErrorCode::kInvalidArgument, "schedule: unexpected task in shares");
    require(std::abs(sum - 1.0) <= 1e-9, ErrorCode::kInvalidArgument, "schedule: base shares must sum to 1");
  }

  double multiplier_at(std::int64_t step) const {
    require(step >= 0 && step <= total_steps, ErrorCode::kInvalidArgument,
            "schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
    if (step == 0) return 1.0;
    if (step == total_steps) return interactive_final_multiplier;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return 1.0 - (1.0 - interactive_final_multiplier) * t;
  }
};

inline TaskWeights weights_at(const SamplingSchedule& schedule, std::int64_t step) {
  schedule.validate();
  const double m = schedule.multiplier_at(step);
  const double interactive = schedule.base_shares.at(Task::kInteractive);
  TaskWeights w = schedule.base_shares;
  if (step == 0) return w;
  w[Task::kInteractive] = interactive * m;
  w[Task::kReasoning] += interactive * (1.0 - m);
  return w;
}

// Categorical draw over any ordered key set.
template <typename Key>
Key draw_task(const std::map<Key, double>& weights, Rng& rng) {
  require(!weights.empty(), ErrorCode::kInvalidArgument, "draw: empty weight map");
  double sum = 0.0;
  for (const auto& [k, w] : weights) {
    require(std::isfinite(w) && w >= 0.0, ErrorCode::kInvalidArgument, "draw: weights must be non-negative");
    sum += w;
  }
  require(std::abs(sum - 1.0) <= 1e-9, ErrorCode::kInvalidArgument, "draw: weights must sum to 1");
  const double u = rng.uniform01();
  double cumulative = 0.0;
  const Key* last_positive = nullptr;
  for (const auto& [k, w] : weights) {
    if (w <= 0.0) continue;
    cumulative += w;
    last_positive = &k;
    if (u < cumulative) return k;
  }
  return *last_positive;  // u landed in the rounding slack above the final sum
}

}  // namespace geoseg
