#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "qfat/policy.hpp"

namespace qfat::cli {

struct TimingStats {
  std::string name;
  double mean_ms = 0.0;
  double p95_ms = 0.0;
};

struct InferenceTiming {
  std::vector<TimingStats> components;  // backbone, head, vanilla, scaled, mode
  int repetitions = 0;
  /// (head decode + vanilla sampling) / backbone forward, by mean time.
  double head_plus_vanilla_ratio = 0.0;

  const TimingStats& at(const std::string& name) const;
};

/// Policy shaped like the largest configuration used for timing: 6 layers,
/// 8 heads, 128-dim embedding, 4 mixtures, 60-dim states, 9-dim actions.
PolicyConfig timing_policy_config();

/// Times each inference stage separately on a single context, after warm-up.
InferenceTiming time_inference(const Policy& policy, int repetitions, std::uint64_t seed);

nlohmann::json timing_to_json(const InferenceTiming& t);

}  // namespace qfat::cli
