#include "bench.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "qfat/error.hpp"

namespace qfat::cli {
namespace {

using Clock = std::chrono::steady_clock;

TimingStats summarize(std::string name, std::vector<double> ms) {
  TimingStats s;
  s.name = std::move(name);
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  const auto idx = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(ms.size()))) - 1;
  s.p95_ms = ms[std::min(idx, ms.size() - 1)];
  return s;
}

template <typename Fn>
std::vector<double> time_reps(int reps, Fn&& fn) {
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    fn();
    ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  return ms;
}

}  // namespace

const TimingStats& InferenceTiming::at(const std::string& name) const {
  for (const auto& c : components) {
    if (c.name == name) return c;
  }
  throw ValidationError("timing: no component named '" + name + "'");
}

PolicyConfig timing_policy_config() {
  PolicyConfig c;
  c.state_dim = 60;
  c.action_dim = 9;
  c.mixtures = 4;
  c.state_history = 10;
  c.goal_horizon = 0;
  c.layers = 6;
  c.heads = 8;
  c.embed_dim = 128;
  c.dropout = 0.1;
  return c;
}

InferenceTiming time_inference(const Policy& policy, int repetitions, std::uint64_t seed) {
  require(repetitions >= 1, "bench: repetitions must be >= 1");
  const PolicyConfig& pc = policy.config();
  Rng data_rng = Rng::substream(seed, "data");
  Rng rng = Rng::substream(seed, "sampling");

  Window w;
  w.states = Eigen::MatrixXd::NullaryExpr(pc.state_history, pc.state_dim, [&] { return 2.0 * data_rng.uniform() - 1.0; });
  w.goals = Eigen::MatrixXd::NullaryExpr(pc.goal_horizon, pc.state_dim, [&] { return 2.0 * data_rng.uniform() - 1.0; });

  const Mat<float> features = policy.backbone_features(w);
  const GmmParams gmm = policy.decode_head(features);
  const ModeFinderConfig mode_cfg;
  double sink = 0.0;

  const int warmup = std::max(1, std::min(50, repetitions / 10));
  for (int i = 0; i < warmup; ++i) sink += policy.backbone_features(w)(0, 0);

  InferenceTiming t;
  t.repetitions = repetitions;
  t.components.push_back(summarize("backbone", time_reps(repetitions, [&] {
    sink += policy.backbone_features(w)(0, 0);
  })));
  t.components.push_back(summarize("head", time_reps(repetitions, [&] {
    sink += policy.decode_head(features).weights[0];
  })));
  t.components.push_back(summarize("vanilla", time_reps(repetitions, [&] {
    sink += sample_vanilla(gmm, rng, 1)(0, 0);
  })));
  t.components.push_back(summarize("scaled", time_reps(repetitions, [&] {
    sink += sample_vanilla(scale_variances(gmm, 1e-6), rng, 1)(0, 0);
  })));
  t.components.push_back(summarize("mode", time_reps(repetitions, [&] {
    sink += sample_mode(find_modes(gmm, mode_cfg, rng), rng, NoNoise{}).x[0];
  })));
  if (!std::isfinite(sink)) throw NumericalError("bench: non-finite output during timing");

  t.head_plus_vanilla_ratio = (t.at("head").mean_ms + t.at("vanilla").mean_ms) / t.at("backbone").mean_ms;
  return t;
}

nlohmann::json timing_to_json(const InferenceTiming& t) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : t.components) comps.push_back({{"name", c.name}, {"mean_ms", c.mean_ms}, {"p95_ms", c.p95_ms}});
  return {{"repetitions", t.repetitions}, {"components", comps}, {"head_plus_vanilla_ratio", t.head_plus_vanilla_ratio}};
}

}  // namespace qfat::cli
