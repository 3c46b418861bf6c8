#include "qfat/envlab.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <deque>
#include <limits>

#include "qfat/error.hpp"
#include "qfat/parallel.hpp"

namespace qfat {

std::string to_string(EnvKind kind) { return kind == EnvKind::kMultiroute ? "multiroute" : "sequencing"; }

EnvKind env_kind_from_string(const std::string& name) {
  if (name == "multiroute") return EnvKind::kMultiroute;
  if (name == "sequencing") return EnvKind::kSequencing;
  throw ValidationError("unknown environment '" + name + "' (expected multiroute or sequencing)");
}

Eigen::Vector2d Environment::clamp_action(const Eigen::Vector2d& a) {
  const double n = a.norm();
  return n > kMaxStep ? Eigen::Vector2d(a * (kMaxStep / n)) : a;
}

void Environment::move(const Eigen::Vector2d& action, Rng& rng) {
  require(action.allFinite(), "environment: non-finite action");
  pos_ += clamp_action(action);
  if (process_noise_ > 0.0) {
    pos_.x() += process_noise_ * rng.normal();
    pos_.y() += process_noise_ * rng.normal();
  }
  ++steps_;
}

Eigen::VectorXd MultirouteEnv::reset() {
  pos_.setZero();
  steps_ = 0;
  first_leg_.clear();
  return observation();
}

StepResult MultirouteEnv::step(const Eigen::Vector2d& action, Rng& rng) {
  move(action, rng);
  if (first_leg_.empty()) {
    if (pos_.x() > 0.5 && pos_.y() < 0.5) first_leg_ = "right";
    if (pos_.y() > 0.5 && pos_.x() < 0.5) first_leg_ = "up";
  }
  const bool ok = success();
  return {observation(), ok || steps_ >= kMaxSteps, ok};
}

bool MultirouteEnv::success() const { return (pos_ - target()).norm() <= kTargetRadius; }

std::string MultirouteEnv::outcome() const {
  if (!success()) return "incomplete";
  return first_leg_.empty() ? "direct" : first_leg_;
}

Eigen::Vector2d MultirouteEnv::waypoint(int route) {
  switch (route) {
    case 0: return {1.0, kRouteOffset};
    case 1: return {1.0, -kRouteOffset};
    case 2: return {kRouteOffset, 1.0};
    case 3: return {-kRouteOffset, 1.0};
  }
  throw ValidationError("multiroute: route index must be in 0..3");
}

Eigen::VectorXd SequencingEnv::reset() {
  pos_.setZero();
  steps_ = 0;
  order_.clear();
  return observation();
}

StepResult SequencingEnv::step(const Eigen::Vector2d& action, Rng& rng) {
  move(action, rng);
  for (char g : {'A', 'B'}) {
    if (order_.find(g) == std::string::npos && (pos_ - goal(g)).norm() <= kGoalRadius) order_.push_back(g);
  }
  const bool ok = success();
  return {observation(), ok || steps_ >= kMaxSteps, ok};
}

Eigen::VectorXd SequencingEnv::observation() const {
  Eigen::VectorXd o(4);
  o << pos_.x(), pos_.y(), order_.find('A') != std::string::npos ? 1.0 : 0.0,
      order_.find('B') != std::string::npos ? 1.0 : 0.0;
  return o;
}

std::string SequencingEnv::outcome() const { return success() ? order_ : "incomplete"; }

std::unique_ptr<Environment> make_env(const EnvSpec& spec) {
  require(spec.process_noise >= 0.0, "environment: process noise must be non-negative");
  if (spec.kind == EnvKind::kMultiroute) return std::make_unique<MultirouteEnv>(spec.process_noise);
  return std::make_unique<SequencingEnv>(spec.process_noise);
}

std::string outcome_of_trajectory(EnvKind kind, const Trajectory& demo) {
  require(demo.states.rows() >= 1 && demo.states.cols() >= 2 && demo.actions.rows() == demo.states.rows(),
          "outcome: need matching 2-D states and actions");
  Eigen::MatrixXd states(demo.states.rows() + 1, 2);
  states.topRows(demo.states.rows()) = demo.states.leftCols(2);
  states.bottomRows(1) =
      demo.states.bottomLeftCorner(1, 2) + Environment::clamp_action(demo.actions.bottomRows(1).transpose()).transpose();
  if (kind == EnvKind::kMultiroute) {
    std::string leg;
    bool ok = false;
    for (Eigen::Index t = 0; t < states.rows(); ++t) {
      const double x = states(t, 0), y = states(t, 1);
      if (leg.empty() && x > 0.5 && y < 0.5) leg = "right";
      if (leg.empty() && y > 0.5 && x < 0.5) leg = "up";
      ok = ok || (Eigen::Vector2d(x, y) - MultirouteEnv::target()).norm() <= MultirouteEnv::kTargetRadius;
    }
    if (!ok) return "incomplete";
    return leg.empty() ? "direct" : leg;
  }
  std::string order;
  for (Eigen::Index t = 0; t < states.rows(); ++t) {
    const Eigen::Vector2d p(states(t, 0), states(t, 1));
    for (char g : {'A', 'B'}) {
      if (order.find(g) == std::string::npos && (p - SequencingEnv::goal(g)).norm() <= SequencingEnv::kGoalRadius) {
        order.push_back(g);
      }
    }
  }
  return order.size() == 2 ? order : "incomplete";
}

namespace {

// The scripted expert cruises below the action limit so that its noise is
// rarely clipped; clipped noise piles up on the limit circle as a thin arc.
constexpr double kDemoSpeed = 0.04;

Eigen::Vector2d seek(const Eigen::Vector2d& from, const Eigen::Vector2d& to, double noise_std, Rng& rng) {
  const Eigen::Vector2d diff = to - from;
  const double dist = diff.norm();
  Eigen::Vector2d a = dist > 0.0 ? Eigen::Vector2d(diff * (std::min(kDemoSpeed, dist) / dist))
                                 : Eigen::Vector2d::Zero();
  if (noise_std > 0.0) {
    a.x() += noise_std * rng.normal();
    a.y() += noise_std * rng.normal();
  }
  return Environment::clamp_action(a);
}

/// Rolls the scripted expert; `target` picks the current goal from the environment state.
template <typename Env, typename Target>
Trajectory record_demo(Env& env, double noise_std, Rng& rng, Target&& target) {
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::Vector2d> actions;
  env.reset();
  Rng quiet(0);
  for (bool done = false; !done;) {
    states.push_back(env.observation());
    const Eigen::Vector2d a = seek(env.position(), target(env), noise_std, rng);
    actions.push_back(a);
    done = env.step(a, quiet).done;
  }
  Trajectory t;
  t.states.resize(static_cast<Eigen::Index>(states.size()), env.observation_dim());
  t.actions.resize(static_cast<Eigen::Index>(actions.size()), 2);
  for (std::size_t i = 0; i < states.size(); ++i) {
    t.states.row(static_cast<Eigen::Index>(i)) = states[i].transpose();
    t.actions.row(static_cast<Eigen::Index>(i)) = actions[i].transpose();
  }
  return t;
}

}  // namespace

Dataset generate_multiroute_demos(int n, double noise_std, Rng& rng) {
  require(n >= 4, "multiroute demos: need n >= 4");
  require(noise_std >= 0.0, "multiroute demos: noise_std must be non-negative");
  Dataset data;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    const int route = static_cast<int>(rng.index(4));
    MultirouteEnv env;
    bool at_waypoint = false;
    data.trajectories.push_back(record_demo(env, noise_std, rng, [&](const MultirouteEnv& e) {
      const Eigen::Vector2d wp = MultirouteEnv::waypoint(route);
      if (!at_waypoint && (e.position() - wp).norm() < kDemoSpeed) at_waypoint = true;
      return at_waypoint ? MultirouteEnv::target() : wp;
    }));
    labels.push_back(route);
  }
  data.meta = {{"env", "multiroute"}, {"n", n}, {"noise_std", noise_std}, {"labels", labels}};
  return data;
}

Dataset generate_sequencing_demos(int n, double noise_std, Rng& rng) {
  require(n >= 1, "sequencing demos: need n >= 1");
  require(noise_std >= 0.0, "sequencing demos: noise_std must be non-negative");
  Dataset data;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    const int order = rng.uniform() < 0.5 ? 0 : 1;
    const std::string plan = order == 0 ? "AB" : "BA";
    SequencingEnv env;
    data.trajectories.push_back(record_demo(env, noise_std, rng, [&](const SequencingEnv& e) {
      const char next = e.order().empty() ? plan[0] : plan[1];
      return SequencingEnv::goal(next);
    }));
    labels.push_back(order);
  }
  data.meta = {{"env", "sequencing"}, {"n", n}, {"noise_std", noise_std}, {"labels", labels}};
  return data;
}

Dataset generate_demos(EnvKind kind, int n, double noise_std, Rng& rng) {
  return kind == EnvKind::kMultiroute ? generate_multiroute_demos(n, noise_std, rng)
                                      : generate_sequencing_demos(n, noise_std, rng);
}

double behavioral_entropy(std::span<const std::string> outcomes) {
  if (outcomes.empty()) return 0.0;
  std::map<std::string, long> counts;
  for (const auto& o : outcomes) ++counts[o];
  double h = 0.0;
  const auto n = static_cast<double>(outcomes.size());
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return h == 0.0 ? 0.0 : h;
}

namespace {

EpisodeRecord run_episode(const Policy& policy, const Normalizer& norm, const EnvSpec& spec,
                          const SamplerSpec& sampler, const RolloutConfig& cfg, int episode) {
  const PolicyConfig& pc = policy.config();
  const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(episode);
  Rng env_rng = Rng::substream(seed, "env");
  Rng sample_rng = Rng::substream(seed, "sampling");
  auto env = make_env(spec);

  Eigen::MatrixXd reference;
  EpisodeRecord rec;
  if (pc.goal_horizon > 0) {
    const auto& demo = (*cfg.goal_demos)[static_cast<std::size_t>(episode) % cfg.goal_demos->size()];
    reference = norm.states.normalize(demo.states);
    rec.conditioned_on = outcome_of_trajectory(spec.kind, demo);
  }

  std::deque<Eigen::VectorXd> history(static_cast<std::size_t>(pc.state_history),
                                      norm.states.normalize(env->reset()));
  std::deque<Eigen::Vector2d> pending;
  std::vector<Eigen::Vector2d> positions{env->position()};
  std::vector<Eigen::Vector2d> applied;
  Eigen::MatrixXd states(pc.state_history, pc.state_dim);
  Eigen::MatrixXd goals(pc.goal_horizon, pc.state_dim);

  for (bool done = false; !done;) {
    if (pending.empty()) {
      for (int q = 0; q < pc.state_history; ++q) states.row(q) = history[static_cast<std::size_t>(q)].transpose();
      for (int g = 0; g < pc.goal_horizon; ++g) {
        const auto row = std::min<Eigen::Index>(env->steps() + 1 + g, reference.rows() - 1);
        goals.row(g) = reference.row(row);
      }
      const ActResult r = policy.act(states, goals, sampler, sample_rng);
      rec.active.push_back(count_active_components(r.gmm, cfg.active_threshold));
      rec.degraded_steps += r.degraded ? 1 : 0;
      rec.laplace_fallbacks += r.laplace_fallback ? 1 : 0;
      const Eigen::MatrixXd actions = norm.actions.denormalize(r.actions);
      for (Eigen::Index h = 0; h < actions.rows(); ++h) pending.emplace_back(actions.row(h).transpose());
    }
    const Eigen::Vector2d a = pending.front();
    pending.pop_front();
    if (!a.allFinite()) throw NumericalError("rollout: policy produced a non-finite action");
    const StepResult s = env->step(a, env_rng);
    applied.push_back(Environment::clamp_action(a));
    positions.push_back(env->position());
    history.pop_front();
    history.push_back(norm.states.normalize(s.observation));
    done = s.done;
  }

  rec.success = env->success();
  rec.outcome = env->outcome();
  rec.positions.resize(static_cast<Eigen::Index>(positions.size()), 2);
  for (std::size_t i = 0; i < positions.size(); ++i) rec.positions.row(static_cast<Eigen::Index>(i)) = positions[i];
  rec.actions.resize(static_cast<Eigen::Index>(applied.size()), 2);
  for (std::size_t i = 0; i < applied.size(); ++i) rec.actions.row(static_cast<Eigen::Index>(i)) = applied[i];
  if (applied.size() >= 2) {
    double sq = 0.0;
    for (std::size_t i = 1; i < applied.size(); ++i) sq += (applied[i] - applied[i - 1]).squaredNorm();
    rec.jitter = sq / static_cast<double>(applied.size() - 1);
  }
  return rec;
}

}  // namespace

RolloutReport rollout(const Policy& policy, const Normalizer& normalizer, const EnvSpec& env,
                      const SamplerSpec& sampler, const RolloutConfig& cfg) {
  sampler.validate();
  const PolicyConfig& pc = policy.config();
  const auto probe = make_env(env);
  require(cfg.episodes >= 1, "rollout: episodes must be >= 1");
  require(cfg.active_threshold > 0.0 && cfg.active_threshold < 1.0, "rollout: active threshold must lie in (0, 1)");
  require(pc.state_dim == probe->observation_dim(),
          "rollout: policy state_dim " + std::to_string(pc.state_dim) + " does not match " + to_string(env.kind) +
              " observation dim " + std::to_string(probe->observation_dim()));
  require(pc.action_dim == probe->action_dim(), "rollout: policy action_dim does not match the environment");
  require(normalizer.states.dim() == pc.state_dim && normalizer.actions.dim() == pc.action_dim,
          "rollout: normalizer dims do not match the policy");
  if (pc.goal_horizon > 0) {
    require(cfg.goal_demos != nullptr && !cfg.goal_demos->empty(),
            "rollout: goal-conditioned policy needs goal demonstrations");
    for (const auto& d : *cfg.goal_demos) {
      require(d.states.cols() == pc.state_dim, "rollout: goal demonstration dims do not match the policy");
    }
  }

  RolloutReport report;
  report.env = env;
  report.sampler = sampler;
  report.episodes = cfg.episodes;
  report.seed = cfg.seed;
  report.active_threshold = cfg.active_threshold;
  report.records.resize(static_cast<std::size_t>(cfg.episodes));
  parallel_for(report.records.size(), cfg.threads, [&](std::size_t e) {
    report.records[e] = run_episode(policy, normalizer, env, sampler, cfg, static_cast<int>(e));
  });

  std::vector<std::string> outcomes;
  long queries = 0;
  int successes = 0, matched = 0;
  for (const auto& r : report.records) {
    outcomes.push_back(r.outcome);
    ++report.outcomes[r.outcome];
    successes += r.success ? 1 : 0;
    if (r.success && r.conditioned_on && *r.conditioned_on == r.outcome) ++matched;
    report.mean_jitter += r.jitter;
    for (int c : r.active) ++report.active_histogram[c];
    queries += static_cast<long>(r.active.size());
    report.degraded_steps += r.degraded_steps;
    report.laplace_fallbacks += r.laplace_fallbacks;
  }
  report.success_rate = static_cast<double>(successes) / cfg.episodes;
  report.mean_jitter /= cfg.episodes;
  report.behavioral_entropy_bits = behavioral_entropy(outcomes);
  if (queries > 0) {
    const auto it = report.active_histogram.find(1);
    report.unimodal_fraction =
        it == report.active_histogram.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(queries);
  }
  if (pc.goal_horizon > 0 && successes > 0) report.conditioned_match_rate = static_cast<double>(matched) / successes;
  return report;
}

PairedTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, "paired test: need two equal-length samples of size >= 2");
  const auto n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  PairedTest out;
  out.mean_diff = mean;
  out.df = static_cast<int>(a.size()) - 1;
  const double se = std::sqrt(ss / (n - 1.0) / n);
  if (se == 0.0) {
    out.t = mean > 0.0 ? std::numeric_limits<double>::infinity() : (mean < 0.0 ? -std::numeric_limits<double>::infinity() : 0.0);
    out.p_value = mean > 0.0 ? 0.0 : (mean < 0.0 ? 1.0 : 0.5);
    return out;
  }
  out.t = mean / se;
  const boost::math::students_t dist(out.df);
  out.p_value = boost::math::cdf(boost::math::complement(dist, out.t));
  return out;
}

}  // namespace qfat
