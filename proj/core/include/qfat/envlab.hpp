#pragma once

#include <Eigen/Dense>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qfat/policy.hpp"
#include "qfat/rng.hpp"
#include "qfat/trainer.hpp"

namespace qfat {

enum class EnvKind { kMultiroute, kSequencing };

std::string to_string(EnvKind kind);
EnvKind env_kind_from_string(const std::string& name);

struct StepResult {
  Eigen::VectorXd observation;
  bool done = false;
  bool success = false;
};

/// 2-D point mass driven by displacement actions with ||a|| <= max_step.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual EnvKind kind() const = 0;
  virtual int observation_dim() const = 0;
  int action_dim() const { return 2; }
  virtual int max_steps() const = 0;

  virtual Eigen::VectorXd reset() = 0;
  /// Applies clamp(a) plus process noise drawn from `rng`.
  virtual StepResult step(const Eigen::Vector2d& action, Rng& rng) = 0;

  virtual Eigen::VectorXd observation() const = 0;
  const Eigen::Vector2d& position() const { return pos_; }
  int steps() const { return steps_; }
  virtual bool success() const = 0;
  /// Symbol summarizing the episode so far; "incomplete" until it succeeds.
  virtual std::string outcome() const = 0;

  static constexpr double kMaxStep = 0.05;
  static Eigen::Vector2d clamp_action(const Eigen::Vector2d& a);

 protected:
  explicit Environment(double process_noise) : process_noise_(process_noise) {}
  void move(const Eigen::Vector2d& action, Rng& rng);

  Eigen::Vector2d pos_ = Eigen::Vector2d::Zero();
  int steps_ = 0;
  double process_noise_;
};

/// Start at the origin, reach the disc around (1, 1) along one of four routes:
/// right then up via (1, +-0.08), or up then right via (+-0.08, 1).
class MultirouteEnv final : public Environment {
 public:
  explicit MultirouteEnv(double process_noise = 0.0) : Environment(process_noise) {}

  EnvKind kind() const override { return EnvKind::kMultiroute; }
  int observation_dim() const override { return 2; }
  int max_steps() const override { return kMaxSteps; }
  Eigen::VectorXd reset() override;
  StepResult step(const Eigen::Vector2d& action, Rng& rng) override;
  Eigen::VectorXd observation() const override { return pos_; }
  bool success() const override;
  /// "right" or "up" by the first leg taken ("direct" if neither), "incomplete"
  /// while unfinished.
  std::string outcome() const override;

  static constexpr int kMaxSteps = 120;
  static constexpr double kTargetRadius = 0.05;
  static Eigen::Vector2d target() { return {1.0, 1.0}; }
  /// Route r in 0..3: 0, 1 go right first (y offset +0.08, -0.08); 2, 3 go up first.
  static Eigen::Vector2d waypoint(int route);
  static constexpr double kRouteOffset = 0.08;

 private:
  std::string first_leg_;
};

/// Start at the origin, visit goals A = (-1, 1) and B = (1, 1) in either
/// order. Observation is (x, y, visited A, visited B).
class SequencingEnv final : public Environment {
 public:
  explicit SequencingEnv(double process_noise = 0.0) : Environment(process_noise) {}

  EnvKind kind() const override { return EnvKind::kSequencing; }
  int observation_dim() const override { return 4; }
  int max_steps() const override { return kMaxSteps; }
  Eigen::VectorXd reset() override;
  StepResult step(const Eigen::Vector2d& action, Rng& rng) override;
  Eigen::VectorXd observation() const override;
  bool success() const override { return order_.size() == 2; }
  /// "AB", "BA", or "incomplete".
  std::string outcome() const override;
  const std::string& order() const { return order_; }

  static constexpr int kMaxSteps = 150;
  static constexpr double kGoalRadius = 0.15;
  static Eigen::Vector2d goal(char name) { return name == 'A' ? Eigen::Vector2d(-1.0, 1.0) : Eigen::Vector2d(1.0, 1.0); }

 private:
  std::string order_;  // append-only visit order
};

struct EnvSpec {
  EnvKind kind = EnvKind::kMultiroute;
  double process_noise = 0.0;
};

std::unique_ptr<Environment> make_env(const EnvSpec& spec);

/// Outcome the environment would report after replaying a demonstration:
/// every recorded state plus the position reached by the final action.
std::string outcome_of_trajectory(EnvKind kind, const Trajectory& demo);

/// Demonstrations with a leading meta record; meta["labels"] holds the route
/// (0..3) or ordering (0 = AB, 1 = BA) of every trajectory.
Dataset generate_multiroute_demos(int n, double noise_std, Rng& rng);
Dataset generate_sequencing_demos(int n, double noise_std, Rng& rng);
Dataset generate_demos(EnvKind kind, int n, double noise_std, Rng& rng);

/// Shannon entropy in bits of the empirical distribution over symbols.
double behavioral_entropy(std::span<const std::string> outcomes);

struct EpisodeRecord {
  Eigen::MatrixXd positions;  // (steps + 1) x 2, environment units
  Eigen::MatrixXd actions;    // steps x 2, clamped as applied
  bool success = false;
  std::string outcome;
  std::optional<std::string> conditioned_on;  // reference outcome when goal-conditioned
  double jitter = 0.0;        // mean squared consecutive-action difference
  std::vector<int> active;    // active-mixture count per policy query
  int degraded_steps = 0;
  int laplace_fallbacks = 0;
};

struct RolloutConfig {
  int episodes = 100;
  std::uint64_t seed = 0;
  int threads = 1;
  double active_threshold = 0.1;
  /// Goal-conditioned evaluation: episode e follows demo e mod size. The goal
  /// window slides along that demo with the step index.
  const std::vector<Trajectory>* goal_demos = nullptr;
};

struct RolloutReport {
  EnvSpec env;
  nlohmann::json sampler;
  int episodes = 0;
  std::uint64_t seed = 0;
  double active_threshold = 0.1;
  double success_rate = 0.0;
  double behavioral_entropy_bits = 0.0;
  double mean_jitter = 0.0;
  std::map<int, long> active_histogram;  // active count -> policy queries
  double unimodal_fraction = 0.0;        // share of queries with exactly one active component
  std::map<std::string, int> outcomes;
  std::optional<double> conditioned_match_rate;  // among successful episodes
  int degraded_steps = 0;
  int laplace_fallbacks = 0;
  std::vector<EpisodeRecord> records;
};

/// Episode e uses seed cfg.seed + e, so the thread count never changes results.
RolloutReport rollout(const Policy& policy, const Normalizer& normalizer, const EnvSpec& env,
                      const SamplerSpec& sampler, const RolloutConfig& cfg);

struct PairedTest {
  double mean_diff = 0.0;
  double t = 0.0;
  int df = 0;
  double p_value = 1.0;  // one-sided, H1: mean(a - b) > 0
};

PairedTest paired_t_test(std::span<const double> a, std::span<const double> b);

/// Report as JSON: summary fields, the sampler spec verbatim, and per-episode summaries.
nlohmann::json report_to_json(const RolloutReport& report);
void write_report(const std::filesystem::path& path, const RolloutReport& report, const nlohmann::json& config);
/// Columns episode, step, x, y, ax, ay; the first line is a '#' JSON comment.
void write_trajectories_csv(const std::filesystem::path& path, const RolloutReport& report,
                            const nlohmann::json& config);
/// Trajectory overlay over the environment's goal regions.
std::string trajectories_svg(const RolloutReport& report);
/// Scatter of 2-D points, one colour per series.
std::string scatter_svg(const std::vector<std::pair<std::string, Eigen::MatrixXd>>& series, const std::string& title);

}  // namespace qfat
