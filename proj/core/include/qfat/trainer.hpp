#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "qfat/policy.hpp"
#include "qfat/rng.hpp"

namespace qfat {

/// One demonstration: action[t] is taken after observing state[t].
struct Trajectory {
  Eigen::MatrixXd states;   // n x d
  Eigen::MatrixXd actions;  // n x m
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  nlohmann::json meta = nlohmann::json::object();

  int state_dim() const;
  int action_dim() const;
  void validate() const;
};

/// JSON lines: an optional leading {"meta": {...}} record, then one
/// {"states": [[...]], "actions": [[...]]} object per trajectory.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

/// Per-dimension min-max scaling to [-1, 1]. Constant dimensions map to 0
/// with unit scale.
class MinMaxNormalizer {
 public:
  MinMaxNormalizer() = default;
  MinMaxNormalizer(Eigen::VectorXd lo, Eigen::VectorXd hi);

  /// Statistics over the rows of every matrix.
  static MinMaxNormalizer fit(const std::vector<const Eigen::MatrixXd*>& rows);

  Eigen::MatrixXd normalize(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd denormalize(const Eigen::MatrixXd& x) const;
  Eigen::VectorXd normalize(const Eigen::VectorXd& x) const;
  Eigen::VectorXd denormalize(const Eigen::VectorXd& x) const;

  const Eigen::VectorXd& lo() const { return lo_; }
  const Eigen::VectorXd& hi() const { return hi_; }
  int dim() const { return static_cast<int>(lo_.size()); }

 private:
  Eigen::VectorXd lo_, hi_;
};

struct Normalizer {
  MinMaxNormalizer states;
  MinMaxNormalizer actions;
};

void to_json(nlohmann::json& j, const Normalizer& n);
void from_json(const nlohmann::json& j, Normalizer& n);

struct TrainConfig {
  int epochs = 100;
  int batch_size = 64;
  double max_lr = 1e-3;
  std::optional<double> min_lr = 1e-6;  // absent: constant learning rate
  std::string schedule = "cosine";
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double grad_clip = 1.0;               // global-norm clip; 0 disables
  double history_mask_prob = 0.0;
  int eval_every = 1;
  std::uint64_t seed = 0;
  int windows_per_epoch = 0;            // 0: every training window each epoch
  double active_threshold = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct PreparedData {
  std::vector<Window> train;
  std::vector<Window> val;
  Normalizer normalizer;
  std::vector<std::size_t> train_trajectories;
  std::vector<std::size_t> val_trajectories;
  int skipped_trajectories = 0;
};

/// Number of validation trajectories for a dataset of n (5%, at least one when n >= 2).
std::size_t validation_count(std::size_t n);

/// Splits by trajectory, fits the normalizer on the training split, and cuts
/// every trajectory into windows ending at each time step.
PreparedData prepare(const Dataset& data, const PolicyConfig& policy, const TrainConfig& train, Rng& rng);

/// Windows of one normalized trajectory. Positions before the first state
/// repeat it and are excluded from the loss; goals are the h^g states after
/// the window, clamped to the final state.
std::vector<Window> make_windows(const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions,
                                 const PolicyConfig& policy);

/// Cosine decay from max_lr at step 0 to min_lr at the final step.
double learning_rate(const TrainConfig& cfg, long step, long total_steps);

struct EpochRecord {
  int epoch = 0;
  double train_nll = 0.0;
  std::optional<double> val_nll;
  std::optional<double> mean_active_mixtures;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  ParameterStore<float> best;
  double best_val_nll = 0.0;
  int best_epoch = -1;
  std::string lr_note;
};

struct ValidationStats {
  double nll = 0.0;
  double mean_active_mixtures = 0.0;
};

/// Dropout off, no history masking.
ValidationStats validate_policy(Policy& policy, const std::vector<Window>& windows, int batch_size,
                                double active_threshold);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called whenever the validation NLL improves.
  std::function<void(const Policy&, const EpochRecord&)> on_best;
};

/// Adam over the mean window NLL. Throws NumericalError on a non-finite loss.
TrainResult train(Policy& policy, const PreparedData& data, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Writes the training log as CSV; the first line is a '#' comment holding `header`.
void write_train_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log,
                     const nlohmann::json& header);

struct PolicyBundle {
  Policy policy;
  Normalizer normalizer;
  nlohmann::json meta;
};

/// Parameter file at `path`, JSON sidecar at `path` + ".json".
void save_policy(const std::filesystem::path& path, const Policy& policy, const Normalizer& normalizer,
                 const nlohmann::json& meta = nlohmann::json::object());
PolicyBundle load_policy(const std::filesystem::path& path);
/// As above, rejecting a sidecar whose PolicyConfig differs from `expected`.
PolicyBundle load_policy(const std::filesystem::path& path, const PolicyConfig& expected);

}  // namespace qfat
