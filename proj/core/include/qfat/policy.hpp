#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "qfat/backbone.hpp"
#include "qfat/gmm.hpp"
#include "qfat/modes.hpp"
#include "qfat/rng.hpp"

namespace qfat {

struct PolicyConfig {
  int state_dim = 2;
  int action_dim = 2;
  int mixtures = 4;
  int state_history = 5;
  int goal_horizon = 0;  // 0 = unconditional
  int layers = 2;
  int heads = 2;
  int embed_dim = 32;
  double dropout = 0.1;
  int action_horizon = 1;

  /// Width of one predicted action chunk.
  int target_dim() const { return action_horizon * action_dim; }
  /// Head outputs per position: k logits, k x target_dim means, k x target_dim stddev pre-activations.
  int head_width() const { return mixtures * (1 + 2 * target_dim()); }
  int tokens() const { return goal_horizon + state_history; }
  DecoderConfig decoder() const;
  void validate() const;

  bool operator==(const PolicyConfig&) const = default;
};

void to_json(nlohmann::json& j, const PolicyConfig& c);
void from_json(const nlohmann::json& j, PolicyConfig& c);

/// One training/inference context, already normalized to [-1, 1].
struct Window {
  Eigen::MatrixXd states;   // state_history x state_dim
  Eigen::MatrixXd goals;    // goal_horizon x state_dim (0 rows when unconditional)
  Eigen::MatrixXd targets;  // state_history x target_dim; empty for inference
  std::vector<std::uint8_t> valid;  // state_history; 1 = position contributes to the loss
  /// Every context position except the last is replaced by the learned mask state.
  bool history_masked = false;
};

enum class SamplerKind { kVanilla, kScaled, kMode };

struct SamplerSpec {
  SamplerKind kind = SamplerKind::kVanilla;
  double alpha = 1e-6;   // variance scale for kScaled
  ModeNoise noise = NoNoise{};
  ModeFinderConfig mode_config;

  static SamplerSpec vanilla() { return {}; }
  static SamplerSpec scaled(double alpha);
  static SamplerSpec mode(ModeNoise noise = NoNoise{});
  void validate() const;
};

void to_json(nlohmann::json& j, const SamplerSpec& s);
std::string to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(const std::string& name);

struct ActResult {
  Eigen::MatrixXd actions;  // action_horizon x action_dim, normalized units
  GmmParams gmm;            // distribution the actions were drawn from
  int modes_found = 0;      // mode sampler only
  bool degraded = false;    // mode sampler fell back to a component mean
  bool laplace_fallback = false;
};

struct LossResult {
  double loss = 0.0;   // mean NLL over contributing positions
  int positions = 0;
  /// Sum over contributing positions of the active-component count; only
  /// filled when nll_loss is given a positive threshold.
  double active_sum = 0.0;
};

/// Hypercube corners for k components in m dimensions, rows in assignment
/// order. For k <= 2^m the set maximizes the minimum pairwise distance;
/// beyond that every corner is used once and the list repeats.
Eigen::MatrixXd hypercube_corners(int k, int m);

/// Sequence policy: linear token projection, causal decoder, GMM head.
template <typename T>
class BasicPolicy {
 public:
  explicit BasicPolicy(PolicyConfig cfg);

  const PolicyConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  /// Random backbone weights and the hypercube-initialized GMM head.
  void init(Rng& rng);

  /// Raw head outputs, one per state position.
  std::vector<RawHeadOutputs> raw_outputs(const Eigen::MatrixXd& states, const Eigen::MatrixXd& goals) const;

  /// Action distributions, one per state position.
  std::vector<GmmParams> forward(const Eigen::MatrixXd& states, const Eigen::MatrixXd& goals) const;

  /// Mean NLL over the batch. With `accumulate` set, gradients of the mean
  /// loss are added to params().grad. Dropout is active only in train mode.
  LossResult nll_loss(std::span<const Window* const> batch, bool train_mode, Rng* rng, bool accumulate,
                      double active_threshold = 0.0);

  /// Samples the next action chunk from the last position's distribution.
  ActResult act(const Eigen::MatrixXd& states, const Eigen::MatrixXd& goals, const SamplerSpec& sampler,
                Rng& rng) const;

  /// Decoder-only forward on one window; exposed for timing.
  Mat<T> backbone_features(const Window& w) const;
  /// Head projection of the last feature row plus GMM conversion; exposed for timing.
  GmmParams decode_head(const Mat<T>& features) const;

 private:
  struct Indices {
    std::size_t in_w, in_b, pos, type, mask_state, head_w, head_b;
  };

  SequenceBatch<T> embed(std::span<const Window* const> batch) const;
  RawHeadOutputs unpack(const Eigen::Ref<const Vec<T>>& row) const;

  PolicyConfig cfg_;
  ParameterStore<T> store_;
  Decoder<T> decoder_;
  Indices idx_{};
};

using Policy = BasicPolicy<float>;

extern template class BasicPolicy<float>;
extern template class BasicPolicy<double>;

}  // namespace qfat
