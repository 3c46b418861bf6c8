#include "qfat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "qfat/checkpoint.hpp"
#include "qfat/error.hpp"

namespace qfat {
namespace {

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const std::string& what) {
  require(j.is_array(), what + " must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  require(rows >= 1, what + " must not be empty");
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    require(row.is_array() && static_cast<Eigen::Index>(row.size()) == cols, what + " rows must have equal length");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

double clip_gradients(ParameterStore<float>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store) sq += p.grad.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto& p : store) p.grad *= scale;
  }
  return norm;
}

class Adam {
 public:
  Adam(const ParameterStore<float>& store, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& p : store) {
      m_.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  void step(ParameterStore<float>& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(cfg_.beta1);
    const auto b2 = static_cast<float>(cfg_.beta2);
    const auto step_size = static_cast<float>(lr / c1);
    const auto inv_c2 = static_cast<float>(1.0 / c2);
    const auto decay = static_cast<float>(lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[i];
      m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
      v_[i] = b2 * v_[i] + (1.0f - b2) * p.grad.cwiseProduct(p.grad);
      if (decay != 0.0f) p.value *= 1.0f - decay;
      p.value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + 1e-8f);
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<Mat<float>> m_, v_;
  long t_ = 0;
};

void draw_history_masks(std::vector<Window>& windows, double prob, Rng& rng) {
  for (auto& w : windows) w.history_masked = prob > 0.0 && rng.uniform() < prob;
}

}  // namespace

int Dataset::state_dim() const {
  return trajectories.empty() ? 0 : static_cast<int>(trajectories.front().states.cols());
}

int Dataset::action_dim() const {
  return trajectories.empty() ? 0 : static_cast<int>(trajectories.front().actions.cols());
}

void Dataset::validate() const {
  require(!trajectories.empty(), "dataset: no trajectories");
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& t = trajectories[i];
    const std::string where = "dataset: trajectory " + std::to_string(i);
    require(t.states.rows() == t.actions.rows(), where + " has different state and action counts");
    require(t.states.cols() == state_dim() && t.actions.cols() == action_dim(), where + " has inconsistent dims");
    require(t.states.allFinite() && t.actions.allFinite(), where + " contains non-finite values");
  }
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), "dataset: cannot open " + path.string() + " for writing");
  if (!data.meta.empty()) out << nlohmann::json{{"meta", data.meta}}.dump() << '\n';
  for (const auto& t : data.trajectories) {
    out << nlohmann::json{{"states", matrix_to_json(t.states)}, {"actions", matrix_to_json(t.actions)}}.dump()
        << '\n';
  }
  require(static_cast<bool>(out), "dataset: write to " + path.string() + " failed");
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "dataset: cannot open " + path.string());
  Dataset data;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("dataset " + where + ": " + e.what());
    }
    if (j.contains("meta")) {
      data.meta = j["meta"];
      continue;
    }
    require(j.contains("states") && j.contains("actions"), "dataset " + where + ": expected states and actions");
    Trajectory t;
    t.states = matrix_from_json(j["states"], "dataset " + where + " states");
    t.actions = matrix_from_json(j["actions"], "dataset " + where + " actions");
    data.trajectories.push_back(std::move(t));
  }
  data.validate();
  return data;
}

MinMaxNormalizer::MinMaxNormalizer(Eigen::VectorXd lo, Eigen::VectorXd hi) : lo_(std::move(lo)), hi_(std::move(hi)) {
  require(lo_.size() == hi_.size() && (lo_.array() <= hi_.array()).all(), "normalizer: need lo <= hi per dimension");
}

MinMaxNormalizer MinMaxNormalizer::fit(const std::vector<const Eigen::MatrixXd*>& rows) {
  require(!rows.empty(), "normalizer: no data");
  Eigen::VectorXd lo = rows.front()->colwise().minCoeff().transpose();
  Eigen::VectorXd hi = rows.front()->colwise().maxCoeff().transpose();
  for (const auto* m : rows) {
    lo = lo.cwiseMin(m->colwise().minCoeff().transpose());
    hi = hi.cwiseMax(m->colwise().maxCoeff().transpose());
  }
  return MinMaxNormalizer(lo, hi);
}

Eigen::VectorXd MinMaxNormalizer::normalize(const Eigen::VectorXd& x) const {
  Eigen::VectorXd out(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double range = hi_[j] - lo_[j];
    out[j] = range == 0.0 ? x[j] - lo_[j] : 2.0 * (x[j] - lo_[j]) / range - 1.0;
  }
  return out;
}

Eigen::VectorXd MinMaxNormalizer::denormalize(const Eigen::VectorXd& x) const {
  Eigen::VectorXd out(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double range = hi_[j] - lo_[j];
    out[j] = range == 0.0 ? x[j] + lo_[j] : (x[j] + 1.0) * 0.5 * range + lo_[j];
  }
  return out;
}

Eigen::MatrixXd MinMaxNormalizer::normalize(const Eigen::MatrixXd& x) const {
  require(x.cols() == dim(), "normalizer: dimension mismatch");
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = normalize(Eigen::VectorXd(x.row(r).transpose())).transpose();
  return out;
}

Eigen::MatrixXd MinMaxNormalizer::denormalize(const Eigen::MatrixXd& x) const {
  require(x.cols() == dim(), "normalizer: dimension mismatch");
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    out.row(r) = denormalize(Eigen::VectorXd(x.row(r).transpose())).transpose();
  }
  return out;
}

void to_json(nlohmann::json& j, const Normalizer& n) {
  j = {{"state_min", vector_to_json(n.states.lo())},
       {"state_max", vector_to_json(n.states.hi())},
       {"action_min", vector_to_json(n.actions.lo())},
       {"action_max", vector_to_json(n.actions.hi())}};
}

void from_json(const nlohmann::json& j, Normalizer& n) {
  n.states = MinMaxNormalizer(vector_from_json(j.at("state_min")), vector_from_json(j.at("state_max")));
  n.actions = MinMaxNormalizer(vector_from_json(j.at("action_min")), vector_from_json(j.at("action_max")));
}

void TrainConfig::validate() const {
  require(epochs >= 1, "train config: epochs must be >= 1");
  require(batch_size >= 1, "train config: batch_size must be >= 1");
  require(max_lr > 0.0, "train config: max_lr must be positive");
  require(!min_lr || (*min_lr >= 0.0 && *min_lr <= max_lr), "train config: need 0 <= min_lr <= max_lr");
  require(schedule == "cosine" || schedule == "constant", "train config: schedule must be cosine or constant");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "train config: betas must lie in [0, 1)");
  require(weight_decay >= 0.0, "train config: weight_decay must be non-negative");
  require(grad_clip >= 0.0, "train config: grad_clip must be non-negative");
  require(history_mask_prob >= 0.0 && history_mask_prob <= 1.0, "train config: history_mask_prob must lie in [0, 1]");
  require(eval_every >= 1, "train config: eval_every must be >= 1");
  require(windows_per_epoch >= 0, "train config: windows_per_epoch must be >= 0");
  require(active_threshold > 0.0 && active_threshold < 1.0, "train config: active_threshold must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"max_lr", c.max_lr},
       {"min_lr", c.min_lr ? nlohmann::json(*c.min_lr) : nlohmann::json(nullptr)},
       {"schedule", c.schedule},
       {"optimizer", "adam"},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"history_mask_prob", c.history_mask_prob},
       {"eval_every", c.eval_every},
       {"seed", c.seed},
       {"windows_per_epoch", c.windows_per_epoch},
       {"active_threshold", c.active_threshold}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* const kKnown[] = {"epochs",       "batch_size",       "max_lr",      "min_lr",
                                       "schedule",     "optimizer",        "beta1",       "beta2",
                                       "weight_decay", "grad_clip",        "history_mask_prob",
                                       "eval_every",   "seed",             "windows_per_epoch",
                                       "active_threshold"};
  for (const auto& [key, _] : j.items()) {
    require(std::find(std::begin(kKnown), std::end(kKnown), key) != std::end(kKnown),
            "train config: unknown field '" + key + "'");
  }
  if (j.contains("optimizer")) {
    require(j["optimizer"] == "adam", "train config: only the adam optimizer is supported");
  }
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_lr = j.value("max_lr", d.max_lr);
  if (j.contains("min_lr")) {
    c.min_lr = j["min_lr"].is_null() ? std::nullopt : std::optional<double>(j["min_lr"].get<double>());
  } else {
    c.min_lr = d.min_lr;
  }
  c.schedule = j.value("schedule", d.schedule);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.history_mask_prob = j.value("history_mask_prob", d.history_mask_prob);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.seed = j.value("seed", d.seed);
  c.windows_per_epoch = j.value("windows_per_epoch", d.windows_per_epoch);
  c.active_threshold = j.value("active_threshold", d.active_threshold);
  c.validate();
}

std::size_t validation_count(std::size_t n) {
  if (n < 2) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(n))));
}

std::vector<Window> make_windows(const Eigen::MatrixXd& states, const Eigen::MatrixXd& actions,
                                 const PolicyConfig& policy) {
  const int hs = policy.state_history;
  const int hg = policy.goal_horizon;
  const int ah = policy.action_horizon;
  const int m = policy.action_dim;
  const auto n = static_cast<int>(states.rows());
  std::vector<Window> out;
  for (int last = 0; last + ah <= n; ++last) {
    Window w;
    w.states.resize(hs, states.cols());
    w.targets.resize(hs, policy.target_dim());
    w.valid.assign(static_cast<std::size_t>(hs), 0);
    for (int q = 0; q < hs; ++q) {
      const int t = last - (hs - 1) + q;
      w.states.row(q) = states.row(std::max(t, 0));
      if (t >= 0) {
        w.valid[static_cast<std::size_t>(q)] = 1;
        for (int h = 0; h < ah; ++h) w.targets.row(q).segment(h * m, m) = actions.row(t + h);
      } else {
        w.targets.row(q).setZero();
      }
    }
    w.goals.resize(hg, states.cols());
    for (int g = 0; g < hg; ++g) w.goals.row(g) = states.row(std::min(last + 1 + g, n - 1));
    out.push_back(std::move(w));
  }
  return out;
}

PreparedData prepare(const Dataset& data, const PolicyConfig& policy, const TrainConfig& train, Rng& rng) {
  data.validate();
  policy.validate();
  train.validate();
  require(data.state_dim() == policy.state_dim, "prepare: dataset state_dim does not match the policy");
  require(data.action_dim() == policy.action_dim, "prepare: dataset action_dim does not match the policy");

  PreparedData out;
  const int min_len = policy.state_history + policy.action_horizon + policy.goal_horizon;
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
    if (data.trajectories[i].states.rows() >= min_len) {
      usable.push_back(i);
    } else {
      ++out.skipped_trajectories;
    }
  }
  require(!usable.empty(), "prepare: every trajectory is shorter than the context length");

  std::vector<std::size_t> order = usable;
  std::shuffle(order.begin(), order.end(), rng.engine());
  const std::size_t n_val = validation_count(order.size());
  out.val_trajectories.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.train_trajectories.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(out.val_trajectories.begin(), out.val_trajectories.end());
  std::sort(out.train_trajectories.begin(), out.train_trajectories.end());

  std::vector<const Eigen::MatrixXd*> train_states, train_actions;
  for (auto i : out.train_trajectories) {
    train_states.push_back(&data.trajectories[i].states);
    train_actions.push_back(&data.trajectories[i].actions);
  }
  out.normalizer.states = MinMaxNormalizer::fit(train_states);
  out.normalizer.actions = MinMaxNormalizer::fit(train_actions);

  auto cut = [&](const std::vector<std::size_t>& ids, std::vector<Window>& dst) {
    for (auto i : ids) {
      const auto& t = data.trajectories[i];
      auto ws = make_windows(out.normalizer.states.normalize(t.states), out.normalizer.actions.normalize(t.actions),
                             policy);
      std::move(ws.begin(), ws.end(), std::back_inserter(dst));
    }
  };
  cut(out.train_trajectories, out.train);
  cut(out.val_trajectories, out.val);
  draw_history_masks(out.train, train.history_mask_prob, rng);
  return out;
}

double learning_rate(const TrainConfig& cfg, long step, long total_steps) {
  if (!cfg.min_lr || cfg.schedule == "constant" || total_steps <= 1) return cfg.max_lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return *cfg.min_lr + 0.5 * (cfg.max_lr - *cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

ValidationStats validate_policy(Policy& policy, const std::vector<Window>& windows, int batch_size,
                                double active_threshold) {
  require(!windows.empty(), "validate: no windows");
  double nll_sum = 0.0;
  double active_sum = 0.0;
  long positions = 0;
  std::vector<const Window*> batch;
  std::vector<Window> unmasked;
  for (std::size_t start = 0; start < windows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(windows.size(), start + static_cast<std::size_t>(batch_size));
    unmasked.assign(windows.begin() + static_cast<std::ptrdiff_t>(start),
                    windows.begin() + static_cast<std::ptrdiff_t>(stop));
    batch.clear();
    for (auto& w : unmasked) {
      w.history_masked = false;
      batch.push_back(&w);
    }
    const LossResult r = policy.nll_loss(batch, false, nullptr, false, active_threshold);
    nll_sum += r.loss * r.positions;
    active_sum += r.active_sum;
    positions += r.positions;
  }
  return {nll_sum / static_cast<double>(positions), active_sum / static_cast<double>(positions)};
}

TrainResult train(Policy& policy, const PreparedData& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  require(!data.train.empty(), "train: no training windows");

  Rng data_rng = Rng::substream(cfg.seed, "data");
  Rng dropout_rng = Rng::substream(cfg.seed, "dropout");

  std::vector<Window> windows = data.train;
  const std::size_t per_epoch = cfg.windows_per_epoch > 0
                                    ? std::min(windows.size(), static_cast<std::size_t>(cfg.windows_per_epoch))
                                    : windows.size();
  const auto batch_size = static_cast<std::size_t>(cfg.batch_size);
  const long batches_per_epoch = static_cast<long>((per_epoch + batch_size - 1) / batch_size);
  const long total_steps = batches_per_epoch * cfg.epochs;

  TrainResult result;
  if (!cfg.min_lr && cfg.schedule == "cosine") result.lr_note = "min_lr absent: constant learning rate";
  result.best_val_nll = std::numeric_limits<double>::infinity();

  Adam adam(policy.params(), cfg);
  std::vector<std::size_t> order(windows.size());
  std::vector<const Window*> batch;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    draw_history_masks(windows, cfg.history_mask_prob, data_rng);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), data_rng.engine());

    double epoch_nll = 0.0;
    long epoch_positions = 0;
    double lr = cfg.max_lr;
    for (long b = 0; b < batches_per_epoch; ++b, ++step) {
      batch.clear();
      const std::size_t start = static_cast<std::size_t>(b) * batch_size;
      for (std::size_t i = start; i < std::min(per_epoch, start + batch_size); ++i) batch.push_back(&windows[order[i]]);

      policy.params().zero_grad();
      const LossResult r = policy.nll_loss(batch, true, &dropout_rng, true);
      if (!std::isfinite(r.loss)) {
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b));
      }
      clip_gradients(policy.params(), cfg.grad_clip);
      lr = learning_rate(cfg, step, total_steps);
      adam.step(policy.params(), lr);
      epoch_nll += r.loss * r.positions;
      epoch_positions += r.positions;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_nll = epoch_nll / static_cast<double>(epoch_positions);
    rec.lr = lr;
    if (!data.val.empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      const ValidationStats v = validate_policy(policy, data.val, cfg.batch_size, cfg.active_threshold);
      rec.val_nll = v.nll;
      rec.mean_active_mixtures = v.mean_active_mixtures;
      if (v.nll < result.best_val_nll) {
        result.best_val_nll = v.nll;
        result.best_epoch = epoch;
        result.best = policy.params();
        if (hooks.on_best) hooks.on_best(policy, rec);
      }
    }
    result.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  if (result.best_epoch < 0) result.best = policy.params();
  return result;
}

void write_train_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log,
                     const nlohmann::json& header) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), "train log: cannot open " + path.string());
  out << "# " << header.dump() << '\n';
  out << "epoch,train_nll,val_nll,mean_active_mixtures,lr\n";
  out << std::setprecision(17);
  for (const auto& r : log) {
    out << r.epoch << ',' << r.train_nll << ',';
    if (r.val_nll) out << *r.val_nll;
    out << ',';
    if (r.mean_active_mixtures) out << *r.mean_active_mixtures;
    out << ',' << r.lr << '\n';
  }
}

void save_policy(const std::filesystem::path& path, const Policy& policy, const Normalizer& normalizer,
                 const nlohmann::json& meta) {
  save_parameters(path, policy.params());
  nlohmann::json side = {{"format", "qfat-policy"},
                         {"version", kCheckpointVersion},
                         {"policy", policy.config()},
                         {"normalizer", normalizer},
                         {"meta", meta}};
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  require(static_cast<bool>(out), "checkpoint: cannot write sidecar for " + path.string());
  out << std::setw(2) << side << '\n';
}

PolicyBundle load_policy(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".json");
  require(static_cast<bool>(in), "checkpoint: missing sidecar " + path.string() + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint sidecar " + path.string() + ".json: " + e.what());
  }
  require(side.value("format", "") == "qfat-policy", "checkpoint sidecar: not a qfat-policy file");
  require(side.value("version", 0U) == kCheckpointVersion, "checkpoint sidecar: unsupported version");
  PolicyBundle bundle{Policy(side.at("policy").get<PolicyConfig>()), side.at("normalizer").get<Normalizer>(),
                      side.value("meta", nlohmann::json::object())};
  assign_parameters(bundle.policy.params(), load_parameters(path));
  return bundle;
}

PolicyBundle load_policy(const std::filesystem::path& path, const PolicyConfig& expected) {
  PolicyBundle bundle = load_policy(path);
  require(bundle.policy.config() == expected,
          "checkpoint: policy config in " + path.string() + " does not match the expected config (" +
              nlohmann::json(bundle.policy.config()).dump() + " vs " + nlohmann::json(expected).dump() + ")");
  return bundle;
}

}  // namespace qfat
