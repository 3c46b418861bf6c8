#include "qfat/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include "qfat/error.hpp"

namespace qfat {
namespace {

// softplus(x) = 1
constexpr double kUnitStddevPreact = 0.54132485461291810;

Eigen::RowVectorXd corner(unsigned index, int m) {
  Eigen::RowVectorXd c(m);
  for (int j = 0; j < m; ++j) c[j] = (index >> j) & 1U ? 1.0 : -1.0;
  return c;
}

// Exhaustive max-min Hamming-distance code search; small m only.
void search_codes(int m, int k, unsigned next, std::vector<unsigned>& current, int current_min,
                  std::vector<unsigned>& best, int& best_min) {
  if (static_cast<int>(current.size()) == k) {
    if (current_min > best_min) {
      best_min = current_min;
      best = current;
    }
    return;
  }
  const unsigned total = 1U << m;
  for (unsigned c = next; c < total; ++c) {
    int d = current_min;
    for (unsigned chosen : current) d = std::min(d, std::popcount(chosen ^ c));
    if (d <= best_min) continue;
    current.push_back(c);
    search_codes(m, k, c + 1, current, d, best, best_min);
    current.pop_back();
  }
}

}  // namespace

Eigen::MatrixXd hypercube_corners(int k, int m) {
  require(k >= 1 && m >= 1, "hypercube_corners: k and m must be positive");
  require(m <= 30, "hypercube_corners: dimension too large");
  const unsigned total = 1U << m;
  std::vector<unsigned> order;
  if (static_cast<unsigned>(k) >= total) {
    for (unsigned c = 0; c < total; ++c) order.push_back(c);
  } else if (m <= 4) {
    std::vector<unsigned> current;
    int best_min = -1;
    search_codes(m, k, 0, current, std::numeric_limits<int>::max(), order, best_min);
  } else {
    // Greedy farthest-point selection starting from the all-minus corner.
    order.push_back(0);
    std::vector<int> dist(total);
    for (unsigned c = 0; c < total; ++c) dist[c] = std::popcount(c);
    while (static_cast<int>(order.size()) < k) {
      unsigned pick = 0;
      for (unsigned c = 1; c < total; ++c) {
        if (dist[c] > dist[pick]) pick = c;
      }
      order.push_back(pick);
      for (unsigned c = 0; c < total; ++c) dist[c] = std::min(dist[c], std::popcount(c ^ pick));
    }
  }
  Eigen::MatrixXd out(k, m);
  for (int i = 0; i < k; ++i) out.row(i) = corner(order[static_cast<std::size_t>(i) % order.size()], m);
  return out;
}

DecoderConfig PolicyConfig::decoder() const {
  DecoderConfig d;
  d.layers = layers;
  d.heads = heads;
  d.embed_dim = embed_dim;
  d.dropout = dropout;
  return d;
}

void PolicyConfig::validate() const {
  require(state_dim >= 1, "policy config: state_dim must be >= 1");
  require(action_dim >= 1, "policy config: action_dim must be >= 1");
  require(mixtures >= 1, "policy config: mixtures must be >= 1");
  require(state_history >= 1, "policy config: state_history must be >= 1");
  require(goal_horizon >= 0, "policy config: goal_horizon must be >= 0");
  require(action_horizon >= 1, "policy config: action_horizon must be >= 1");
  decoder().validate();
}

void to_json(nlohmann::json& j, const PolicyConfig& c) {
  j = nlohmann::json{{"state_dim", c.state_dim},         {"action_dim", c.action_dim},
                     {"mixtures", c.mixtures},           {"state_history", c.state_history},
                     {"goal_horizon", c.goal_horizon},   {"layers", c.layers},
                     {"heads", c.heads},                 {"embed_dim", c.embed_dim},
                     {"dropout", c.dropout},             {"action_horizon", c.action_horizon}};
}

void from_json(const nlohmann::json& j, PolicyConfig& c) {
  static const char* const kKnown[] = {"state_dim", "action_dim", "mixtures", "state_history", "goal_horizon",
                                       "layers",    "heads",      "embed_dim", "dropout",      "action_horizon"};
  for (const auto& [key, _] : j.items()) {
    require(std::find(std::begin(kKnown), std::end(kKnown), key) != std::end(kKnown),
            "policy config: unknown field '" + key + "'");
  }
  PolicyConfig d;
  c.state_dim = j.value("state_dim", d.state_dim);
  c.action_dim = j.value("action_dim", d.action_dim);
  c.mixtures = j.value("mixtures", d.mixtures);
  c.state_history = j.value("state_history", d.state_history);
  c.goal_horizon = j.value("goal_horizon", d.goal_horizon);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.dropout = j.value("dropout", d.dropout);
  c.action_horizon = j.value("action_horizon", d.action_horizon);
  c.validate();
}

SamplerSpec SamplerSpec::scaled(double alpha) {
  SamplerSpec s;
  s.kind = SamplerKind::kScaled;
  s.alpha = alpha;
  return s;
}

SamplerSpec SamplerSpec::mode(ModeNoise noise) {
  SamplerSpec s;
  s.kind = SamplerKind::kMode;
  s.noise = noise;
  return s;
}

void SamplerSpec::validate() const {
  if (kind == SamplerKind::kScaled) require(alpha > 0.0 && alpha <= 1.0, "sampler: alpha must lie in (0, 1]");
  if (kind == SamplerKind::kMode) mode_config.validate();
}

std::string to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::kVanilla: return "vanilla";
    case SamplerKind::kScaled: return "scaled";
    case SamplerKind::kMode: return "mode";
  }
  return "unknown";
}

SamplerKind sampler_kind_from_string(const std::string& name) {
  if (name == "vanilla") return SamplerKind::kVanilla;
  if (name == "scaled") return SamplerKind::kScaled;
  if (name == "mode") return SamplerKind::kMode;
  throw ValidationError("sampler: unknown kind '" + name + "' (expected vanilla, scaled or mode)");
}

void to_json(nlohmann::json& j, const SamplerSpec& s) {
  j = nlohmann::json::object();
  j["kind"] = to_string(s.kind);
  if (s.kind == SamplerKind::kScaled) j["alpha"] = s.alpha;
  if (s.kind == SamplerKind::kMode) {
    nlohmann::json noise;
    if (std::holds_alternative<NoNoise>(s.noise)) {
      noise = {{"type", "none"}};
    } else if (const auto* f = std::get_if<FixedNoise>(&s.noise)) {
      noise = {{"type", "fixed"}, {"sigma", f->sigma}};
    } else if (const auto* l = std::get_if<LaplaceNoise>(&s.noise)) {
      noise = {{"type", "laplace"}, {"temperature", l->temperature}};
    }
    j["noise"] = noise;
    const auto& c = s.mode_config;
    j["mode_finder"] = {{"epsilon", c.epsilon},           {"max_it", c.max_it},
                        {"n_init", c.n_init ? nlohmann::json(*c.n_init) : nlohmann::json("4k")},
                        {"merge_radius", c.merge_radius}, {"eig_tol", c.eig_tol},
                        {"min_weight", c.min_weight}};
  }
}

template <typename T>
BasicPolicy<T>::BasicPolicy(PolicyConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto d = static_cast<std::uint32_t>(cfg_.state_dim);
  const auto e = static_cast<std::uint32_t>(cfg_.embed_dim);
  idx_.in_w = store_.add("embed.in_w", {d, e});
  idx_.in_b = store_.add("embed.in_b", {e});
  idx_.pos = store_.add("embed.pos", {static_cast<std::uint32_t>(cfg_.tokens()), e});
  idx_.type = store_.add("embed.type", {2, e});
  idx_.mask_state = store_.add("embed.mask_state", {d});
  decoder_ = Decoder<T>(cfg_.decoder(), store_, "decoder");
  idx_.head_w = store_.add("head.w", {e, static_cast<std::uint32_t>(cfg_.head_width())});
  idx_.head_b = store_.add("head.b", {static_cast<std::uint32_t>(cfg_.head_width())});
}

template <typename T>
void BasicPolicy<T>::init(Rng& rng) {
  auto normal_init = [&](std::size_t i) {
    auto& v = store_[i].value;
    for (Eigen::Index n = 0; n < v.size(); ++n) v.data()[n] = static_cast<T>(0.02 * rng.normal());
  };
  normal_init(idx_.in_w);
  store_[idx_.in_b].value.setZero();
  normal_init(idx_.pos);
  normal_init(idx_.type);
  store_[idx_.mask_state].value.setZero();
  decoder_.init_weights(store_, rng);
  normal_init(idx_.head_w);

  const int k = cfg_.mixtures;
  const int m = cfg_.action_dim;
  const int td = cfg_.target_dim();
  const Eigen::MatrixXd corners = hypercube_corners(k, m);
  auto& bias = store_[idx_.head_b].value;
  bias.setZero();
  for (int i = 0; i < k; ++i) {
    for (int h = 0; h < cfg_.action_horizon; ++h) {
      for (int j = 0; j < m; ++j) bias(0, k + i * td + h * m + j) = static_cast<T>(corners(i, j));
    }
  }
  bias.rightCols(k * td).setConstant(static_cast<T>(kUnitStddevPreact));
}

template <typename T>
SequenceBatch<T> BasicPolicy<T>::embed(std::span<const Window* const> batch) const {
  const int hs = cfg_.state_history;
  const int hg = cfg_.goal_horizon;
  const int len = cfg_.tokens();
  const int d = cfg_.state_dim;
  const auto& mask_state = store_[idx_.mask_state].value;

  Mat<T> sources(static_cast<Eigen::Index>(batch.size()) * len, d);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Window& w = *batch[b];
    require(w.states.rows() == hs && w.states.cols() == d, "policy: state window must be state_history x state_dim");
    require(w.goals.rows() == hg && (hg == 0 || w.goals.cols() == d),
            "policy: goal window must be goal_horizon x state_dim");
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * len;
    for (int p = 0; p < hg; ++p) sources.row(r0 + p) = w.goals.row(p).template cast<T>();
    for (int q = 0; q < hs; ++q) {
      if (w.history_masked && q < hs - 1) {
        sources.row(r0 + hg + q) = mask_state.row(0);
      } else {
        sources.row(r0 + hg + q) = w.states.row(q).template cast<T>();
      }
    }
  }

  SequenceBatch<T> out;
  out.batch = static_cast<int>(batch.size());
  out.length = len;
  out.tokens = linear_forward<T>(sources, store_[idx_.in_w].value, store_[idx_.in_b].value);
  const auto& pos = store_[idx_.pos].value;
  const auto& type = store_[idx_.type].value;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * len;
    for (int p = 0; p < len; ++p) out.tokens.row(r0 + p) += pos.row(p) + type.row(p < hg ? 0 : 1);
  }
  return out;
}

template <typename T>
RawHeadOutputs BasicPolicy<T>::unpack(const Eigen::Ref<const Vec<T>>& row) const {
  const int k = cfg_.mixtures;
  const int td = cfg_.target_dim();
  RawHeadOutputs raw;
  raw.logits = row.head(k).template cast<double>();
  raw.means.resize(k, td);
  raw.stddev_preact.resize(k, td);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < td; ++j) {
      raw.means(i, j) = static_cast<double>(row[k + i * td + j]);
      raw.stddev_preact(i, j) = static_cast<double>(row[k + k * td + i * td + j]);
    }
  }
  return raw;
}

template <typename T>
Mat<T> BasicPolicy<T>::backbone_features(const Window& w) const {
  const Window* ptr = &w;
  const SequenceBatch<T> tokens = embed(std::span<const Window* const>(&ptr, 1));
  return decoder_.forward(store_, tokens, false, nullptr, nullptr);
}

template <typename T>
GmmParams BasicPolicy<T>::decode_head(const Mat<T>& features) const {
  const Mat<T> last = features.bottomRows(1);
  const Mat<T> out = linear_forward<T>(last, store_[idx_.head_w].value, store_[idx_.head_b].value);
  return to_gmm(unpack(out.row(0).transpose()));
}

template <typename T>
std::vector<RawHeadOutputs> BasicPolicy<T>::raw_outputs(const Eigen::MatrixXd& states,
                                                        const Eigen::MatrixXd& goals) const {
  Window w;
  w.states = states;
  w.goals = goals.size() == 0 ? Eigen::MatrixXd(0, cfg_.state_dim) : goals;
  const Mat<T> feats = backbone_features(w);
  const Mat<T> state_feats = feats.bottomRows(cfg_.state_history);
  const Mat<T> out = linear_forward<T>(state_feats, store_[idx_.head_w].value, store_[idx_.head_b].value);
  std::vector<RawHeadOutputs> raws;
  raws.reserve(static_cast<std::size_t>(cfg_.state_history));
  for (int q = 0; q < cfg_.state_history; ++q) raws.push_back(unpack(out.row(q).transpose()));
  return raws;
}

template <typename T>
std::vector<GmmParams> BasicPolicy<T>::forward(const Eigen::MatrixXd& states, const Eigen::MatrixXd& goals) const {
  std::vector<GmmParams> out;
  for (const auto& raw : raw_outputs(states, goals)) out.push_back(to_gmm(raw));
  return out;
}

template <typename T>
LossResult BasicPolicy<T>::nll_loss(std::span<const Window* const> batch, bool train_mode, Rng* rng,
                                    bool accumulate, double active_threshold) {
  require(!batch.empty(), "policy: empty batch");
  const int hs = cfg_.state_history;
  const int hg = cfg_.goal_horizon;
  const int len = cfg_.tokens();
  const int k = cfg_.mixtures;
  const int td = cfg_.target_dim();
  const auto nb = static_cast<Eigen::Index>(batch.size());

  const SequenceBatch<T> tokens = embed(batch);
  DecoderTape<T> tape;
  const Mat<T> feats = decoder_.forward(store_, tokens, train_mode, rng, accumulate ? &tape : nullptr);

  Mat<T> state_feats(nb * hs, cfg_.embed_dim);
  for (Eigen::Index b = 0; b < nb; ++b) state_feats.middleRows(b * hs, hs) = feats.middleRows(b * len + hg, hs);
  const Mat<T> out = linear_forward<T>(state_feats, store_[idx_.head_w].value, store_[idx_.head_b].value);

  struct PositionGrad {
    Eigen::Index row;
    RawHeadOutputs grads;
  };
  std::vector<PositionGrad> pos_grads;
  LossResult result;
  double total = 0.0;
  for (Eigen::Index b = 0; b < nb; ++b) {
    const Window& w = *batch[static_cast<std::size_t>(b)];
    require(w.targets.rows() == hs && w.targets.cols() == td, "policy: targets must be state_history x target_dim");
    require(static_cast<int>(w.valid.size()) == hs, "policy: valid mask must have state_history entries");
    for (int q = 0; q < hs; ++q) {
      if (!w.valid[static_cast<std::size_t>(q)]) continue;
      if (w.history_masked && q < hs - 1) continue;
      const Eigen::Index row = b * hs + q;
      const RawHeadOutputs raw = unpack(out.row(row).transpose());
      NllResult r = nll_param_grads(raw, w.targets.row(q).transpose());
      if (active_threshold > 0.0) result.active_sum += count_active_components(to_gmm(raw), active_threshold);
      total += r.nll;
      ++result.positions;
      if (accumulate) pos_grads.push_back({row, std::move(r.grads)});
    }
  }
  require(result.positions > 0, "policy: batch has no positions contributing to the loss");
  result.loss = total / result.positions;
  if (!accumulate) return result;

  const double inv = 1.0 / result.positions;
  Mat<T> dout = Mat<T>::Zero(out.rows(), out.cols());
  for (const auto& pg : pos_grads) {
    for (int i = 0; i < k; ++i) {
      dout(pg.row, i) = static_cast<T>(pg.grads.logits[i] * inv);
      for (int j = 0; j < td; ++j) {
        dout(pg.row, k + i * td + j) = static_cast<T>(pg.grads.means(i, j) * inv);
        dout(pg.row, k + k * td + i * td + j) = static_cast<T>(pg.grads.stddev_preact(i, j) * inv);
      }
    }
  }
  const Mat<T> dstate_feats = linear_backward<T>(state_feats, store_[idx_.head_w].value, dout,
                                                 store_[idx_.head_w].grad, store_[idx_.head_b].grad);
  Mat<T> dfeats = Mat<T>::Zero(feats.rows(), feats.cols());
  for (Eigen::Index b = 0; b < nb; ++b) dfeats.middleRows(b * len + hg, hs) = dstate_feats.middleRows(b * hs, hs);
  const Mat<T> dtokens = decoder_.backward(store_, tape, dfeats);

  // Embedding backward: recompute the projected sources.
  auto& in_w = store_[idx_.in_w];
  auto& mask = store_[idx_.mask_state];
  auto& pos = store_[idx_.pos];
  auto& type = store_[idx_.type];
  store_[idx_.in_b].grad.row(0) += dtokens.colwise().sum();
  for (Eigen::Index b = 0; b < nb; ++b) {
    const Window& w = *batch[static_cast<std::size_t>(b)];
    for (int p = 0; p < len; ++p) {
      const auto dtok = dtokens.row(b * len + p);
      pos.grad.row(p) += dtok;
      type.grad.row(p < hg ? 0 : 1) += dtok;
      const int q = p - hg;
      if (p < hg) {
        in_w.grad.noalias() += w.goals.row(p).transpose().template cast<T>() * dtok;
      } else if (w.history_masked && q < hs - 1) {
        in_w.grad.noalias() += mask.value.row(0).transpose() * dtok;
        mask.grad.row(0).noalias() += dtok * in_w.value.transpose();
      } else {
        in_w.grad.noalias() += w.states.row(q).transpose().template cast<T>() * dtok;
      }
    }
  }
  return result;
}

template <typename T>
ActResult BasicPolicy<T>::act(const Eigen::MatrixXd& states, const Eigen::MatrixXd& goals, const SamplerSpec& sampler,
                              Rng& rng) const {
  Window w;
  w.states = states;
  w.goals = goals.size() == 0 ? Eigen::MatrixXd(0, cfg_.state_dim) : goals;

  ActResult res;
  res.gmm = decode_head(backbone_features(w));

  Eigen::VectorXd x;
  switch (sampler.kind) {
    case SamplerKind::kVanilla:
      x = sample_vanilla(res.gmm, rng, 1).row(0).transpose();
      break;
    case SamplerKind::kScaled:
      x = sample_vanilla(scale_variances(res.gmm, sampler.alpha), rng, 1).row(0).transpose();
      break;
    case SamplerKind::kMode: {
      const ModeSet modes = find_modes(res.gmm, sampler.mode_config, rng);
      const ModeSample s = sample_mode(modes, rng, sampler.noise);
      x = s.x;
      res.modes_found = static_cast<int>(modes.size());
      res.degraded = modes.degraded;
      res.laplace_fallback = s.laplace_fallback;
      break;
    }
  }
  const int m = cfg_.action_dim;
  res.actions.resize(cfg_.action_horizon, m);
  for (int h = 0; h < cfg_.action_horizon; ++h) res.actions.row(h) = x.segment(h * m, m).transpose();
  return res;
}

template class BasicPolicy<float>;
template class BasicPolicy<double>;

}  // namespace qfat
