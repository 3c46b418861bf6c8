#include "qfat/modes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "qfat/error.hpp"
#include "qfat/parallel.hpp"

namespace qfat {
namespace {

struct Candidate {
  Eigen::VectorXd x;
  GmmEval eval;
  double log_det_neg_hess = 0.0;
  bool accepted = false;
};

bool lexicographic_less(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    if (a[j] != b[j]) return a[j] < b[j];
  }
  return false;
}

// Newton steps on log p from a mean-shift fixed point. Mean-shift converges
// linearly; a few Newton steps drive the gradient to round-off.
Eigen::VectorXd polish(const GmmParams& gmm, Eigen::VectorXd x, const ModeFinderConfig& cfg) {
  for (int it = 0; it < cfg.newton_polish; ++it) {
    const GmmEval ev = evaluate(gmm, x);
    if (ev.grad_logp.norm() == 0.0) break;
    Eigen::LLT<Eigen::MatrixXd> llt(-ev.hess_logp);
    if (llt.info() != Eigen::Success) break;
    const Eigen::VectorXd step = llt.solve(ev.grad_logp);
    if (!step.allFinite() || step.norm() > cfg.merge_radius) break;
    const Eigen::VectorXd next = x + step;
    if (log_density(gmm, next) < ev.log_density - 1e-12) break;
    if (next == x) break;
    x = next;
  }
  return x;
}

Candidate examine(const GmmParams& gmm, const Eigen::VectorXd& seed, const ModeFinderConfig& cfg) {
  Candidate c;
  c.x = polish(gmm, mean_shift(gmm, seed, cfg), cfg);
  c.eval = evaluate(gmm, c.x);
  if (!c.x.allFinite() || !std::isfinite(c.eval.log_density)) return c;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c.eval.hess_p_over_p, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().maxCoeff() >= -cfg.eig_tol) return c;

  Eigen::LLT<Eigen::MatrixXd> llt(-c.eval.hess_logp);
  if (llt.info() != Eigen::Success) return c;
  c.log_det_neg_hess = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  c.accepted = std::isfinite(c.log_det_neg_hess);
  return c;
}

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t i) {
  while (parent[i] != i) {
    parent[i] = parent[parent[i]];
    i = parent[i];
  }
  return i;
}

}  // namespace

void ModeFinderConfig::validate() const {
  require(epsilon > 0.0, "mode finder: epsilon must be positive");
  require(max_it >= 1, "mode finder: max_it must be >= 1");
  require(!n_init || *n_init >= 0, "mode finder: n_init must be non-negative");
  require(merge_radius > 0.0, "mode finder: merge_radius must be positive");
  require(eig_tol > 0.0, "mode finder: eig_tol must be positive");
  require(min_weight >= 0.0 && min_weight < 1.0, "mode finder: min_weight must lie in [0, 1)");
  require(newton_polish >= 0, "mode finder: newton_polish must be non-negative");
}

MeanShiftStep mean_shift_step(const GmmParams& gmm, const Eigen::VectorXd& x) {
  const int k = gmm.components();
  const int m = gmm.dim();
  const Eigen::VectorXd terms = component_log_terms(gmm, x);
  const double hi = terms.maxCoeff();

  MeanShiftStep out;
  if (!std::isfinite(hi)) {
    Eigen::Index nearest = 0;
    (gmm.means.rowwise() - x.transpose()).rowwise().squaredNorm().minCoeff(&nearest);
    out.x = gmm.means.row(nearest).transpose();
    out.underflow = true;
    return out;
  }
  // Responsibilities up to a common factor, which cancels in T(x).
  const Eigen::VectorXd resp = (terms.array() - hi).exp().matrix();

  out.x.resize(m);
  Eigen::VectorXd coef(k);
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < k; ++i) {
      coef[i] = resp[i] / (gmm.stddevs(i, j) * gmm.stddevs(i, j));
    }
    coef /= coef.sum();
    double acc = 0.0;
    for (int i = 0; i < k; ++i) acc += coef[i] * gmm.means(i, j);
    out.x[j] = acc;
  }
  return out;
}

Eigen::VectorXd mean_shift(const GmmParams& gmm, Eigen::VectorXd x, const ModeFinderConfig& cfg) {
  for (int it = 0; it < cfg.max_it; ++it) {
    MeanShiftStep step = mean_shift_step(gmm, x);
    const double moved = (step.x - x).norm();
    x = std::move(step.x);
    if (moved < cfg.epsilon) break;
  }
  return x;
}

std::vector<Eigen::VectorXd> seed_points(const GmmParams& gmm, const ModeFinderConfig& cfg, Rng& rng) {
  const int k = gmm.components();
  const int extra = cfg.seeds_for(k);
  std::vector<Eigen::VectorXd> seeds;
  seeds.reserve(static_cast<std::size_t>(k + extra));
  for (int i = 0; i < k; ++i) seeds.emplace_back(gmm.means.row(i).transpose());

  Eigen::VectorXd bary(k);
  for (int s = 0; s < extra; ++s) {
    for (int i = 0; i < k; ++i) bary[i] = -std::log(1.0 - rng.uniform());
    bary /= bary.sum();
    seeds.emplace_back(gmm.means.transpose() * bary);
  }
  return seeds;
}

ModeSet find_modes_from_seeds(const GmmParams& gmm, const std::vector<Eigen::VectorXd>& seeds,
                              const ModeFinderConfig& cfg) {
  gmm.validate();
  cfg.validate();

  std::vector<Candidate> cands(seeds.size());
  parallel_for(seeds.size(), cfg.threads,
               [&](std::size_t i) { cands[i] = examine(gmm, seeds[i], cfg); });

  std::erase_if(cands, [](const Candidate& c) { return !c.accepted; });
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return lexicographic_less(a.x, b.x); });

  // Single-linkage clustering at merge_radius; each cluster keeps its densest member.
  std::vector<std::size_t> parent(cands.size());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  for (std::size_t a = 0; a < cands.size(); ++a) {
    for (std::size_t b = a + 1; b < cands.size(); ++b) {
      if ((cands[a].x - cands[b].x).norm() <= cfg.merge_radius) {
        parent[find_root(parent, b)] = find_root(parent, a);
      }
    }
  }
  std::vector<std::size_t> best(cands.size(), cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const std::size_t r = find_root(parent, i);
    if (best[r] == cands.size() || cands[i].eval.log_density > cands[best[r]].eval.log_density) {
      best[r] = i;
    }
  }
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < cands.size(); ++r) {
    if (best[r] != cands.size()) keep.push_back(best[r]);
  }
  std::sort(keep.begin(), keep.end());

  ModeSet out;
  if (!keep.empty()) {
    // Laplace weights w_j = p(m_j) |-H_j|^{-1/2}, normalized in log space.
    Eigen::VectorXd log_w(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j) {
      const Candidate& c = cands[keep[j]];
      log_w[static_cast<Eigen::Index>(j)] = c.eval.log_density - 0.5 * c.log_det_neg_hess;
    }
    Eigen::VectorXd w = (log_w.array() - log_w.maxCoeff()).exp().matrix();
    w /= w.sum();

    std::vector<std::size_t> survivors;
    for (std::size_t j = 0; j < keep.size(); ++j) {
      if (w[static_cast<Eigen::Index>(j)] >= cfg.min_weight) survivors.push_back(j);
    }
    out.weights.resize(static_cast<Eigen::Index>(survivors.size()));
    for (std::size_t s = 0; s < survivors.size(); ++s) {
      const Candidate& c = cands[keep[survivors[s]]];
      out.modes.push_back(c.x);
      out.log_densities.push_back(c.eval.log_density);
      out.hessians_logp.push_back(c.eval.hess_logp);
      out.weights[static_cast<Eigen::Index>(s)] = w[static_cast<Eigen::Index>(survivors[s])];
    }
    out.weights /= out.weights.sum();
  }

  if (out.modes.empty()) {
    Eigen::Index top = 0;
    gmm.weights.maxCoeff(&top);
    const Eigen::VectorXd mean = gmm.means.row(top).transpose();
    const GmmEval ev = evaluate(gmm, mean);
    out.modes = {mean};
    out.weights = Eigen::VectorXd::Ones(1);
    out.log_densities = {ev.log_density};
    out.hessians_logp = {ev.hess_logp};
    out.degraded = true;
  }
  return out;
}

ModeSet find_modes(const GmmParams& gmm, const ModeFinderConfig& cfg, Rng& rng) {
  cfg.validate();
  return find_modes_from_seeds(gmm, seed_points(gmm, cfg, rng), cfg);
}

ModeSample sample_mode(const ModeSet& modes, Rng& rng, const ModeNoise& noise) {
  require(!modes.modes.empty(), "sample_mode: empty mode set");
  require(static_cast<std::size_t>(modes.weights.size()) == modes.modes.size(),
          "sample_mode: weights do not match modes");
  const std::span<const double> w(modes.weights.data(), static_cast<std::size_t>(modes.weights.size()));

  ModeSample out;
  out.mode_index = static_cast<int>(rng.categorical(w));
  const auto j = static_cast<std::size_t>(out.mode_index);
  out.x = modes.modes[j];
  const auto m = out.x.size();

  auto add_isotropic = [&](double sigma) {
    for (Eigen::Index d = 0; d < m; ++d) out.x[d] += sigma * rng.normal();
  };

  if (const auto* fixed = std::get_if<FixedNoise>(&noise)) {
    require(fixed->sigma >= 0.0, "sample_mode: fixed noise sigma must be non-negative");
    add_isotropic(fixed->sigma);
  } else if (const auto* lap = std::get_if<LaplaceNoise>(&noise)) {
    require(lap->temperature > 0.0, "sample_mode: laplace temperature must be positive");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(-modes.hessians_logp[j]);
    const Eigen::VectorXd& lam = eig.eigenvalues();
    const double lo = lam.minCoeff();
    if (eig.info() != Eigen::Success || lo <= 0.0 || lam.maxCoeff() / lo > 1e12) {
      out.laplace_fallback = true;
      add_isotropic(kSigmaFloor);
    } else {
      Eigen::VectorXd z(m);
      for (Eigen::Index d = 0; d < m; ++d) z[d] = rng.normal() * std::sqrt(lap->temperature / lam[d]);
      out.x += eig.eigenvectors() * z;
    }
  }
  return out;
}

}  // namespace qfat
