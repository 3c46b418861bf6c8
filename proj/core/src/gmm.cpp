#include "qfat/gmm.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "qfat/error.hpp"

namespace qfat {
namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)

double log_sum_exp(const Eigen::VectorXd& v) {
  const double hi = v.maxCoeff();
  if (!std::isfinite(hi)) return hi;
  return hi + std::log((v.array() - hi).exp().sum());
}

}  // namespace

void GmmParams::validate() const {
  const auto k = weights.size();
  require(k >= 1, "gmm: need at least one component");
  require(means.rows() == k && stddevs.rows() == k,
          "gmm: weights, means and stddevs disagree on the component count");
  require(means.cols() >= 1 && stddevs.cols() == means.cols(),
          "gmm: means and stddevs disagree on the dimension");
  require(weights.allFinite() && means.allFinite() && stddevs.allFinite(),
          "gmm: parameters must be finite");
  require((weights.array() >= 0.0).all(), "gmm: weights must be non-negative");
  require(std::abs(weights.sum() - 1.0) <= 1e-12,
          "gmm: weights must sum to 1 (got " + std::to_string(weights.sum()) + ")");
  require((stddevs.array() >= kSigmaFloor).all(),
          "gmm: every stddev must be >= the sigma floor");
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

GmmParams to_gmm(const RawHeadOutputs& raw) {
  GmmParams g;
  const double lse = log_sum_exp(raw.logits);
  g.weights = (raw.logits.array() - lse).exp().matrix();
  g.weights /= g.weights.sum();
  g.means = raw.means;
  g.stddevs = raw.stddev_preact.unaryExpr([](double v) { return softplus(v) + kSigmaFloor; });
  return g;
}

Eigen::VectorXd component_log_terms(const GmmParams& gmm, const Eigen::VectorXd& x) {
  const int k = gmm.components();
  const int m = gmm.dim();
  Eigen::VectorXd terms(k);
  for (int i = 0; i < k; ++i) {
    double acc = std::log(gmm.weights[i]) - m * kHalfLog2Pi;
    for (int j = 0; j < m; ++j) {
      const double z = (x[j] - gmm.means(i, j)) / gmm.stddevs(i, j);
      acc -= std::log(gmm.stddevs(i, j)) + 0.5 * z * z;
    }
    terms[i] = acc;
  }
  return terms;
}

double log_density(const GmmParams& gmm, const Eigen::VectorXd& x) {
  return log_sum_exp(component_log_terms(gmm, x));
}

GmmEval evaluate(const GmmParams& gmm, const Eigen::VectorXd& x) {
  require(x.size() == gmm.dim(), "evaluate: point dimension does not match the mixture");
  require(x.allFinite(), "evaluate: point must be finite");
  const int k = gmm.components();
  const int m = gmm.dim();

  const Eigen::VectorXd terms = component_log_terms(gmm, x);
  GmmEval out;
  out.log_density = log_sum_exp(terms);
  const Eigen::VectorXd resp = (terms.array() - out.log_density).exp().matrix();

  out.grad_logp = Eigen::VectorXd::Zero(m);
  out.hess_p_over_p = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd d(m);
  for (int i = 0; i < k; ++i) {
    if (resp[i] == 0.0) continue;
    for (int j = 0; j < m; ++j) {
      const double var = gmm.stddevs(i, j) * gmm.stddevs(i, j);
      d[j] = (gmm.means(i, j) - x[j]) / var;
      out.hess_p_over_p(j, j) -= resp[i] / var;
    }
    out.grad_logp.noalias() += resp[i] * d;
    out.hess_p_over_p.noalias() += resp[i] * d * d.transpose();
  }
  out.hess_logp = out.hess_p_over_p - out.grad_logp * out.grad_logp.transpose();

  out.density = std::exp(out.log_density);
  out.underflow = out.density == 0.0;
  out.grad_p = out.density * out.grad_logp;
  out.hess_p = out.density * out.hess_p_over_p;
  return out;
}

GmmMoments moments(const GmmParams& gmm) {
  gmm.validate();
  const int m = gmm.dim();
  GmmMoments out;
  out.mean = gmm.means.transpose() * gmm.weights;
  out.cov = Eigen::MatrixXd::Zero(m, m);
  for (int i = 0; i < gmm.components(); ++i) {
    const Eigen::VectorXd diff = gmm.means.row(i).transpose() - out.mean;
    Eigen::MatrixXd term = diff * diff.transpose();
    term.diagonal() += gmm.stddevs.row(i).array().square().matrix().transpose();
    out.cov += gmm.weights[i] * term;
  }
  return out;
}

Eigen::MatrixXd sample_vanilla(const GmmParams& gmm, Rng& rng, int n, std::vector<int>* components) {
  require(n >= 1, "sample_vanilla: n must be >= 1");
  const int m = gmm.dim();
  const std::span<const double> w(gmm.weights.data(), static_cast<std::size_t>(gmm.weights.size()));
  Eigen::MatrixXd out(n, m);
  if (components) components->resize(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    const auto c = static_cast<int>(rng.categorical(w));
    if (components) (*components)[static_cast<std::size_t>(s)] = c;
    for (int j = 0; j < m; ++j) out(s, j) = gmm.means(c, j) + gmm.stddevs(c, j) * rng.normal();
  }
  return out;
}

GmmParams scale_variances(const GmmParams& gmm, double alpha) {
  require(alpha > 0.0 && alpha <= 1.0, "scale_variances: alpha must lie in (0, 1]");
  GmmParams out = gmm;
  const double s = std::sqrt(alpha);
  out.stddevs = (gmm.stddevs * s).cwiseMax(kSigmaFloor);
  return out;
}

NllResult nll_param_grads(const RawHeadOutputs& raw, const Eigen::VectorXd& x) {
  const int k = raw.components();
  const int m = raw.dim();
  require(k >= 1 && raw.means.rows() == k && raw.stddev_preact.rows() == k &&
              raw.stddev_preact.cols() == m,
          "nll_param_grads: inconsistent head output shapes");
  require(x.size() == m, "nll_param_grads: target dimension does not match the head");

  const double logit_lse = log_sum_exp(raw.logits);
  Eigen::VectorXd log_terms(k);
  Eigen::MatrixXd sigma(k, m), z(k, m);
  for (int i = 0; i < k; ++i) {
    double acc = raw.logits[i] - logit_lse - m * kHalfLog2Pi;
    for (int j = 0; j < m; ++j) {
      sigma(i, j) = softplus(raw.stddev_preact(i, j)) + kSigmaFloor;
      z(i, j) = (x[j] - raw.means(i, j)) / sigma(i, j);
      acc -= std::log(sigma(i, j)) + 0.5 * z(i, j) * z(i, j);
    }
    log_terms[i] = acc;
  }
  const double lse = log_sum_exp(log_terms);

  NllResult out;
  out.nll = -lse;
  out.grads.logits.resize(k);
  out.grads.means.resize(k, m);
  out.grads.stddev_preact.resize(k, m);
  for (int i = 0; i < k; ++i) {
    const double r = std::exp(log_terms[i] - lse);
    const double pi = std::exp(raw.logits[i] - logit_lse);
    out.grads.logits[i] = pi - r;
    for (int j = 0; j < m; ++j) {
      const double s = sigma(i, j);
      out.grads.means(i, j) = -r * z(i, j) / s;
      out.grads.stddev_preact(i, j) =
          -r * (z(i, j) * z(i, j) - 1.0) / s * sigmoid(raw.stddev_preact(i, j));
    }
  }
  return out;
}

int count_active_components(const GmmParams& gmm, double threshold) {
  require(threshold > 0.0 && threshold < 1.0, "count_active_components: threshold must lie in (0, 1)");
  return static_cast<int>((gmm.weights.array() >= threshold).count());
}

}  // namespace qfat
