#pragma once

#include <Eigen/Dense>
#include <vector>

#include "qfat/rng.hpp"

namespace qfat {

/// Lower bound on every component standard deviation, in normalized action
/// units. Applied after every stddev computation.
inline constexpr double kSigmaFloor = 1e-4;

/// Diagonal-covariance Gaussian mixture: one conditional action distribution.
///
/// Row i of `means` and `stddevs` describes component i. Stddevs are standard
/// deviations, not variances.
struct GmmParams {
  Eigen::VectorXd weights;  // k
  Eigen::MatrixXd means;    // k x m
  Eigen::MatrixXd stddevs;  // k x m

  int components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }

  /// Throws ValidationError unless the simplex, shape and floor invariants hold.
  void validate() const;
};

/// Density of a GMM and its first two derivatives at one point.
struct GmmEval {
  double density = 0.0;
  double log_density = 0.0;
  Eigen::VectorXd grad_p;
  Eigen::MatrixXd hess_p;
  Eigen::VectorXd grad_logp;
  Eigen::MatrixXd hess_logp;
  /// hess_p / p, finite even where p underflows. Same eigenvalue signs as hess_p.
  Eigen::MatrixXd hess_p_over_p;
  /// p(x) underflowed to zero; the log-space fields are still valid while the
  /// linear-space fields are exactly zero.
  bool underflow = false;
};

struct GmmMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Unnormalized head outputs for one position: mixture logits, component
/// means, and stddev pre-activations (stddev = softplus(pre) + kSigmaFloor).
struct RawHeadOutputs {
  Eigen::VectorXd logits;        // k
  Eigen::MatrixXd means;         // k x m
  Eigen::MatrixXd stddev_preact; // k x m

  int components() const { return static_cast<int>(logits.size()); }
  int dim() const { return static_cast<int>(means.cols()); }
};

struct NllResult {
  double nll = 0.0;
  RawHeadOutputs grads;
};

double softplus(double x);
double sigmoid(double x);

/// Softmax weights and floored softplus stddevs.
GmmParams to_gmm(const RawHeadOutputs& raw);

/// Per-component log(pi_i N_i(x)), the shared building block of everything below.
Eigen::VectorXd component_log_terms(const GmmParams& gmm, const Eigen::VectorXd& x);

double log_density(const GmmParams& gmm, const Eigen::VectorXd& x);

GmmEval evaluate(const GmmParams& gmm, const Eigen::VectorXd& x);

GmmMoments moments(const GmmParams& gmm);

/// n samples (rows) drawn component-first. If `components` is non-null it
/// receives the drawn component index per sample.
Eigen::MatrixXd sample_vanilla(const GmmParams& gmm, Rng& rng, int n,
                               std::vector<int>* components = nullptr);

/// Replaces every variance sigma^2 by alpha * sigma^2, flooring at kSigmaFloor.
GmmParams scale_variances(const GmmParams& gmm, double alpha);

/// Negative log-likelihood of x and its gradient with respect to the raw head
/// outputs, computed through log-sum-exp responsibilities.
NllResult nll_param_grads(const RawHeadOutputs& raw, const Eigen::VectorXd& x);

/// Number of mixture weights >= threshold.
int count_active_components(const GmmParams& gmm, double threshold);

}  // namespace qfat
