#pragma once

#include <Eigen/Dense>
#include <optional>
#include <variant>
#include <vector>

#include "qfat/gmm.hpp"
#include "qfat/rng.hpp"

namespace qfat {

struct ModeFinderConfig {
  double epsilon = 1e-6;        // fixed-point convergence tolerance
  int max_it = 200;
  std::optional<int> n_init;    // extra convex-hull seeds; defaults to 4k
  double merge_radius = 1e-3;
  double eig_tol = 1e-9;
  double min_weight = 1e-4;     // modes below this normalized weight are dropped
  int newton_polish = 8;        // max Newton refinement steps after mean-shift
  int threads = 1;

  int seeds_for(int k) const { return n_init.value_or(4 * k); }
  void validate() const;
};

struct ModeSet {
  std::vector<Eigen::VectorXd> modes;
  Eigen::VectorXd weights;
  std::vector<double> log_densities;
  std::vector<Eigen::MatrixXd> hessians_logp;
  /// No seed converged to a verified maximum; the set holds the
  /// highest-weight component mean as its only mode.
  bool degraded = false;

  std::size_t size() const { return modes.size(); }
};

struct MeanShiftStep {
  Eigen::VectorXd x;
  /// All responsibilities vanished; x is the nearest component mean.
  bool underflow = false;
};

/// One application of the diagonal-covariance fixed-point operator T(x).
MeanShiftStep mean_shift_step(const GmmParams& gmm, const Eigen::VectorXd& x);

/// The k component means followed by n_init Dirichlet(1,...,1) convex
/// combinations of them.
std::vector<Eigen::VectorXd> seed_points(const GmmParams& gmm, const ModeFinderConfig& cfg, Rng& rng);

/// Iterates T from one seed until the step falls below epsilon or max_it.
Eigen::VectorXd mean_shift(const GmmParams& gmm, Eigen::VectorXd x, const ModeFinderConfig& cfg);

ModeSet find_modes(const GmmParams& gmm, const ModeFinderConfig& cfg, Rng& rng);

/// Mode extraction from an explicit seed set (no random draws).
ModeSet find_modes_from_seeds(const GmmParams& gmm, const std::vector<Eigen::VectorXd>& seeds,
                              const ModeFinderConfig& cfg);

struct NoNoise {};
struct FixedNoise {
  double sigma = kSigmaFloor;
};
struct LaplaceNoise {
  double temperature = 1.0;
};
using ModeNoise = std::variant<NoNoise, FixedNoise, LaplaceNoise>;

struct ModeSample {
  Eigen::VectorXd x;
  int mode_index = 0;
  /// Laplace covariance was ill-conditioned; fixed(kSigmaFloor) noise was used.
  bool laplace_fallback = false;
};

ModeSample sample_mode(const ModeSet& modes, Rng& rng, const ModeNoise& noise);

}  // namespace qfat
