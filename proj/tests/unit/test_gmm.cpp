#include <gtest/gtest.h>

#include "qfat/error.hpp"
#include "qfat/gmm.hpp"
#include "support.hpp"

namespace qfat {
namespace {

using test::make_gmm;
using test::random_gmm;

// Independent oracle: log of a directly summed density in long double.
long double oracle_log_density(const GmmParams& g, const Eigen::VectorXd& x) {
  long double p = 0.0L;
  for (int i = 0; i < g.components(); ++i) {
    long double c = g.weights[i];
    for (int j = 0; j < g.dim(); ++j) {
      const long double s = g.stddevs(i, j);
      const long double z = (static_cast<long double>(x[j]) - g.means(i, j)) / s;
      c *= std::exp(-0.5L * z * z) / (s * std::sqrt(2.0L * std::numbers::pi_v<long double>));
    }
    p += c;
  }
  return std::log(p);
}

struct FdOracle {
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};

FdOracle fd_log_density(const GmmParams& g, const Eigen::VectorXd& x, long double h) {
  const Eigen::Index m = x.size();
  auto f = [&](Eigen::Index i, long double di, Eigen::Index j, long double dj) {
    Eigen::Matrix<long double, Eigen::Dynamic, 1> y = x.cast<long double>();
    y[i] += di;
    y[j] += dj;
    long double p = 0.0L;
    for (int c = 0; c < g.components(); ++c) {
      long double t = g.weights[c];
      for (int d = 0; d < g.dim(); ++d) {
        const long double s = g.stddevs(c, d);
        const long double z = (y[d] - g.means(c, d)) / s;
        t *= std::exp(-0.5L * z * z) / (s * std::sqrt(2.0L * std::numbers::pi_v<long double>));
      }
      p += t;
    }
    return std::log(p);
  };
  FdOracle o{Eigen::VectorXd(m), Eigen::MatrixXd(m, m)};
  for (Eigen::Index i = 0; i < m; ++i) {
    o.grad[i] = static_cast<double>((f(i, h, i, 0) - f(i, -h, i, 0)) / (2 * h));
    for (Eigen::Index j = 0; j < m; ++j) {
      o.hess(i, j) = static_cast<double>((f(i, h, j, h) - f(i, h, j, -h) - f(i, -h, j, h) + f(i, -h, j, -h)) / (4 * h * h));
    }
  }
  return o;
}

// Per-entry relative error, with entries far below the matrix scale compared
// against that scale instead of their own magnitude.
double scaled_rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-12);
  return test::max_rel_err(a, b, 1e-4 * scale);
}

TEST(GmmEvaluate, StandardNormalAtMean) {
  const GmmParams g = make_gmm({1.0}, {{0.0}}, {{1.0}});
  const GmmEval e = evaluate(g, Eigen::VectorXd::Zero(1));
  EXPECT_NEAR(e.log_density, -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(e.log_density, -0.91894, 1e-5);
  EXPECT_EQ(e.grad_p[0], 0.0);
  EXPECT_NEAR(e.hess_logp(0, 0), -1.0, 1e-15);
  EXPECT_FALSE(e.underflow);
}

TEST(GmmEvaluate, SymmetricPairAtOrigin) {
  for (double a : {0.3, 1.0, 2.5}) {
    const GmmParams g = make_gmm({0.5, 0.5}, {{-a}, {a}}, {{1.0}, {1.0}});
    const GmmEval e = evaluate(g, Eigen::VectorXd::Zero(1));
    const double phi = std::exp(-0.5 * a * a) / std::sqrt(2.0 * std::numbers::pi);
    EXPECT_NEAR(e.density, phi, 1e-15);
    EXPECT_NEAR(e.grad_p[0], 0.0, 1e-17);
  }
}

TEST(GmmEvaluate, MatchesFiniteDifferencesAcrossFamily) {
  Rng rng(20240611);
  int checked = 0;
  for (int m = 1; m <= 6; ++m) {
    for (int k = 1; k <= 8; ++k) {
      const GmmParams g = random_gmm(rng, k, m);
      const int c = static_cast<int>(rng.index(static_cast<std::size_t>(k)));
      Eigen::VectorXd x(m);
      for (int j = 0; j < m; ++j) x[j] = g.means(c, j) + g.stddevs(c, j) * rng.normal();
      const GmmEval e = evaluate(g, x);
      const FdOracle o = fd_log_density(g, x, 1e-5L);
      EXPECT_NEAR(e.log_density, static_cast<double>(oracle_log_density(g, x)), 1e-12) << "m=" << m << " k=" << k;
      EXPECT_LT(scaled_rel_err(e.grad_logp, o.grad), 1e-5) << "m=" << m << " k=" << k;
      EXPECT_LT(scaled_rel_err(e.hess_logp, o.hess), 1e-5) << "m=" << m << " k=" << k;
      EXPECT_LT((e.hess_p - e.hess_p.transpose()).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT((e.hess_logp - e.hess_logp.transpose()).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT((e.grad_logp * e.density - e.grad_p).norm(), 1e-12 * std::max(1.0, e.grad_p.norm()));
      ++checked;
    }
  }
  EXPECT_EQ(checked, 48);
}

TEST(GmmEvaluate, HessianIdentityAtCriticalPoints) {
  std::vector<std::pair<GmmParams, Eigen::VectorXd>> cases;
  cases.emplace_back(make_gmm({0.5, 0.5}, {{-1.3}, {1.3}}, {{1.0}, {1.0}}), Eigen::VectorXd::Zero(1));
  cases.emplace_back(make_gmm({1.0}, {{0.2, -0.4, 1.0}}, {{0.5, 1.0, 2.0}}), Eigen::Vector3d(0.2, -0.4, 1.0));
  cases.emplace_back(make_gmm({0.25, 0.25, 0.25, 0.25}, {{1, 1}, {-1, 1}, {1, -1}, {-1, -1}},
                              {{0.7, 0.7}, {0.7, 0.7}, {0.7, 0.7}, {0.7, 0.7}}),
                     Eigen::Vector2d::Zero());
  for (const auto& [g, x] : cases) {
    const GmmEval e = evaluate(g, x);
    ASSERT_LT(e.grad_p.norm(), 1e-10);
    EXPECT_LT((e.hess_logp - e.hess_p / e.density).norm(), 1e-8);
  }
}

TEST(GmmEvaluate, UnderflowIsFlaggedNotNan) {
  const GmmParams g = make_gmm({0.3, 0.7}, {{0.0, 0.0}, {1.0, 1.0}}, {{0.01, 0.01}, {0.02, 0.02}});
  const GmmEval e = evaluate(g, Eigen::Vector2d(50.0, -40.0));
  EXPECT_TRUE(e.underflow);
  EXPECT_EQ(e.density, 0.0);
  EXPECT_TRUE(std::isfinite(e.log_density));
  EXPECT_TRUE(e.grad_logp.allFinite());
  EXPECT_TRUE(e.hess_logp.allFinite());
  EXPECT_NEAR(e.log_density, log_density(g, Eigen::Vector2d(50.0, -40.0)), 1e-9);
}

TEST(GmmEvaluate, DensityIntegratesToOne1D) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const GmmParams g = random_gmm(rng, 1 + trial, 1);
    const double lo = (g.means.array() - 10.0 * g.stddevs.array()).minCoeff();
    const double hi = (g.means.array() + 10.0 * g.stddevs.array()).maxCoeff();
    const int n = 20000;
    const double h = (hi - lo) / n;
    double sum = 0.0;
    Eigen::VectorXd x(1);
    for (int i = 0; i <= n; ++i) {
      x[0] = lo + i * h;
      sum += (i == 0 || i == n ? 0.5 : 1.0) * std::exp(log_density(g, x));
    }
    EXPECT_NEAR(sum * h, 1.0, 1e-4);
  }
}

TEST(GmmEvaluate, DensityIntegratesToOne2D) {
  Rng rng(4);
  for (int trial = 0; trial < 2; ++trial) {
    const GmmParams g = random_gmm(rng, 3, 2, 0.4, 1.0, 1.5);
    const Eigen::Vector2d lo = (g.means.array() - 10.0 * g.stddevs.array()).colwise().minCoeff();
    const Eigen::Vector2d hi = (g.means.array() + 10.0 * g.stddevs.array()).colwise().maxCoeff();
    const int n = 600;
    const Eigen::Vector2d h = (hi - lo) / n;
    double sum = 0.0;
    Eigen::VectorXd x(2);
    for (int i = 0; i <= n; ++i) {
      for (int j = 0; j <= n; ++j) {
        x << lo.x() + i * h.x(), lo.y() + j * h.y();
        const double wi = (i == 0 || i == n) ? 0.5 : 1.0;
        const double wj = (j == 0 || j == n) ? 0.5 : 1.0;
        sum += wi * wj * std::exp(log_density(g, x));
      }
    }
    EXPECT_NEAR(sum * h.x() * h.y(), 1.0, 1e-4);
  }
}

TEST(GmmMoments, TwoComponentExample) {
  const GmmMoments mo = moments(make_gmm({0.5, 0.5}, {{0, 0}, {2, 0}}, {{1, 1}, {1, 1}}));
  EXPECT_TRUE(mo.mean.isApprox(Eigen::Vector2d(1.0, 0.0)));
  EXPECT_NEAR((mo.cov - Eigen::Vector2d(2.0, 1.0).asDiagonal().toDenseMatrix()).norm(), 0.0, 1e-15);
}

TEST(GmmMoments, SingleComponent) {
  const GmmParams g = make_gmm({1.0}, {{0.3, -2.0, 5.0}}, {{0.5, 2.0, 1e-3}});
  const GmmMoments mo = moments(g);
  EXPECT_EQ(mo.mean, g.means.row(0).transpose());
  EXPECT_NEAR((mo.cov - Eigen::MatrixXd(g.stddevs.row(0).array().square().matrix().asDiagonal())).norm(), 0.0, 1e-15);
}

TEST(GmmMoments, CovarianceIsPsd) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const GmmParams g = random_gmm(rng, 1 + t % 8, 1 + t % 6, 0.01, 2.0, 5.0);
    const GmmMoments mo = moments(g);
    EXPECT_LT((mo.cov - mo.cov.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(mo.cov).eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(GmmMoments, MatchesMonteCarlo) {
  Rng rng(6);
  const GmmParams g = random_gmm(rng, 3, 2);
  const GmmMoments mo = moments(g);
  const int n = 1000000;
  Rng sampler(7);
  const Eigen::MatrixXd s = sample_vanilla(g, sampler, n);
  const Eigen::RowVectorXd mean = s.colwise().mean();
  const Eigen::MatrixXd c = s.rowwise() - mean;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const Eigen::ArrayXd prod = c.col(i).array() * c.col(j).array();
      const double est = prod.mean();
      const double se = std::sqrt((prod - est).square().sum() / (n - 1.0) / n);
      EXPECT_LT(std::abs(est - mo.cov(i, j)), 3.0 * se) << "entry " << i << "," << j;
    }
  }
}

TEST(GmmSample, FlooredWidthStaysAtMean) {
  const GmmParams g = make_gmm({1.0}, {{0.4, -0.2}}, {{kSigmaFloor, kSigmaFloor}});
  Rng rng(8);
  const Eigen::MatrixXd s = sample_vanilla(g, rng, 10000);
  EXPECT_LT((s.rowwise() - g.means.row(0)).cwiseAbs().maxCoeff(), 6.0 * kSigmaFloor);
}

TEST(GmmSample, DegenerateWeights) {
  const GmmParams g = make_gmm({1.0, 0.0}, {{0.0}, {10.0}}, {{1.0}, {1.0}});
  Rng rng(9);
  std::vector<int> comp;
  sample_vanilla(g, rng, 5000, &comp);
  EXPECT_TRUE(std::all_of(comp.begin(), comp.end(), [](int c) { return c == 0; }));
}

TEST(GmmSample, ComponentFrequenciesAreBinomial) {
  const GmmParams g = make_gmm({0.5, 0.5}, {{-1.0}, {1.0}}, {{1.0}, {1.0}});
  Rng rng(10);
  std::vector<int> comp;
  const int n = 100000;
  sample_vanilla(g, rng, n, &comp);
  const double ones = static_cast<double>(std::count(comp.begin(), comp.end(), 1));
  EXPECT_LT(std::abs(ones - 0.5 * n), 3.0 * std::sqrt(n * 0.25));
}

TEST(GmmSample, DeterministicGivenSeed) {
  Rng a(11), b(11), r(12);
  const GmmParams g = random_gmm(r, 4, 3);
  EXPECT_EQ(sample_vanilla(g, a, 100), sample_vanilla(g, b, 100));
}

TEST(GmmScale, AlphaOneIsIdentity) {
  Rng rng(13);
  const GmmParams g = random_gmm(rng, 4, 3);
  const GmmParams s = scale_variances(g, 1.0);
  EXPECT_EQ(s.weights, g.weights);
  EXPECT_EQ(s.means, g.means);
  EXPECT_EQ(s.stddevs, g.stddevs);
}

TEST(GmmScale, MicroScaleFloorsStddev) {
  const GmmParams g = make_gmm({0.4, 0.6}, {{0, 1}, {1, 0}}, {{0.5, 1.0}, {0.05, 2.0}});
  const GmmParams s = scale_variances(g, 1e-6);
  EXPECT_NEAR(s.stddevs(0, 0), 0.5e-3, 1e-15);
  EXPECT_NEAR(s.stddevs(0, 1), 1e-3, 1e-15);
  EXPECT_EQ(s.stddevs(1, 0), kSigmaFloor);  // 5e-5 floored
  EXPECT_NEAR(s.stddevs(1, 1), 2e-3, 1e-15);
}

TEST(GmmScale, CovarianceFollowsClosedForm) {
  Rng rng(14);
  for (double alpha : {1.0, 0.5, 1e-2, 1e-6}) {
    const GmmParams g = random_gmm(rng, 3, 2);
    const GmmMoments mo = moments(scale_variances(g, alpha));
    const Eigen::VectorXd mean = g.means.transpose() * g.weights;
    Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(2, 2);
    for (int i = 0; i < 3; ++i) {
      const Eigen::VectorXd d = g.means.row(i).transpose() - mean;
      const Eigen::VectorXd var = (alpha * g.stddevs.row(i).array().square()).max(kSigmaFloor * kSigmaFloor);
      expected += g.weights[i] * (Eigen::MatrixXd(var.asDiagonal()) + d * d.transpose());
    }
    EXPECT_LT((mo.cov - expected).cwiseAbs().maxCoeff(), 1e-14) << "alpha " << alpha;
  }
}

TEST(GmmScale, ComposesAndPreservesWeightsAndMeans) {
  Rng rng(15);
  const GmmParams g = random_gmm(rng, 5, 4);
  const GmmParams ab = scale_variances(scale_variances(g, 0.3), 0.2);
  const GmmParams direct = scale_variances(g, 0.06);
  EXPECT_EQ(ab.weights, g.weights);
  EXPECT_EQ(ab.means, g.means);
  EXPECT_LT((ab.stddevs - direct.stddevs).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GmmScale, RejectsAlphaOutOfRange) {
  Rng rng(16);
  const GmmParams g = random_gmm(rng, 2, 2);
  EXPECT_THROW(scale_variances(g, 0.0), ValidationError);
  EXPECT_THROW(scale_variances(g, -1.0), ValidationError);
  EXPECT_THROW(scale_variances(g, 1.5), ValidationError);
}

RawHeadOutputs random_raw(Rng& rng, int k, int m) {
  RawHeadOutputs r;
  r.logits = Eigen::VectorXd::NullaryExpr(k, [&] { return rng.normal(); });
  r.means = Eigen::MatrixXd::NullaryExpr(k, m, [&] { return rng.normal(); });
  r.stddev_preact = Eigen::MatrixXd::NullaryExpr(k, m, [&] { return 0.5 * rng.normal(); });
  return r;
}

TEST(GmmNll, GaussianAtMean) {
  RawHeadOutputs r;
  r.logits = Eigen::VectorXd::Zero(1);
  r.means = Eigen::RowVector3d(0.1, -0.2, 0.3);
  r.stddev_preact = Eigen::RowVector3d::Constant(std::log(std::expm1(1.0 - kSigmaFloor)));
  const NllResult res = nll_param_grads(r, r.means.row(0).transpose());
  EXPECT_NEAR(res.nll, 1.5 * std::log(2.0 * std::numbers::pi), 1e-12);
}

TEST(GmmNll, IdenticalComponentsGiveZeroLogitGradient) {
  Rng rng(17);
  RawHeadOutputs r = random_raw(rng, 2, 3);
  r.means.row(1) = r.means.row(0);
  r.stddev_preact.row(1) = r.stddev_preact.row(0);
  const NllResult res = nll_param_grads(r, Eigen::Vector3d(0.3, -1.0, 2.0));
  EXPECT_NEAR(res.grads.logits.cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

TEST(GmmNll, MatchesFiniteDifferences) {
  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    const RawHeadOutputs r = random_raw(rng, 4, 2);
    const Eigen::Vector2d x(rng.normal(), rng.normal());
    const NllResult res = nll_param_grads(r, x);
    auto nll_at = [&](const RawHeadOutputs& q) { return -log_density(to_gmm(q), x); };
    const double h = 1e-6;
    for (int field = 0; field < 3; ++field) {
      RawHeadOutputs probe = r;
      Eigen::Map<Eigen::VectorXd> v = field == 0   ? Eigen::Map<Eigen::VectorXd>(probe.logits.data(), probe.logits.size())
                                      : field == 1 ? Eigen::Map<Eigen::VectorXd>(probe.means.data(), probe.means.size())
                                                   : Eigen::Map<Eigen::VectorXd>(probe.stddev_preact.data(),
                                                                                 probe.stddev_preact.size());
      const double* analytic = field == 0   ? res.grads.logits.data()
                               : field == 1 ? res.grads.means.data()
                                            : res.grads.stddev_preact.data();
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        const double saved = v[i];
        v[i] = saved + h;
        const double up = nll_at(probe);
        v[i] = saved - h;
        const double down = nll_at(probe);
        v[i] = saved;
        const double fd = (up - down) / (2.0 * h);
        EXPECT_LT(test::rel_err(analytic[i], fd, 1e-4), 1e-4) << "field " << field << " entry " << i;
      }
    }
  }
}

TEST(GmmNll, AgreesWithEvaluate) {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const RawHeadOutputs r = random_raw(rng, 1 + trial % 5, 1 + trial % 4);
    Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(r.dim(), [&] { return rng.normal(); });
    EXPECT_NEAR(nll_param_grads(r, x).nll, -evaluate(to_gmm(r), x).log_density, 1e-12);
  }
}

TEST(GmmHead, SoftmaxShiftInvariance) {
  Rng rng(20);
  RawHeadOutputs r = random_raw(rng, 5, 2);
  const GmmParams a = to_gmm(r);
  r.logits.array() += 37.5;
  const GmmParams b = to_gmm(r);
  EXPECT_LT((a.weights - b.weights).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(a.weights.sum(), 1.0, 1e-12);
  EXPECT_GE(a.stddevs.minCoeff(), kSigmaFloor);
}

TEST(GmmHead, StddevNeverBelowFloor) {
  RawHeadOutputs r;
  r.logits = Eigen::VectorXd::Zero(2);
  r.means = Eigen::MatrixXd::Zero(2, 2);
  r.stddev_preact = Eigen::MatrixXd::Constant(2, 2, -800.0);
  const GmmParams g = to_gmm(r);
  EXPECT_EQ(g.stddevs.minCoeff(), kSigmaFloor);
  EXPECT_NO_THROW(g.validate());
}

TEST(GmmActive, Examples) {
  EXPECT_EQ(count_active_components(make_gmm({1, 0, 0, 0}, {{0}, {1}, {2}, {3}}, {{1}, {1}, {1}, {1}}), 0.1), 1);
  EXPECT_EQ(count_active_components(make_gmm({0.25, 0.25, 0.25, 0.25}, {{0}, {1}, {2}, {3}}, {{1}, {1}, {1}, {1}}), 0.1),
            4);
  EXPECT_EQ(count_active_components(make_gmm({0.05, 0.95}, {{0}, {1}}, {{1}, {1}}), 0.1), 1);
  const GmmParams g = make_gmm({0.5, 0.5}, {{0}, {1}}, {{1}, {1}});
  EXPECT_THROW(count_active_components(g, 0.0), ValidationError);
  EXPECT_THROW(count_active_components(g, 1.0), ValidationError);
}

TEST(GmmValidate, RejectsBrokenParameters) {
  EXPECT_THROW(make_gmm({0.6, 0.6}, {{0}, {1}}, {{1}, {1}}).validate(), ValidationError);
  EXPECT_THROW(make_gmm({1.2, -0.2}, {{0}, {1}}, {{1}, {1}}).validate(), ValidationError);
  EXPECT_THROW(make_gmm({0.5, 0.5}, {{0}, {1}}, {{1}, {1e-6}}).validate(), ValidationError);
  GmmParams empty;
  EXPECT_THROW(empty.validate(), ValidationError);
  EXPECT_NO_THROW(make_gmm({0.5, 0.5}, {{0}, {1}}, {{1}, {kSigmaFloor}}).validate());
}

}  // namespace
}  // namespace qfat
