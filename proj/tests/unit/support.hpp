#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "qfat/gmm.hpp"
#include "qfat/rng.hpp"

namespace qfat::test {

inline GmmParams random_gmm(Rng& rng, int k, int m, double sd_lo = 0.3, double sd_hi = 1.5, double spread = 2.0) {
  GmmParams g;
  g.weights.resize(k);
  for (int i = 0; i < k; ++i) g.weights[i] = 0.2 + rng.uniform();
  g.weights /= g.weights.sum();
  g.means = Eigen::MatrixXd::NullaryExpr(k, m, [&] { return spread * (2.0 * rng.uniform() - 1.0); });
  g.stddevs = Eigen::MatrixXd::NullaryExpr(k, m, [&] { return sd_lo + (sd_hi - sd_lo) * rng.uniform(); });
  return g;
}

inline GmmParams make_gmm(std::vector<double> w, std::vector<std::vector<double>> mu, std::vector<std::vector<double>> sd) {
  GmmParams g;
  const auto k = static_cast<Eigen::Index>(w.size());
  const auto m = static_cast<Eigen::Index>(mu.front().size());
  g.weights = Eigen::Map<Eigen::VectorXd>(w.data(), k);
  g.means.resize(k, m);
  g.stddevs.resize(k, m);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      g.means(i, j) = mu[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      g.stddevs(i, j) = sd[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  }
  return g;
}

/// Equal-weight, unit-variance pair at +-sep/2 in one dimension.
inline GmmParams pair_1d(double sep) { return make_gmm({0.5, 0.5}, {{-sep / 2}, {sep / 2}}, {{1.0}, {1.0}}); }

/// Independent density: direct sum of Gaussian pdfs, no log-space tricks.
inline double direct_density(const GmmParams& g, const Eigen::VectorXd& x) {
  double p = 0.0;
  for (int i = 0; i < g.components(); ++i) {
    double c = g.weights[i];
    for (int j = 0; j < g.dim(); ++j) {
      const double s = g.stddevs(i, j);
      const double z = (x[j] - g.means(i, j)) / s;
      c *= std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * std::numbers::pi));
    }
    p += c;
  }
  return p;
}

inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                   double h) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline Eigen::MatrixXd fd_hessian(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                  double h) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd H(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      auto at = [&](double di, double dj) {
        Eigen::VectorXd y = x;
        y[i] += di;
        y[j] += dj;
        return f(y);
      };
      H(i, j) = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
    }
  }
  return H;
}

/// Relative error with an absolute floor so near-zero entries are compared sensibly.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a.data()[i], b.data()[i], floor));
  return worst;
}

/// Local maxima of a 1-D density by brute-force grid search.
inline std::vector<double> grid_modes_1d(const GmmParams& g, double spacing) {
  const double lo = g.means.minCoeff() - 6.0 * g.stddevs.maxCoeff();
  const double hi = g.means.maxCoeff() + 6.0 * g.stddevs.maxCoeff();
  const auto n = static_cast<long>((hi - lo) / spacing) + 1;
  std::vector<double> p(static_cast<std::size_t>(n));
  Eigen::VectorXd x(1);
  for (long i = 0; i < n; ++i) {
    x[0] = lo + static_cast<double>(i) * spacing;
    p[static_cast<std::size_t>(i)] = direct_density(g, x);
  }
  std::vector<double> modes;
  for (long i = 1; i + 1 < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (p[u] > p[u - 1] && p[u] >= p[u + 1]) modes.push_back(lo + static_cast<double>(i) * spacing);
  }
  return modes;
}

/// Local maxima of a 2-D density: a grid pass at `spacing` over [lo, hi]^2,
/// then each candidate refined on a finer local grid.
inline std::vector<Eigen::Vector2d> grid_modes_2d(const GmmParams& g, double lo, double hi, double spacing) {
  auto scan = [&](double x0, double y0, double span, double h) {
    const auto n = static_cast<long>(span / h) + 1;
    std::vector<double> p(static_cast<std::size_t>(n * n));
    Eigen::VectorXd x(2);
    for (long i = 0; i < n; ++i) {
      for (long j = 0; j < n; ++j) {
        x << x0 + static_cast<double>(i) * h, y0 + static_cast<double>(j) * h;
        p[static_cast<std::size_t>(i * n + j)] = direct_density(g, x);
      }
    }
    std::vector<Eigen::Vector2d> found;
    for (long i = 1; i + 1 < n; ++i) {
      for (long j = 1; j + 1 < n; ++j) {
        const double c = p[static_cast<std::size_t>(i * n + j)];
        bool peak = true;
        for (long di = -1; di <= 1 && peak; ++di) {
          for (long dj = -1; dj <= 1 && peak; ++dj) {
            if (di == 0 && dj == 0) continue;
            const double q = p[static_cast<std::size_t>((i + di) * n + (j + dj))];
            peak = (di < 0 || (di == 0 && dj < 0)) ? c > q : c >= q;
          }
        }
        if (peak) found.emplace_back(x0 + static_cast<double>(i) * h, y0 + static_cast<double>(j) * h);
      }
    }
    return found;
  };
  std::vector<Eigen::Vector2d> refined;
  for (const auto& c : scan(lo, lo, hi - lo, spacing)) {
    const double half = 3.0 * spacing;
    const auto fine = scan(c.x() - half, c.y() - half, 2.0 * half, spacing / 100.0);
    if (!fine.empty()) refined.push_back(fine.front());
  }
  return refined;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("qfat_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace qfat::test
