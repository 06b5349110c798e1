#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "prefscope/error.hpp"
#include "prefscope/rng.hpp"

namespace prefscope {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline double sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

struct Standardized {
  VectorXd values;
  double mean = 0.0;
  double sd = 0.0;
};

// Mean 0 / sd 1 transform using the population (1/N) standard deviation.
inline Standardized standardize(const VectorXd& column) {
  const auto n = column.size();
  if (n == 0) fail(ErrorKind::degenerate, "standardize: empty column");
  double mean = column.mean();
  double var = (column.array() - mean).square().sum() / static_cast<double>(n);
  double sd = std::sqrt(var);
  if (!(sd > 0.0)) {
    fail(ErrorKind::degenerate, "standardize: column has zero variance");
  }
  Standardized out;
  out.values = (column.array() - mean) / sd;
  out.mean = mean;
  out.sd = sd;
  return out;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double normal_two_sided_p(double z) {
  return std::erfc(std::abs(z) / std::sqrt(2.0));
}

inline double chi_squared_sf(double x, double df) {
  if (x <= 0) return 1.0;
  boost::math::chi_squared dist(df);
  return boost::math::cdf(boost::math::complement(dist, x));
}

// Two-sided p-value for H0: corr = 0 via the t transform with n-2 df.
inline double pearson_p_value(double r, long n) {
  if (n < 3) fail(ErrorKind::insufficient_data, "correlation p-value needs n >= 3");
  double r2 = std::min(r * r, 1.0);
  if (1.0 - r2 <= 0.0) return 0.0;
  double t = std::abs(r) * std::sqrt((static_cast<double>(n) - 2.0) / (1.0 - r2));
  boost::math::students_t dist(static_cast<double>(n - 2));
  return 2.0 * boost::math::cdf(boost::math::complement(dist, t));
}

inline double pearson_corr(const VectorXd& x, const VectorXd& y) {
  if (x.size() != y.size() || x.size() < 2) {
    fail(ErrorKind::insufficient_data, "pearson_corr: need matched n >= 2");
  }
  double mx = x.mean(), my = y.mean();
  VectorXd dx = x.array() - mx;
  VectorXd dy = y.array() - my;
  double sx = dx.norm(), sy = dy.norm();
  if (sx == 0.0 || sy == 0.0) {
    fail(ErrorKind::degenerate, "pearson_corr: zero variance input");
  }
  return dx.dot(dy) / (sx * sy);
}

// Type-7 (linear interpolation) quantile of an unsorted sample.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorKind::insufficient_data, "quantile of empty sample");
  std::sort(values.begin(), values.end());
  if (q <= 0) return values.front();
  if (q >= 1) return values.back();
  double pos = q * static_cast<double>(values.size() - 1);
  size_t lo = static_cast<size_t>(std::floor(pos));
  double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

// Rank-based AUC with midranks for tied scores.
inline double auc_score(const VectorXd& scores, const VectorXd& labels) {
  const auto n = scores.size();
  if (labels.size() != n || n == 0) {
    fail(ErrorKind::insufficient_data, "auc_score: empty or mismatched inputs");
  }
  std::vector<size_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scores[static_cast<long>(a)] < scores[static_cast<long>(b)];
  });
  std::vector<double> rank(static_cast<size_t>(n), 0.0);
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() &&
           scores[static_cast<long>(order[j + 1])] ==
               scores[static_cast<long>(order[i])]) {
      ++j;
    }
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  long n_pos = 0;
  for (long k = 0; k < n; ++k) {
    if (labels[k] > 0.5) {
      pos_rank_sum += rank[static_cast<size_t>(k)];
      ++n_pos;
    }
  }
  long n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    fail(ErrorKind::degenerate, "auc_score: labels contain a single class");
  }
  double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

struct LogisticFit {
  VectorXd coef;
  MatrixXd cov;
  VectorXd se;
  VectorXd z;
  VectorXd p;
  double log_lik = 0.0;
  bool converged = false;
  int n_iterations = 0;
};

struct LogisticOptions {
  double tol = 1e-10;            // infinity-norm gradient tolerance
  int max_iterations = 100;
  double ridge = 0.0;            // L2 penalty on all coefficients (prediction use)
  double separation_bound = 30;  // coefficient blow-up threshold
  bool check_rank = true;
};

namespace detail {

inline double bernoulli_log_lik(const VectorXd& y, const VectorXd& eta) {
  double ll = 0.0;
  for (long i = 0; i < y.size(); ++i) {
    double e = eta[i];
    // log sigma(e)*y + log sigma(-e)*(1-y), written stably.
    double log_sig = e >= 0 ? -std::log1p(std::exp(-e)) : e - std::log1p(std::exp(e));
    double log_one_minus = log_sig - e;
    ll += y[i] * log_sig + (1.0 - y[i]) * log_one_minus;
  }
  return ll;
}

}  // namespace detail

// Newton maximum likelihood for P(y=1) = sigma(X beta). y entries may be
// fractional in [0, 1] (used for tie handling in pairwise-strength fitting).
// The caller supplies the full design matrix, intercept column included.
inline LogisticFit fit_logistic(const VectorXd& y, const MatrixXd& X,
                                const LogisticOptions& opts = {}) {
  const long n = X.rows();
  const long p = X.cols();
  if (y.size() != n || n == 0 || p == 0) {
    fail(ErrorKind::validation, "fit_logistic: empty or mismatched inputs");
  }
  for (long i = 0; i < n; ++i) {
    if (!(y[i] >= 0.0 && y[i] <= 1.0)) {
      fail(ErrorKind::validation, "fit_logistic: y entries must lie in [0, 1]");
    }
  }
  if (!X.allFinite()) fail(ErrorKind::numeric, "fit_logistic: non-finite design");
  if (opts.check_rank) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) {
      fail(ErrorKind::validation,
           "fit_logistic: design matrix is rank deficient (rank " +
               std::to_string(qr.rank()) + " of " + std::to_string(p) + ")");
    }
  }

  LogisticFit fit;
  fit.coef = VectorXd::Zero(p);
  VectorXd eta = VectorXd::Zero(n);
  double ll = detail::bernoulli_log_lik(y, eta) -
              opts.ridge * fit.coef.squaredNorm();
  MatrixXd hessian(p, p);
  for (int iter = 1; iter <= opts.max_iterations; ++iter) {
    fit.n_iterations = iter;
    VectorXd prob(n), w(n);
    for (long i = 0; i < n; ++i) {
      prob[i] = sigmoid(eta[i]);
      w[i] = std::max(prob[i] * (1.0 - prob[i]), 1e-12);
    }
    VectorXd grad = X.transpose() * (y - prob) - 2.0 * opts.ridge * fit.coef;
    hessian = X.transpose() * w.asDiagonal() * X;
    if (opts.ridge > 0) hessian.diagonal().array() += 2.0 * opts.ridge;
    if (grad.lpNorm<Eigen::Infinity>() < opts.tol) {
      fit.converged = true;
      break;
    }
    VectorXd step = hessian.ldlt().solve(grad);
    if (!step.allFinite()) {
      fail(ErrorKind::numeric, "fit_logistic: Newton step is not finite");
    }
    // Step halving keeps the penalized likelihood monotone.
    double scale = 1.0;
    for (int h = 0; h < 30; ++h) {
      VectorXd cand = fit.coef + scale * step;
      VectorXd cand_eta = X * cand;
      double cand_ll = detail::bernoulli_log_lik(y, cand_eta) -
                       opts.ridge * cand.squaredNorm();
      if (cand_ll >= ll - 1e-14) {
        fit.coef = cand;
        eta = cand_eta;
        ll = cand_ll;
        break;
      }
      scale *= 0.5;
    }
    if (opts.ridge == 0.0 &&
        fit.coef.lpNorm<Eigen::Infinity>() > opts.separation_bound) {
      long worst = 0;
      fit.coef.cwiseAbs().maxCoeff(&worst);
      fail(ErrorKind::separation,
           "fit_logistic: coefficient explosion, likely perfect separation "
           "(column " + std::to_string(worst) + ")");
    }
  }
  fit.log_lik = ll;
  Eigen::LDLT<MatrixXd> ldlt(hessian);
  fit.cov = ldlt.solve(MatrixXd::Identity(p, p));
  fit.se = fit.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  fit.z = VectorXd::Zero(p);
  fit.p = VectorXd::Ones(p);
  for (long j = 0; j < p; ++j) {
    if (fit.se[j] > 0) {
      fit.z[j] = fit.coef[j] / fit.se[j];
      fit.p[j] = normal_two_sided_p(fit.z[j]);
    }
  }
  return fit;
}

inline double spearman_rho(const std::vector<double>& a,
                           const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    fail(ErrorKind::insufficient_data, "spearman_rho: need matched n >= 2");
  }
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> order(v.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t x, size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    size_t i = 0;
    while (i < order.size()) {
      size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (size_t k = i; k <= j; ++k) r[order[k]] = mid;
      i = j + 1;
    }
    return r;
  };
  auto ra = ranks(a);
  auto rb = ranks(b);
  VectorXd va = Eigen::Map<VectorXd>(ra.data(), static_cast<long>(ra.size()));
  VectorXd vb = Eigen::Map<VectorXd>(rb.data(), static_cast<long>(rb.size()));
  return pearson_corr(va, vb);
}

}  // namespace prefscope
