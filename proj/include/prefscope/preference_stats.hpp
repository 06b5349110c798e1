#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prefscope/autointerp.hpp"
#include "prefscope/dataset.hpp"
#include "prefscope/sae.hpp"
#include "prefscope/stats.hpp"

namespace prefscope {

struct EffectEstimate {
  int feature_id = -1;
  double beta = 0.0;      // log-odds per 1 sd of z_j
  double beta_se = 0.0;
  double p_value = 1.0;
  double delta_winrate = 0.0;
  double dw_ci_lo = 0.0;
  double dw_ci_hi = 0.0;
  bool dw_computed = false;
  double prevalence = 0.0;  // fraction of rows with z_j != 0
  long n_used = 0;
  std::string skip_reason;  // nonempty when the feature was skipped
  bool skipped = false;
};

struct EffectOptions {
  long min_nonzero = 50;      // floor for the dichotomized effect
  int bootstrap = 1000;
  uint64_t seed = 0;
  bool with_length_control = true;
  // Standardize sparse columns using nonzero entries only (zeros stay zero).
  bool standardize_nonzero_only = false;
};

// Labeled rows only: y = 1 when response A was chosen.
struct LabeledView {
  MatrixXd z;
  VectorXd y;
  VectorXd length_delta;
  std::vector<size_t> source_rows;
  std::vector<std::string> pair_ids;
  std::vector<std::string> annotator_ids;
};

inline LabeledView labeled_view(const Dataset& d, const LatentMatrix& z) {
  interp_detail::check_alignment(z, d);
  std::vector<size_t> rows;
  for (size_t i = 0; i < d.pairs.size(); ++i) {
    if (d.pairs[i].label == Label::A || d.pairs[i].label == Label::B) {
      rows.push_back(i);
    }
  }
  if (rows.empty()) fail(ErrorKind::insufficient_data, "no labeled pairs");
  LabeledView view;
  view.z = MatrixXd(static_cast<long>(rows.size()), z.z.cols());
  view.y = VectorXd(static_cast<long>(rows.size()));
  view.length_delta = VectorXd(static_cast<long>(rows.size()));
  for (size_t k = 0; k < rows.size(); ++k) {
    const auto& p = d.pairs[rows[k]];
    view.z.row(static_cast<long>(k)) = z.z.row(static_cast<long>(rows[k]));
    view.y[static_cast<long>(k)] = p.label == Label::A ? 1.0 : 0.0;
    view.length_delta[static_cast<long>(k)] = static_cast<double>(p.length_delta);
    view.source_rows.push_back(rows[k]);
    view.pair_ids.push_back(p.id);
    view.annotator_ids.push_back(p.annotator_id);
  }
  return view;
}

namespace stats_detail {

inline VectorXd standardize_feature(const VectorXd& col, bool nonzero_only) {
  if (!nonzero_only) return standardize(col).values;
  std::vector<double> nz;
  for (long i = 0; i < col.size(); ++i) {
    if (col[i] != 0.0) nz.push_back(col[i]);
  }
  if (nz.size() < 2) fail(ErrorKind::degenerate, "too few nonzero entries");
  double mean = 0.0;
  for (double v : nz) mean += v;
  mean /= static_cast<double>(nz.size());
  double var = 0.0;
  for (double v : nz) var += (v - mean) * (v - mean);
  var /= static_cast<double>(nz.size());
  if (!(var > 0.0)) fail(ErrorKind::degenerate, "zero variance among nonzero entries");
  double sd = std::sqrt(var);
  VectorXd out = col;
  for (long i = 0; i < out.size(); ++i) {
    if (out[i] != 0.0) out[i] = (out[i] - mean) / sd;
  }
  return out;
}

}  // namespace stats_detail

struct DeltaWinrate {
  double ame = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  long n_used = 0;
};

// Dichotomized effect: fit y ~ sigma(a + b*D + g*len) on rows with z != 0,
// D = 1 for positive z, 0 for negative; the average marginal effect is the
// mean predicted win-rate change between the two states of D.
inline DeltaWinrate delta_winrate(const VectorXd& z_col, const VectorXd& y,
                                  const VectorXd& length_delta,
                                  const EffectOptions& opts = {}) {
  std::vector<long> nz;
  for (long i = 0; i < z_col.size(); ++i) {
    if (z_col[i] != 0.0) nz.push_back(i);
  }
  if (static_cast<long>(nz.size()) < opts.min_nonzero) {
    fail(ErrorKind::insufficient_data,
         "delta_winrate: " + std::to_string(nz.size()) + " nonzero rows, need " +
             std::to_string(opts.min_nonzero));
  }
  const long n = static_cast<long>(nz.size());
  VectorXd d_ind(n), y_sub(n), len_sub(n);
  for (long k = 0; k < n; ++k) {
    d_ind[k] = z_col[nz[static_cast<size_t>(k)]] > 0.0 ? 1.0 : 0.0;
    y_sub[k] = y[nz[static_cast<size_t>(k)]];
    len_sub[k] = length_delta[nz[static_cast<size_t>(k)]];
  }

  auto fit_ame = [&](const VectorXd& yy, const VectorXd& dd,
                     const VectorXd& ll) -> double {
    const long rows = yy.size();
    MatrixXd design;
    VectorXd len_std;
    if (opts.with_length_control) {
      len_std = standardize(ll).values;
      design = MatrixXd(rows, 3);
      design.col(0).setOnes();
      design.col(1) = dd;
      design.col(2) = len_std;
    } else {
      design = MatrixXd(rows, 2);
      design.col(0).setOnes();
      design.col(1) = dd;
    }
    auto fit = fit_logistic(yy, design);
    double alpha = fit.coef[0], beta = fit.coef[1];
    double total = 0.0;
    for (long i = 0; i < rows; ++i) {
      double ctrl = opts.with_length_control ? fit.coef[2] * len_std[i] : 0.0;
      total += sigmoid(alpha + beta + ctrl) - sigmoid(alpha + ctrl);
    }
    return total / static_cast<double>(rows);
  };

  DeltaWinrate out;
  out.n_used = n;
  out.ame = fit_ame(y_sub, d_ind, len_sub);

  Rng rng(opts.seed ^ 0xb007u);
  std::vector<double> boot;
  boot.reserve(static_cast<size_t>(opts.bootstrap));
  int attempts_left = opts.bootstrap * 3;
  while (static_cast<int>(boot.size()) < opts.bootstrap && attempts_left-- > 0) {
    VectorXd yy(n), dd(n), ll(n);
    for (long k = 0; k < n; ++k) {
      long pick = static_cast<long>(rng.below(static_cast<uint64_t>(n)));
      yy[k] = y_sub[pick];
      dd[k] = d_ind[pick];
      ll[k] = len_sub[pick];
    }
    try {
      boot.push_back(fit_ame(yy, dd, ll));
    } catch (const Error&) {
      // Degenerate resample (single class, constant column); draw again.
    }
  }
  if (boot.size() >= 20) {
    out.ci_lo = quantile(boot, 0.025);
    out.ci_hi = quantile(boot, 0.975);
  } else {
    out.ci_lo = out.ame;
    out.ci_hi = out.ame;
  }
  return out;
}

// Per-feature univariate logistic regressions with a length control,
// plus the dichotomized delta_winrate for each feature.
inline std::vector<EffectEstimate> feature_effects(const MatrixXd& z,
                                                   const VectorXd& y,
                                                   const VectorXd& length_delta,
                                                   const EffectOptions& opts = {}) {
  if (z.rows() != y.size() || y.size() != length_delta.size()) {
    fail(ErrorKind::validation, "feature_effects: mismatched inputs");
  }
  const long n = z.rows();
  VectorXd len_std = standardize(length_delta).values;
  std::vector<EffectEstimate> out;
  for (long j = 0; j < z.cols(); ++j) {
    EffectEstimate est;
    est.feature_id = static_cast<int>(j);
    est.n_used = n;
    est.prevalence = static_cast<double>((z.col(j).array() != 0.0).count()) /
                     static_cast<double>(n);
    try {
      VectorXd z_std = stats_detail::standardize_feature(
          z.col(j), opts.standardize_nonzero_only);
      MatrixXd design(n, 3);
      design.col(0).setOnes();
      design.col(1) = z_std;
      design.col(2) = len_std;
      auto fit = fit_logistic(y, design);
      est.beta = fit.coef[1];
      est.beta_se = fit.se[1];
      est.p_value = fit.p[1];
    } catch (const Error& e) {
      est.skipped = true;
      est.skip_reason = e.what();
      out.push_back(std::move(est));
      continue;
    }
    try {
      EffectOptions dw_opts = opts;
      dw_opts.seed = splitmix64(opts.seed ^ static_cast<uint64_t>(j));
      auto dw = delta_winrate(z.col(j), y, length_delta, dw_opts);
      est.delta_winrate = dw.ame;
      est.dw_ci_lo = dw.ci_lo;
      est.dw_ci_hi = dw.ci_hi;
      est.dw_computed = true;
    } catch (const Error& e) {
      est.dw_computed = false;
      est.skip_reason = e.what();
    }
    out.push_back(std::move(est));
  }
  return out;
}

struct CvAucOptions {
  int folds = 5;
  uint64_t seed = 0;
  bool with_length_control = true;
  double ridge = 1e-6;  // prediction-path stabilizer
  int max_refolds = 10;
};

// Cross-validated AUC of the multivariate logistic model. Zero-variance
// feature columns are dropped; the held-out scores across folds are pooled
// into a single AUC.
inline double cv_auc(const MatrixXd& features, const VectorXd& y,
                     const VectorXd& length_delta, const CvAucOptions& opts = {}) {
  const long n = features.rows();
  if (n != y.size()) fail(ErrorKind::validation, "cv_auc: mismatched inputs");
  std::vector<long> keep_cols;
  for (long j = 0; j < features.cols(); ++j) {
    double mean = features.col(j).mean();
    double var = (features.col(j).array() - mean).square().sum() /
                 static_cast<double>(n);
    if (var > 0.0) keep_cols.push_back(j);
  }
  if (keep_cols.empty()) fail(ErrorKind::degenerate, "cv_auc: all columns constant");

  long p = static_cast<long>(keep_cols.size()) + 1 +
           (opts.with_length_control ? 1 : 0);
  MatrixXd design(n, p);
  design.col(0).setOnes();
  for (size_t k = 0; k < keep_cols.size(); ++k) {
    design.col(static_cast<long>(k) + 1) = standardize(features.col(keep_cols[k])).values;
  }
  if (opts.with_length_control) {
    design.col(p - 1) = standardize(length_delta).values;
  }

  for (int attempt = 0; attempt <= opts.max_refolds; ++attempt) {
    Rng rng(splitmix64(opts.seed + static_cast<uint64_t>(attempt) * 0x9e37u));
    std::vector<int> fold(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) {
      fold[static_cast<size_t>(i)] = static_cast<int>(i) % opts.folds;
    }
    rng.shuffle(fold);
    bool degenerate = false;
    for (int f = 0; f < opts.folds && !degenerate; ++f) {
      long test_pos = 0, test_neg = 0, train_pos = 0, train_neg = 0;
      for (long i = 0; i < n; ++i) {
        bool in_test = fold[static_cast<size_t>(i)] == f;
        bool pos = y[i] > 0.5;
        if (in_test) {
          (pos ? test_pos : test_neg)++;
        } else {
          (pos ? train_pos : train_neg)++;
        }
      }
      if (test_pos == 0 || test_neg == 0 || train_pos == 0 || train_neg == 0) {
        degenerate = true;
      }
    }
    if (degenerate) continue;

    VectorXd scores(n);
    LogisticOptions lopts;
    lopts.ridge = opts.ridge;
    lopts.max_iterations = 200;
    lopts.check_rank = false;
    for (int f = 0; f < opts.folds; ++f) {
      std::vector<long> train_rows, test_rows;
      for (long i = 0; i < n; ++i) {
        (fold[static_cast<size_t>(i)] == f ? test_rows : train_rows).push_back(i);
      }
      MatrixXd x_train(static_cast<long>(train_rows.size()), p);
      VectorXd y_train(static_cast<long>(train_rows.size()));
      for (size_t k = 0; k < train_rows.size(); ++k) {
        x_train.row(static_cast<long>(k)) = design.row(train_rows[k]);
        y_train[static_cast<long>(k)] = y[train_rows[k]];
      }
      auto fit = fit_logistic(y_train, x_train, lopts);
      for (long i : test_rows) {
        scores[i] = design.row(i).dot(fit.coef);
      }
    }
    return auc_score(scores, y);
  }
  fail(ErrorKind::degenerate,
       "cv_auc: could not find a fold assignment with both classes per fold");
}

struct CrossDatasetEffect {
  bool skipped = false;
  std::string reason;
  double ame = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double prevalence = 0.0;  // nonzero-verdict rate
  long n_annotated = 0;
  long n_failed = 0;
};

struct CrossDatasetOptions {
  int n_pairs = 10000;
  double min_prevalence = 0.05;
  int concurrency = 8;
  EffectOptions effect;
};

// Judge verdicts stand in for the feature column when a foreign feature is
// evaluated on this dataset; pairs with verdict 0 are excluded and the whole
// feature is skipped if nonzero verdicts are rarer than min_prevalence.
inline CrossDatasetEffect cross_dataset_effect(const std::string& description,
                                               const Dataset& d, ChatClient& llm,
                                               uint64_t seed, const AuditLog& audit,
                                               const CrossDatasetOptions& opts = {}) {
  std::vector<size_t> labeled;
  for (size_t i = 0; i < d.pairs.size(); ++i) {
    if (d.pairs[i].label == Label::A || d.pairs[i].label == Label::B) {
      labeled.push_back(i);
    }
  }
  if (labeled.empty()) fail(ErrorKind::insufficient_data, "no labeled pairs");
  Rng rng(seed);
  std::vector<size_t> rows;
  if (static_cast<long>(labeled.size()) <= opts.n_pairs) {
    rows = labeled;
  } else {
    for (size_t p : rng.sample_indices(labeled.size(), static_cast<size_t>(opts.n_pairs))) {
      rows.push_back(labeled[p]);
    }
  }

  std::vector<int> verdicts(rows.size(), 0);
  std::vector<char> ok(rows.size(), 0);
  parallel_for_indexed(rows.size(), opts.concurrency, [&](size_t i) {
    try {
      auto ann = annotate_presence(description, d.pairs[rows[i]], llm, audit, -1);
      verdicts[i] = ann.verdict;
      ok[i] = 1;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::annotation) throw;
      ok[i] = 0;
    }
  });

  CrossDatasetEffect out;
  std::vector<double> v_col, y_col, len_col;
  long nonzero = 0;
  for (size_t i = 0; i < rows.size(); ++i) {
    if (!ok[i]) {
      ++out.n_failed;
      continue;
    }
    ++out.n_annotated;
    if (verdicts[i] != 0) ++nonzero;
    v_col.push_back(static_cast<double>(verdicts[i]));
    y_col.push_back(d.pairs[rows[i]].label == Label::A ? 1.0 : 0.0);
    len_col.push_back(static_cast<double>(d.pairs[rows[i]].length_delta));
  }
  if (out.n_annotated == 0) {
    fail(ErrorKind::insufficient_data, "cross_dataset_effect: no usable annotations");
  }
  out.prevalence = static_cast<double>(nonzero) / static_cast<double>(out.n_annotated);
  if (out.prevalence < opts.min_prevalence) {
    out.skipped = true;
    out.reason = "feature prevalence " + std::to_string(out.prevalence) +
                 " below the " + std::to_string(opts.min_prevalence) + " gate";
    return out;
  }
  VectorXd v = Eigen::Map<VectorXd>(v_col.data(), static_cast<long>(v_col.size()));
  VectorXd y = Eigen::Map<VectorXd>(y_col.data(), static_cast<long>(y_col.size()));
  VectorXd len = Eigen::Map<VectorXd>(len_col.data(), static_cast<long>(len_col.size()));
  auto dw = delta_winrate(v, y, len, opts.effect);
  out.ame = dw.ame;
  out.ci_lo = dw.ci_lo;
  out.ci_hi = dw.ci_hi;
  return out;
}

}  // namespace prefscope
