#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <random>
#include <thread>
#include <stdexcept>
#include <string>
#include <vector>

#include "sace/dataset.hpp"
#include "sace/matching.hpp"
#include "sace/principal_score.hpp"
#include "sace/rng.hpp"
#include <json.hpp>

namespace sace {

struct EstimateReport {
  std::string estimator;
  double estimate = 0.0;
  double se = std::nan("");
  double ci_lo = std::nan("");
  double ci_hi = std::nan("");
  bool percentile_ci = false;
  long n_pairs = 0;
  // sensitivity parameters in force (defaults: identity)
  double alpha1 = 1.0;
  double alpha0 = 1.0;
  double xi = 0.0;
  int cse_arm = -1;  // >= 0 for conditional separable effects
};

inline void wald_ci(EstimateReport& r) {
  r.ci_lo = r.estimate - 1.96 * r.se;
  r.ci_hi = r.estimate + 1.96 * r.se;
}

inline nlohmann::json report_to_json(const EstimateReport& r) {
  nlohmann::json j;
  j["estimator"] = r.estimator;
  j["estimate"] = r.estimate;
  j["se"] = r.se;
  j["ci95"] = {r.ci_lo, r.ci_hi};
  j["percentile_ci"] = r.percentile_ci;
  j["n_pairs"] = r.n_pairs;
  j["alpha1"] = r.alpha1;
  j["alpha0"] = r.alpha0;
  j["xi"] = r.xi;
  if (r.cse_arm >= 0) j["cse_arm"] = r.cse_arm;
  return j;
}

inline std::string report_csv_header() {
  return "estimator,estimate,se,ci_lo,ci_hi,n_pairs,alpha1,alpha0,xi";
}

inline std::string report_csv_row(const EstimateReport& r) {
  auto f = [](double v) { return std::isnan(v) ? std::string() : csv::format_double(v); };
  return r.estimator + ',' + f(r.estimate) + ',' + f(r.se) + ',' + f(r.ci_lo) + ',' + f(r.ci_hi) +
         ',' + std::to_string(r.n_pairs) + ',' + f(r.alpha1) + ',' + f(r.alpha0) + ',' + f(r.xi);
}

// ---------------------------------------------------------------------------
// weighted least squares with cluster-robust (sandwich) errors

struct WlsFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd xtwx_inv;
  Eigen::MatrixXd X;
  Eigen::VectorXd w;
  Eigen::VectorXd resid;
};

inline WlsFit fit_wls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  WlsFit f;
  Eigen::MatrixXd Xs = w.array().sqrt().matrix().asDiagonal() * X;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xs);
  if (qr.rank() < X.cols()) throw std::invalid_argument("outcome design matrix is rank deficient");
  Eigen::MatrixXd xtwx = X.transpose() * w.asDiagonal() * X;
  f.beta = xtwx.ldlt().solve(X.transpose() * (w.array() * y.array()).matrix());
  f.xtwx_inv = xtwx.ldlt().solve(Eigen::MatrixXd::Identity(X.cols(), X.cols()));
  f.X = X;
  f.w = w;
  f.resid = y - X * f.beta;
  return f;
}

inline Eigen::MatrixXd cluster_vcov(const WlsFit& f, const std::vector<long>& cluster) {
  std::map<long, Eigen::VectorXd> scores;
  for (long i = 0; i < f.X.rows(); ++i) {
    Eigen::VectorXd s = f.w[i] * f.resid[i] * f.X.row(i).transpose();
    auto [it, fresh] = scores.try_emplace(cluster[i], std::move(s));
    if (!fresh) it->second += f.w[i] * f.resid[i] * f.X.row(i).transpose();
  }
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(f.X.cols(), f.X.cols());
  for (const auto& [cid, s] : scores) meat += s * s.transpose();
  return f.xtwx_inv * meat * f.xtwx_inv;
}

// ---------------------------------------------------------------------------
// matched-sample design: targets at weight 1, distinct donors at weight K,
// clusters formed around each used donor

struct MatchedDesign {
  std::vector<long> rows;
  Eigen::VectorXd w;
  std::vector<long> cluster;
  long n_targets = 0;
};

inline MatchedDesign matched_design(const MatchedSample& sample) {
  MatchedDesign md;
  const auto targets = sample.matched_targets();
  md.n_targets = static_cast<long>(targets.size());
  md.rows.reserve(targets.size() + sample.donor_use.size());
  std::vector<double> wts;
  for (long t : targets) {
    md.rows.push_back(t);
    wts.push_back(1.0);
    md.cluster.push_back(sample.primary_donor.at(t));
  }
  for (const auto& [dn, k] : sample.donor_use) {
    md.rows.push_back(dn);
    wts.push_back(k);
    md.cluster.push_back(dn);
  }
  md.w = Eigen::Map<Eigen::VectorXd>(wts.data(), wts.size());
  return md;
}

// E(Y | A, S=1, X) linear model on the matched sample, optionally with all
// treatment-covariate interactions
struct OutcomeModel {
  bool interactions = false;
  std::vector<std::string> cols;
  Eigen::VectorXd beta;  // [intercept, a, x..., a:x...]
  Eigen::MatrixXd vcov;  // cluster-robust
  int target_arm = 0;
  Eigen::VectorXd target_xbar;  // covariate means over matched targets
  long n_targets = 0;

  long k() const { return static_cast<long>(cols.size()); }

  double mu(int a, const Eigen::VectorXd& x) const {
    double v = beta[0] + beta[1] * a + beta.segment(2, k()).dot(x);
    if (interactions && a == 1) v += beta.segment(2 + k(), k()).dot(x);
    return v;
  }
};

namespace detail {

inline Eigen::MatrixXd outcome_design(const Dataset& d, const std::vector<long>& rows,
                                      const std::vector<int>& cols, bool interactions) {
  const long n = static_cast<long>(rows.size());
  const long k = static_cast<long>(cols.size());
  Eigen::MatrixXd X(n, 2 + k + (interactions ? k : 0));
  for (long i = 0; i < n; ++i) {
    const long r = rows[i];
    X(i, 0) = 1.0;
    X(i, 1) = d.a[r];
    for (long j = 0; j < k; ++j) {
      X(i, 2 + j) = cols[j] < static_cast<int>(d.k0()) ? d.x0(r, cols[j])
                                                       : d.x1(r, cols[j] - d.k0());
      if (interactions) X(i, 2 + k + j) = d.a[r] * X(i, 2 + j);
    }
  }
  return X;
}

inline std::vector<int> outcome_col_indices(const Dataset& d, const std::vector<std::string>& names) {
  std::vector<int> idx;
  for (const auto& nm : names) {
    bool found = false;
    for (size_t j = 0; j < d.roles.covariates.size(); ++j)
      if (d.roles.covariates[j].name == nm) { idx.push_back(static_cast<int>(j)); found = true; break; }
    if (!found) idx.push_back(static_cast<int>(d.k0()) + d.post_covariate_index(nm));
  }
  return idx;
}

}  // namespace detail

inline OutcomeModel fit_outcome_model(const Dataset& d, const MatchedSample& sample, bool interactions,
                                      std::vector<std::string> cols = {}) {
  if (cols.empty()) cols = d.roles.outcome_model_cols;
  if (cols.empty())
    for (const auto& m : d.roles.covariates) cols.push_back(m.name);
  const auto idx = detail::outcome_col_indices(d, cols);
  MatchedDesign md = matched_design(sample);
  Eigen::MatrixXd X = detail::outcome_design(d, md.rows, idx, interactions);
  Eigen::VectorXd y(md.rows.size());
  for (size_t i = 0; i < md.rows.size(); ++i) y[i] = d.y[md.rows[i]];
  WlsFit f = fit_wls(X, y, md.w);

  OutcomeModel m;
  m.interactions = interactions;
  m.cols = cols;
  m.beta = f.beta;
  m.vcov = cluster_vcov(f, md.cluster);
  m.target_arm = sample.target_arm;
  m.n_targets = md.n_targets;
  m.target_xbar = Eigen::VectorXd::Zero(idx.size());
  for (long i = 0; i < md.n_targets; ++i)
    m.target_xbar += X.row(i).segment(2, idx.size()).transpose();
  if (md.n_targets > 0) m.target_xbar /= static_cast<double>(md.n_targets);
  return m;
}

// plain unweighted regression of Y on covariates within one arm's survivors
// (the mu-hat used by the bias-corrected estimator, fitted before matching)
struct ArmRegression {
  std::vector<std::string> cols;
  Eigen::VectorXd beta;  // [intercept, x...]
  double predict(const Dataset& d, long row, const std::vector<int>& idx) const {
    double v = beta[0];
    for (size_t j = 0; j < idx.size(); ++j)
      v += beta[1 + j] * (idx[j] < static_cast<int>(d.k0()) ? d.x0(row, idx[j])
                                                            : d.x1(row, idx[j] - d.k0()));
    return v;
  }
};

inline ArmRegression fit_arm_regression(const Dataset& d, int arm, std::vector<std::string> cols = {}) {
  if (cols.empty()) cols = d.roles.outcome_model_cols;
  if (cols.empty())
    for (const auto& m : d.roles.covariates) cols.push_back(m.name);
  const auto idx = detail::outcome_col_indices(d, cols);
  const auto rows = d.survivors(arm);
  if (rows.empty()) throw std::invalid_argument("no survivors in arm for regression");
  Eigen::MatrixXd X(rows.size(), 1 + idx.size());
  Eigen::VectorXd y(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    X(i, 0) = 1.0;
    for (size_t j = 0; j < idx.size(); ++j)
      X(i, 1 + j) = idx[j] < static_cast<int>(d.k0()) ? d.x0(rows[i], idx[j])
                                                      : d.x1(rows[i], idx[j] - d.k0());
    y[i] = d.y[rows[i]];
  }
  ArmRegression ar;
  ar.cols = cols;
  ar.beta = fit_wls(X, y, Eigen::VectorXd::Ones(rows.size())).beta;
  return ar;
}

// ---------------------------------------------------------------------------
// crude matched difference, with the matching-with-replacement variance

namespace detail {

// treated-minus-untreated difference per matched target (tied donors averaged)
inline std::vector<double> pair_differences(const Dataset& d, const MatchedSample& sample) {
  std::vector<double> diffs;
  const auto targets = sample.matched_targets();
  size_t pi = 0;
  for (long t : targets) {
    double ybar = 0;
    while (pi < sample.pairs.size() && sample.pairs[pi].target == t) {
      ybar += sample.pairs[pi].weight * d.y[sample.pairs[pi].donor];
      ++pi;
    }
    diffs.push_back(sample.target_arm == 0 ? ybar - d.y[t] : d.y[t] - ybar);
  }
  return diffs;
}

// sigma^2(x,a) ~ half squared gap to the nearest same-arm survivor
inline std::map<long, double> nearest_neighbor_sigma2(const Dataset& d, const DistanceEvaluator& dist,
                                                      const std::vector<long>& units,
                                                      const std::vector<long>& pool) {
  std::map<long, double> out;
  for (long u : units) {
    double best = kInf, best_base = kInf;
    long arg = -1, arg_base = -1;
    for (long v : pool) {
      if (v == u) continue;
      const double dd = dist(u, v);
      if (dd < best) { best = dd; arg = v; }
      const double bb = dist.fallback_distance(u, v);
      if (bb < best_base) { best_base = bb; arg_base = v; }
    }
    const long nn = arg >= 0 ? arg : arg_base;  // caliper may isolate a unit
    if (nn < 0) { out[u] = 0.0; continue; }
    const double gap = d.y[u] - d.y[nn];
    out[u] = gap * gap / 2.0;
  }
  return out;
}

inline double with_replacement_variance(const Dataset& d, const MatchedSample& sample,
                                        const std::vector<double>& diffs, double tau) {
  DistanceEvaluator dist(d, sample.spec);
  const auto targets = sample.matched_targets();
  const std::vector<long> target_pool = d.survivors(sample.target_arm);
  const std::vector<long> donor_pool = d.survivors(1 - sample.target_arm);
  std::vector<long> used_donors;
  for (const auto& [dn, k] : sample.donor_use) used_donors.push_back(dn);

  const auto sig_t = nearest_neighbor_sigma2(d, dist, targets, target_pool);
  const auto sig_d = nearest_neighbor_sigma2(d, dist, used_donors, donor_pool);

  const double m = static_cast<double>(targets.size());
  double h = 0.0, cross = 0.0;
  size_t pi = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    h += (diffs[i] - tau) * (diffs[i] - tau);
    double sd_match = 0;
    while (pi < sample.pairs.size() && sample.pairs[pi].target == targets[i]) {
      sd_match += sample.pairs[pi].weight * sig_d.at(sample.pairs[pi].donor);
      ++pi;
    }
    cross += sig_t.at(targets[i]) + sd_match;
  }
  h = h / (m * m) - cross / (m * m);

  double noise = 0.0;
  for (long t : targets) noise += sig_t.at(t);
  for (const auto& [dn, k] : sample.donor_use) noise += k * k * sig_d.at(dn);
  return std::max(0.0, h) + noise / (m * m);
}

}  // namespace detail

inline EstimateReport estimate_crude(const MatchedSample& sample, const Dataset& d) {
  if (sample.pairs.empty()) throw std::invalid_argument("empty matched sample");
  const auto diffs = detail::pair_differences(d, sample);
  EstimateReport r;
  r.estimator = "crude";
  r.n_pairs = static_cast<long>(diffs.size());
  double mean = 0;
  for (double v : diffs) mean += v;
  mean /= static_cast<double>(diffs.size());
  r.estimate = mean;
  if (!sample.with_replacement) {
    double ss = 0;
    for (double v : diffs) ss += (v - mean) * (v - mean);
    const double m = static_cast<double>(diffs.size());
    r.se = m > 1 ? std::sqrt(ss / (m - 1) / m) : std::nan("");
  } else {
    r.se = std::sqrt(detail::with_replacement_variance(d, sample, diffs, mean));
  }
  wald_ci(r);
  return r;
}

inline EstimateReport estimate_regression(const OutcomeModel& m, const MatchedSample& sample,
                                          const Dataset& d) {
  (void)d;
  if (m.target_arm != sample.target_arm || m.n_targets != static_cast<long>(sample.matched_targets().size()))
    throw std::invalid_argument("outcome model was not fitted on this matched sample");
  EstimateReport r;
  r.estimator = m.interactions ? "regression_interactions" : "regression";
  r.n_pairs = m.n_targets;
  if (!m.interactions) {
    r.estimate = m.beta[1];
    r.se = std::sqrt(m.vcov(1, 1));
  } else {
    Eigen::VectorXd ell = Eigen::VectorXd::Zero(m.beta.size());
    ell[1] = 1.0;
    ell.segment(2 + m.k(), m.k()) = m.target_xbar;
    r.estimate = ell.dot(m.beta);
    r.se = std::sqrt(ell.dot(m.vcov * ell));
  }
  wald_ci(r);
  return r;
}

// Bias-corrected matched difference: the crude difference plus a regression
// adjustment for inexact matching. mu_hat must be fitted on the donor arm's
// survivors before matching.
inline EstimateReport estimate_bias_corrected(const MatchedSample& sample, const Dataset& d,
                                              const ArmRegression& mu_hat) {
  if (!sample.with_replacement)
    throw std::invalid_argument("bias-corrected estimator is defined for matching with replacement");
  const auto idx = detail::outcome_col_indices(d, mu_hat.cols);
  const auto targets = sample.matched_targets();
  std::vector<double> diffs;
  size_t pi = 0;
  for (long t : targets) {
    double corrected = 0;
    while (pi < sample.pairs.size() && sample.pairs[pi].target == t) {
      const auto& p = sample.pairs[pi];
      corrected += p.weight * (d.y[p.donor] + mu_hat.predict(d, t, idx) - mu_hat.predict(d, p.donor, idx));
      ++pi;
    }
    diffs.push_back(sample.target_arm == 0 ? corrected - d.y[t] : d.y[t] - corrected);
  }
  EstimateReport r;
  r.estimator = "bias_corrected";
  r.n_pairs = static_cast<long>(diffs.size());
  double mean = 0;
  for (double v : diffs) mean += v;
  mean /= static_cast<double>(diffs.size());
  r.estimate = mean;
  r.se = std::sqrt(detail::with_replacement_variance(d, sample, diffs, mean));
  wald_ci(r);
  return r;
}

// Direct weighting comparator: E[Y(1)|as] as a pi-tilde weighted mean over
// treated survivors, E[Y(0)|as] as the untreated-survivor mean; percentile
// bootstrap CI with the EM refitted on each resample. Resamples carry derived
// seeds and run in parallel; results do not depend on the worker count.
inline EstimateReport estimate_weighting(const Dataset& d, const PrincipalScoreModel& model,
                                         int n_boot = 500, unsigned long long seed = 0,
                                         const EmOptions& em_opt = {}, int threads = 0) {
  if (model.variant != PsVariant::monotonicity)
    throw std::invalid_argument("weighting comparator requires the monotonicity-variant score model");
  auto point = [](const Dataset& data, const PrincipalScoreModel& m) {
    const auto pi = pi_tilde1_all(m, data);
    double num = 0, den = 0, y0 = 0;
    long n0 = 0;
    for (long i = 0; i < data.n(); ++i) {
      if (data.s[i] != 1) continue;
      if (data.a[i] == 1) {
        num += pi[i] * data.y[i];
        den += pi[i];
      } else {
        y0 += data.y[i];
        ++n0;
      }
    }
    if (den <= 0) throw std::invalid_argument("all pi-tilde weights are zero among treated survivors");
    if (n0 == 0) throw std::invalid_argument("no untreated survivors");
    return num / den - y0 / static_cast<double>(n0);
  };

  EstimateReport r;
  r.estimator = "weighting";
  r.estimate = point(d, model);
  r.n_pairs = 0;

  if (n_boot > 0) {
    EmOptions warm = em_opt;
    warm.init = model.coef;
    std::vector<double> results(n_boot, std::nan(""));
    const long hw = static_cast<long>(std::thread::hardware_concurrency());
    const long n_threads =
        std::max<long>(1, std::min<long>(threads > 0 ? threads : (hw > 0 ? hw : 1), n_boot));
    std::mutex next_mu;
    int next = 0;
    auto worker = [&]() {
      while (true) {
        int b;
        {
          std::lock_guard<std::mutex> lk(next_mu);
          if (next >= n_boot) return;
          b = next++;
        }
        rng::Prng prng(rng::derive_seed(seed, static_cast<std::uint64_t>(b)));
        std::vector<long> take(d.n());
        for (long i = 0; i < d.n(); ++i) take[i] = prng.uniform_below(d.n());
        Dataset res = subset(d, take);
        try {
          PrincipalScoreModel m = fit_em_monotonicity(res, model.covariates, warm);
          results[b] = point(res, m);
        } catch (const std::exception&) {
          // degenerate resample (e.g. an empty cell): skip it
        }
      }
    };
    std::vector<std::thread> pool;
    for (long t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    std::vector<double> boot;
    boot.reserve(n_boot);
    for (double v : results)
      if (!std::isnan(v)) boot.push_back(v);
    if (boot.size() >= 20) {
      std::sort(boot.begin(), boot.end());
      auto q = [&](double p) {
        const double h = p * (static_cast<double>(boot.size()) - 1);
        const size_t lo = static_cast<size_t>(std::floor(h));
        const size_t hi = std::min(lo + 1, boot.size() - 1);
        return boot[lo] + (h - lo) * (boot[hi] - boot[lo]);
      };
      r.ci_lo = q(0.025);
      r.ci_hi = q(0.975);
      r.percentile_ci = true;
      double bm = 0;
      for (double v : boot) bm += v;
      bm /= static_cast<double>(boot.size());
      double ss = 0;
      for (double v : boot) ss += (v - bm) * (v - bm);
      r.se = std::sqrt(ss / (static_cast<double>(boot.size()) - 1));
    }
  }
  return r;
}

inline EstimateReport estimate_naive(const Dataset& d) {
  double m1 = 0, m0 = 0, s1 = 0, s0 = 0;
  long n1 = 0, n0 = 0;
  for (long i = 0; i < d.n(); ++i) {
    if (d.s[i] != 1) continue;
    if (d.a[i] == 1) { m1 += d.y[i]; ++n1; } else { m0 += d.y[i]; ++n0; }
  }
  if (n1 == 0 || n0 == 0) throw std::invalid_argument("naive estimator needs survivors in both arms");
  m1 /= n1; m0 /= n0;
  for (long i = 0; i < d.n(); ++i) {
    if (d.s[i] != 1) continue;
    if (d.a[i] == 1) s1 += (d.y[i] - m1) * (d.y[i] - m1);
    else s0 += (d.y[i] - m0) * (d.y[i] - m0);
  }
  EstimateReport r;
  r.estimator = "naive";
  r.estimate = m1 - m0;
  r.se = std::sqrt(s1 / (n1 - 1) / n1 + s0 / (n0 - 1) / n0);
  r.n_pairs = 0;
  wald_ci(r);
  return r;
}

inline EstimateReport estimate_composite(const Dataset& d) {
  double m1 = 0, m0 = 0, s1 = 0, s0 = 0;
  long n1 = 0, n0 = 0;
  for (long i = 0; i < d.n(); ++i) {
    const double v = d.s[i] == 1 ? d.y[i] : 0.0;  // dead units carry outcome zero
    if (d.a[i] == 1) { m1 += v; ++n1; } else { m0 += v; ++n0; }
  }
  if (n1 == 0 || n0 == 0) throw std::invalid_argument("composite estimator needs both arms");
  m1 /= n1; m0 /= n0;
  for (long i = 0; i < d.n(); ++i) {
    const double v = d.s[i] == 1 ? d.y[i] : 0.0;
    if (d.a[i] == 1) s1 += (v - m1) * (v - m1);
    else s0 += (v - m0) * (v - m0);
  }
  EstimateReport r;
  r.estimator = "composite";
  r.estimate = m1 - m0;
  r.se = std::sqrt(s1 / (n1 - 1) / n1 + s0 / (n0 - 1) / n0);
  r.n_pairs = 0;
  wald_ci(r);
  return r;
}

// Conditional separable effect CSE(a_S): match survivors across arms on
// (X0, X1), preserving the covariate distribution of {A=a_S, S=1}.
inline EstimateReport estimate_cse(const Dataset& d, int a_s, DistanceSpec spec,
                                   const std::string& estimator = "crude",
                                   bool with_replacement = true,
                                   MatchAlgorithm algorithm = MatchAlgorithm::greedy) {
  if (!d.roles.post_declared)
    throw std::invalid_argument("CSE estimation requires declared post-treatment covariates");
  if (a_s != 0 && a_s != 1) throw std::invalid_argument("a_S must be 0 or 1");
  spec.use_post = true;
  MatchedSample sample = match(d, spec, a_s, with_replacement, algorithm);
  EstimateReport r;
  if (estimator == "crude") {
    r = estimate_crude(sample, d);
  } else if (estimator == "regression") {
    std::vector<std::string> cols = d.roles.outcome_model_cols;
    if (cols.empty())
      for (const auto& m : d.roles.covariates) cols.push_back(m.name);
    for (const auto& m : d.roles.post_covariates) cols.push_back(m.name);
    OutcomeModel om = fit_outcome_model(d, sample, /*interactions=*/false, cols);
    r = estimate_regression(om, sample, d);
  } else {
    throw std::invalid_argument("CSE estimator must be 'crude' or 'regression'");
  }
  r.estimator = "cse_" + estimator;
  r.cse_arm = a_s;
  return r;
}

}  // namespace sace
