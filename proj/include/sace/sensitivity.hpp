#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sace/dataset.hpp"
#include "sace/estimators.hpp"
#include "sace/matching.hpp"
#include "sace/principal_score.hpp"

namespace sace {

struct SensitivityPoint {
  double alpha1 = 1.0;
  double xi = 0.0;
  double alpha0 = 1.0;
  EstimateReport report;
};

struct SensitivityGrid {
  std::string kind;  // ppi | monotonicity
  EstimateReport base;
  std::vector<SensitivityPoint> points;
};

namespace detail {

// Plug-in estimate sum_i r_i g(x_i, theta) with a cluster-robust delta-method
// SE. Both modified plug-ins are linear in theta, so the estimate is
// ell_bar' beta with ell(x) accumulated over matched targets.
struct PluginAccum {
  const Dataset& d;
  const OutcomeModel& m;
  std::vector<long> targets;
  std::vector<int> idx;
  Eigen::MatrixXd xmat;  // covariate rows for targets

  PluginAccum(const Dataset& dd, const OutcomeModel& mm, const MatchedSample& sample)
      : d(dd), m(mm) {
    targets = sample.matched_targets();
    idx = estimator_cols();
    xmat.resize(targets.size(), idx.size());
    for (size_t i = 0; i < targets.size(); ++i)
      for (size_t j = 0; j < idx.size(); ++j)
        xmat(i, j) = idx[j] < static_cast<int>(d.k0()) ? d.x0(targets[i], idx[j])
                                                       : d.x1(targets[i], idx[j] - d.k0());
  }

  std::vector<int> estimator_cols() const {
    std::vector<int> out;
    for (const auto& nm : m.cols) {
      bool found = false;
      for (size_t j = 0; j < d.roles.covariates.size(); ++j)
        if (d.roles.covariates[j].name == nm) { out.push_back(static_cast<int>(j)); found = true; break; }
      if (!found) out.push_back(static_cast<int>(d.k0()) + d.post_covariate_index(nm));
    }
    return out;
  }

  // ell(x) coefficients for g(x) = c1(x) * mu1(x) + c0(x) * mu0(x)
  EstimateReport evaluate(const std::vector<double>& c1, const std::vector<double>& c0) const {
    const long k = m.k();
    Eigen::VectorXd ell = Eigen::VectorXd::Zero(m.beta.size());
    for (size_t i = 0; i < targets.size(); ++i) {
      const double s = c1[i] + c0[i];
      ell[0] += s;
      ell[1] += c1[i];
      for (long j = 0; j < k; ++j) ell[2 + j] += s * xmat(i, j);
      if (m.interactions)
        for (long j = 0; j < k; ++j) ell[2 + k + j] += c1[i] * xmat(i, j);
    }
    ell /= static_cast<double>(targets.size());
    EstimateReport r;
    r.estimate = ell.dot(m.beta);
    r.se = std::sqrt(ell.dot(m.vcov * ell));
    r.n_pairs = static_cast<long>(targets.size());
    wald_ci(r);
    return r;
  }
};

}  // namespace detail

// PPI sensitivity sweep: g(x) = mu1(x) / (pi1 + alpha1 (1 - pi1)) - mu0(x),
// on a frozen matched sample and fitted outcome model.
inline SensitivityGrid sweep_ppi(const Dataset& d, const MatchedSample& sample,
                                 const PrincipalScoreModel& score_model, const OutcomeModel& model,
                                 std::vector<double> alpha1_values) {
  if (score_model.variant != PsVariant::monotonicity)
    throw std::invalid_argument("PPI sweep uses the monotonicity-variant principal score");
  if (alpha1_values.empty()) throw std::invalid_argument("empty alpha1 grid");
  for (double a1 : alpha1_values)
    if (a1 <= 0.0) throw std::invalid_argument("alpha1 must be positive");
  std::sort(alpha1_values.begin(), alpha1_values.end());

  detail::PluginAccum acc(d, model, sample);
  const auto pi_all = pi_tilde1_all(score_model, d);
  std::vector<double> pi_t(acc.targets.size());
  for (size_t i = 0; i < acc.targets.size(); ++i) pi_t[i] = pi_all[acc.targets[i]];

  SensitivityGrid grid;
  grid.kind = "ppi";
  const size_t nt = acc.targets.size();
  std::vector<double> c1(nt), c0(nt, -1.0);
  auto eval_at = [&](double a1) {
    for (size_t i = 0; i < nt; ++i) {
      // written as a1 + pi (1 - a1) so that a1 = 1 gives exactly 1.0
      const double denom = a1 + pi_t[i] * (1.0 - a1);
      if (denom <= 0.0) throw std::runtime_error("PPI denominator not positive");
      c1[i] = 1.0 / denom;
    }
    EstimateReport r = acc.evaluate(c1, c0);
    r.alpha1 = a1;
    return r;
  };

  grid.base = eval_at(1.0);
  grid.base.estimator = model.interactions ? "regression_interactions" : "regression";
  for (double a1 : alpha1_values) {
    SensitivityPoint pt;
    pt.alpha1 = a1;
    pt.report = eval_at(a1);
    pt.report.estimator = "sace_ppi";
    grid.points.push_back(pt);
  }
  return grid;
}

// Monotonicity sensitivity sweep: g(x) = mu1(x) - (1 + xi)/(1 + xi alpha0) mu0(x),
// on a frozen matched sample.
inline SensitivityGrid sweep_monotonicity(const Dataset& d, const MatchedSample& sample,
                                          const OutcomeModel& model, std::vector<double> xi_values,
                                          std::vector<double> alpha0_values) {
  if (xi_values.empty() || alpha0_values.empty()) throw std::invalid_argument("empty sensitivity grid");
  auto [p0, p1] = survival_rates(d);
  auto [lo, hi] = xi_bounds(p0, p1);
  for (double xi : xi_values)
    if (xi < lo - 5e-3 || xi > hi + 5e-3)
      throw std::invalid_argument("xi=" + std::to_string(xi) + " outside the empirical bounds [" +
                                  std::to_string(lo) + ", " + std::to_string(hi) + "]");
  for (double a0 : alpha0_values)
    if (a0 <= 0.0) throw std::invalid_argument("alpha0 must be positive");
  std::sort(xi_values.begin(), xi_values.end());
  std::sort(alpha0_values.begin(), alpha0_values.end());

  detail::PluginAccum acc(d, model, sample);
  const size_t nt = acc.targets.size();
  std::vector<double> c1(nt, 1.0), c0(nt);

  SensitivityGrid grid;
  grid.kind = "monotonicity";
  auto eval_at = [&](double xi, double a0) {
    const double kappa = (1.0 + xi) / (1.0 + xi * a0);  // exactly 1 at xi=0 or a0=1
    std::fill(c0.begin(), c0.end(), -kappa);
    EstimateReport r = acc.evaluate(c1, c0);
    r.xi = xi;
    r.alpha0 = a0;
    return r;
  };
  grid.base = eval_at(0.0, 1.0);
  grid.base.estimator = model.interactions ? "regression_interactions" : "regression";
  for (double xi : xi_values)
    for (double a0 : alpha0_values) {
      SensitivityPoint pt;
      pt.xi = xi;
      pt.alpha0 = a0;
      pt.report = eval_at(xi, a0);
      pt.report.estimator = "sace_mono";
      grid.points.push_back(pt);
    }
  return grid;
}

// Variant that refits the CPSR principal score per xi when the distance
// itself depends on pi-tilde (the matched sample is rebuilt per xi).
inline SensitivityGrid sweep_monotonicity_refit(const Dataset& d, DistanceSpec spec, int target_arm,
                                                bool with_replacement, bool outcome_interactions,
                                                std::vector<double> xi_values,
                                                std::vector<double> alpha0_values,
                                                const EmOptions& em_opt = {}) {
  if (!spec.needs_score())
    throw std::invalid_argument("per-xi refit only applies when the distance uses pi-tilde");
  std::sort(xi_values.begin(), xi_values.end());
  SensitivityGrid grid;
  grid.kind = "monotonicity";
  bool have_base = false;
  for (double xi : xi_values) {
    PrincipalScoreModel m = fit_em_cpsr(d, xi, spec.score_model
                                                   ? spec.score_model->covariates
                                                   : d.roles.principal_score_cols,
                                        em_opt);
    DistanceSpec s = spec;
    s.score_model = m;
    MatchedSample sample = match(d, s, target_arm, with_replacement);
    OutcomeModel om = fit_outcome_model(d, sample, outcome_interactions);
    SensitivityGrid sub = sweep_monotonicity(d, sample, om, {xi}, alpha0_values);
    if (!have_base && xi == 0.0) {
      grid.base = sub.base;
      have_base = true;
    }
    for (auto& pt : sub.points) grid.points.push_back(pt);
  }
  if (!have_base && !grid.points.empty()) grid.base = grid.points.front().report;
  return grid;
}

inline std::vector<double> range_grid(double lo, double hi, double step) {
  if (step <= 0.0 || hi < lo) throw std::invalid_argument("bad grid range");
  std::vector<double> out;
  for (double v = lo; v <= hi + 1e-9; v += step) out.push_back(std::round(v * 1e9) / 1e9);
  return out;
}

inline std::vector<double> default_alpha1_grid() { return range_grid(0.5, 2.0, 0.1); }
inline std::vector<double> default_alpha0_grid() { return range_grid(0.5, 2.0, 0.25); }

// 0, 0.1, ... up to the bound, plus the bound rounded to two decimals
inline std::vector<double> default_xi_grid(double p0, double p1) {
  auto [lo, hi] = xi_bounds(p0, p1);
  std::vector<double> out;
  for (double v = std::ceil(lo * 10.0) / 10.0; v <= hi + 1e-12; v += 0.1)
    out.push_back(std::round(v * 10.0) / 10.0);
  const double hi2 = std::round(hi * 100.0) / 100.0;
  if (out.empty() || hi2 > out.back() + 1e-12) out.push_back(hi2);
  return out;
}

inline void save_sensitivity_grid(const SensitivityGrid& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  if (g.kind == "ppi") {
    out << "alpha1,estimate,se,ci_lo,ci_hi\n";
    for (const auto& pt : g.points)
      out << csv::format_double(pt.alpha1) << ',' << csv::format_double(pt.report.estimate) << ','
          << csv::format_double(pt.report.se) << ',' << csv::format_double(pt.report.ci_lo) << ','
          << csv::format_double(pt.report.ci_hi) << '\n';
  } else {
    out << "xi,alpha0,estimate,se,ci_lo,ci_hi\n";
    for (const auto& pt : g.points)
      out << csv::format_double(pt.xi) << ',' << csv::format_double(pt.alpha0) << ','
          << csv::format_double(pt.report.estimate) << ',' << csv::format_double(pt.report.se) << ','
          << csv::format_double(pt.report.ci_lo) << ',' << csv::format_double(pt.report.ci_hi)
          << '\n';
  }
}

}  // namespace sace
