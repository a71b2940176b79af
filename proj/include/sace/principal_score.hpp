#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sace/dataset.hpp"
#include "sace/multinomial.hpp"
#include <json.hpp>

namespace sace {

enum class PsVariant { monotonicity, cpsr };

struct StrataProbs {
  double as = 0, pro = 0, har = 0, ns = 0;
  double sum() const { return as + pro + har + ns; }
};

// pi-tilde^1_as = as/(as+pro): always-survivor share among {A=1,S=1};
// pi-tilde^0_as = as/(as+har): always-survivor share among {A=0,S=1}
struct PiTilde {
  double pi1_as = 1.0;
  double pi0_as = 1.0;
};

struct StrataProportions {
  double as = 0, har = 0, pro = 0, ns = 0;
};

struct EmOptions {
  double tol = 1e-6;      // max absolute coefficient change
  int max_iter = 500;
  double weight_clamp = 1e-12;
  int n_starts = 1;       // >1 adds seeded random restarts
  unsigned long long seed = 0;
  std::optional<Eigen::MatrixXd> init;  // warm start (e.g. bootstrap refits)
  MultinomialOptions inner;
};

struct PrincipalScoreModel {
  PsVariant variant = PsVariant::monotonicity;
  double xi = 0.0;
  // monotonicity: rows {as, ns}, reference pro
  // cpsr: rows {pro, ns}, reference ah (the as+har composite)
  Eigen::MatrixXd coef;
  std::vector<std::string> covariates;
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;  // observed-data log-likelihood at the returned iterate

  StrataProbs predict(const Eigen::VectorXd& x0_sub) const {
    if (x0_sub.size() + 1 != coef.cols())
      throw std::invalid_argument("principal score: covariate dimension mismatch");
    const double lp1 = coef(0, 0) + coef.row(0).tail(x0_sub.size()).dot(x0_sub);
    const double lp2 = coef(1, 0) + coef.row(1).tail(x0_sub.size()).dot(x0_sub);
    const double m = std::max({0.0, lp1, lp2});
    const double e0 = std::exp(-m), e1 = std::exp(lp1 - m), e2 = std::exp(lp2 - m);
    const double den = e0 + e1 + e2;
    StrataProbs p;
    if (variant == PsVariant::monotonicity) {
      p.as = e1 / den;
      p.ns = e2 / den;
      p.pro = e0 / den;
      p.har = 0.0;
    } else {
      const double ah = e0 / den;
      p.pro = e1 / den;
      p.ns = e2 / den;
      p.as = ah / (1.0 + xi);
      p.har = ah * xi / (1.0 + xi);
    }
    return p;
  }

  PiTilde pi_tilde(const Eigen::VectorXd& x0_sub) const {
    StrataProbs p = predict(x0_sub);
    PiTilde t;
    const double d1 = p.as + p.pro;
    t.pi1_as = d1 > 0 ? p.as / d1 : 1.0;
    // exactly 1/(1+xi) under CPSR, 1 under monotonicity
    t.pi0_as = variant == PsVariant::cpsr ? 1.0 / (1.0 + xi) : 1.0;
    return t;
  }
};

inline std::pair<double, double> xi_bounds(double p0, double p1) {
  if (p1 <= 0.0) throw std::invalid_argument("xi_bounds: p1 must be positive");
  if (p0 <= 0.0 || p0 > 1.0 || p1 > 1.0) throw std::invalid_argument("xi_bounds: rates must be in (0,1]");
  const double lo = std::max(0.0, (p0 - p1) / p1);
  const double den = p0 - (1.0 - p1);
  // nonpositive denominator leaves the pi_ns >= 0 constraint vacuous
  const double hi = den <= 0.0 ? 1.0 : std::min(1.0, (1.0 - p1) / den);
  if (lo > hi) throw std::invalid_argument("xi_bounds: empty range (survival rates incompatible with CPSR)");
  return {lo, hi};
}

// stratum proportions implied by the two survival rates and the ratio xi
inline StrataProportions strata_proportions(double p0, double p1, double xi) {
  auto [lo, hi] = xi_bounds(p0, p1);
  const double eps = 1e-12;
  if (xi < lo - eps || xi > hi + eps)
    throw std::invalid_argument("xi outside the empirical bounds [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "]");
  StrataProportions sp;
  sp.as = p0 / (1.0 + xi);
  sp.har = xi * p0 / (1.0 + xi);
  sp.pro = p1 - p0 / (1.0 + xi);
  sp.ns = 1.0 - p1 - xi * p0 / (1.0 + xi);
  if (sp.pro < 0) sp.pro = 0;
  if (sp.ns < 0) sp.ns = 0;
  return sp;
}

// sum-preserving rounding at `decimals` places (largest remainder)
inline std::vector<double> largest_remainder_round(const std::vector<double>& v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  std::vector<double> floors(v.size());
  std::vector<std::pair<double, size_t>> rem(v.size());
  long total = std::lround(scale);  // proportions must sum to 1
  long used = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    double s = v[i] * scale;
    floors[i] = std::floor(s + 1e-9);
    used += static_cast<long>(floors[i]);
    rem[i] = {s - floors[i], i};
  }
  std::sort(rem.begin(), rem.end(), [](auto& a, auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (long j = 0; j < total - used && j < static_cast<long>(v.size()); ++j)
    floors[rem[j].second] += 1.0;
  for (auto& f : floors) f /= scale;
  return floors;
}

namespace detail {

struct EmData {
  Eigen::MatrixXd X;  // n x (1+k), with intercept
  std::vector<int> a, s;
};

inline EmData em_design(const Dataset& d, const std::vector<std::string>& cols) {
  const auto idx = d.role_indices(cols);
  EmData e;
  e.X.resize(d.n(), 1 + static_cast<long>(idx.size()));
  e.X.col(0).setOnes();
  for (size_t j = 0; j < idx.size(); ++j) e.X.col(1 + j) = d.x0.col(idx[j]);
  e.a.resize(d.n());
  e.s.resize(d.n());
  for (long i = 0; i < d.n(); ++i) {
    e.a[i] = d.a[i];
    e.s[i] = d.s[i];
  }
  return e;
}

inline Eigen::MatrixXd lin_preds(const Eigen::MatrixXd& X, const Eigen::MatrixXd& coef) {
  Eigen::MatrixXd lp(X.rows(), 2);
  lp.col(0) = X * coef.row(0).transpose();
  lp.col(1) = X * coef.row(1).transpose();
  return lp;
}

inline double obs_loglik_mono(const EmData& e, const Eigen::MatrixXd& coef) {
  Eigen::MatrixXd lp = lin_preds(e.X, coef);
  double ll = 0.0;
  for (long i = 0; i < e.X.rows(); ++i) {
    const double m = std::max({0.0, lp(i, 0), lp(i, 1)});
    const double e0 = std::exp(-m), eas = std::exp(lp(i, 0) - m), ens = std::exp(lp(i, 1) - m);
    const double den = e0 + eas + ens;
    double cell;
    if (e.a[i] == 0 && e.s[i] == 1) cell = eas / den;            // as
    else if (e.a[i] == 1 && e.s[i] == 0) cell = ens / den;       // ns
    else if (e.a[i] == 1 && e.s[i] == 1) cell = (eas + e0) / den; // as or pro
    else cell = (ens + e0) / den;                                 // ns or pro
    ll += std::log(std::max(cell, 1e-300));
  }
  return ll;
}

inline double obs_loglik_cpsr(const EmData& e, const Eigen::MatrixXd& coef, double xi) {
  Eigen::MatrixXd lp = lin_preds(e.X, coef);  // rows: pro, ns vs reference ah
  double ll = 0.0;
  const double f_as = 1.0 / (1.0 + xi), f_har = xi / (1.0 + xi);
  for (long i = 0; i < e.X.rows(); ++i) {
    const double m = std::max({0.0, lp(i, 0), lp(i, 1)});
    const double eah = std::exp(-m), epro = std::exp(lp(i, 0) - m), ens = std::exp(lp(i, 1) - m);
    const double den = eah + epro + ens;
    double cell;
    if (e.a[i] == 0 && e.s[i] == 1) cell = eah / den;                       // as or har
    else if (e.a[i] == 0 && e.s[i] == 0) cell = (ens + epro) / den;         // ns or pro
    else if (e.a[i] == 1 && e.s[i] == 1) cell = (eah * f_as + epro) / den;  // as or pro
    else cell = (ens + eah * f_har) / den;                                  // ns or har
    ll += std::log(std::max(cell, 1e-300));
  }
  return ll;
}

struct EmRun {
  Eigen::MatrixXd coef;
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;
};

// One EM pass from a given start. E-step memberships follow the four
// observed (A,S) cells; each ambiguous unit expands into two weighted rows.
template <typename EStep, typename ObsLik>
EmRun run_em(const EmData& e, const Eigen::MatrixXd& start, const EmOptions& opt, EStep estep,
             ObsLik obs_lik) {
  const long n = e.X.rows();
  const long p = e.X.cols();
  EmRun run;
  run.coef = start;
  double prev_ll = obs_lik(run.coef);

  Eigen::MatrixXd Xa(2 * n, p);
  std::vector<int> cat(2 * n);
  Eigen::VectorXd w(2 * n);

  for (int it = 0; it < opt.max_iter; ++it) {
    Eigen::MatrixXd lp = lin_preds(e.X, run.coef);
    long m = 0;
    for (long i = 0; i < n; ++i) {
      auto rows = estep(i, lp(i, 0), lp(i, 1));
      for (const auto& [c, wi] : rows) {
        double wc = wi < opt.weight_clamp ? 0.0 : wi;
        if (wc == 0.0) continue;
        Xa.row(m) = e.X.row(i);
        cat[m] = c;
        w[m] = wc;
        ++m;
      }
    }
    MultinomialFit mstep = fit_weighted_multinomial(Xa.topRows(m), {cat.begin(), cat.begin() + m},
                                                    w.head(m), 3, &run.coef, opt.inner);
    const double delta = (mstep.coef - run.coef).cwiseAbs().maxCoeff();
    run.coef = mstep.coef;
    run.iterations = it + 1;
    const double ll = obs_lik(run.coef);
    if (ll < prev_ll - 1e-6 * (1.0 + std::fabs(prev_ll)))
      throw std::runtime_error("EM ascent violated: observed-data log-likelihood decreased");
    prev_ll = ll;
    if (delta < opt.tol) {
      run.converged = true;
      break;
    }
  }
  run.loglik = prev_ll;
  return run;
}

template <typename EStep, typename ObsLik>
EmRun run_em_multistart(const EmData& e, const EmOptions& opt, EStep estep, ObsLik obs_lik) {
  Eigen::MatrixXd start0 = opt.init ? *opt.init : Eigen::MatrixXd::Zero(2, e.X.cols());
  if (start0.rows() != 2 || start0.cols() != e.X.cols())
    throw std::invalid_argument("EM init has the wrong shape");
  EmRun best = run_em(e, start0, opt, estep, obs_lik);
  if (opt.n_starts > 1) {
    std::mt19937_64 gen(opt.seed);
    for (int s = 1; s < opt.n_starts; ++s) {
      Eigen::MatrixXd start(2, e.X.cols());
      for (long i = 0; i < start.size(); ++i)
        start.data()[i] = 0.2 * std::generate_canonical<double, 53>(gen) - 0.1;
      EmRun r = run_em(e, start, opt, estep, obs_lik);
      if (r.loglik > best.loglik) best = r;
    }
  }
  return best;
}

}  // namespace detail

// EM under monotonicity. Categories: pro=0 (ref), as=1, ns=2.
inline PrincipalScoreModel fit_em_monotonicity(const Dataset& d, const std::vector<std::string>& cols,
                                               const EmOptions& opt = {}) {
  detail::EmData e = detail::em_design(d, cols);
  long n01 = 0, n11 = 0, n10 = 0, n00 = 0;
  for (long i = 0; i < d.n(); ++i) {
    if (e.a[i] == 0 && e.s[i] == 1) ++n01;
    else if (e.a[i] == 1 && e.s[i] == 1) ++n11;
    else if (e.a[i] == 1 && e.s[i] == 0) ++n10;
    else ++n00;
  }
  if (n01 + n11 == 0 || n10 + n00 == 0)
    throw std::invalid_argument("EM unidentified: a stratum category never appears in any (A,S) cell");

  auto estep = [&](long i, double lp_as, double lp_ns)
      -> std::vector<std::pair<int, double>> {
    if (e.a[i] == 0 && e.s[i] == 1) return {{1, 1.0}};  // as with probability 1
    if (e.a[i] == 1 && e.s[i] == 0) return {{2, 1.0}};  // ns with probability 1
    if (e.a[i] == 1 && e.s[i] == 1) {
      const double w_as = 1.0 / (1.0 + std::exp(-lp_as));  // as vs pro
      return {{1, w_as}, {0, 1.0 - w_as}};
    }
    const double w_ns = 1.0 / (1.0 + std::exp(-lp_ns));  // ns vs pro
    return {{2, w_ns}, {0, 1.0 - w_ns}};
  };
  auto ll = [&](const Eigen::MatrixXd& coef) { return detail::obs_loglik_mono(e, coef); };
  detail::EmRun run = detail::run_em_multistart(e, opt, estep, ll);

  PrincipalScoreModel m;
  m.variant = PsVariant::monotonicity;
  m.coef = run.coef;
  m.covariates = cols;
  m.converged = run.converged;
  m.iterations = run.iterations;
  m.loglik = run.loglik;
  return m;
}

// EM without monotonicity, for a fixed ratio xi = pi_har/pi_as.
// Categories: ah=0 (ref), pro=1, ns=2.
inline PrincipalScoreModel fit_em_cpsr(const Dataset& d, double xi, const std::vector<std::string>& cols,
                                       const EmOptions& opt = {}) {
  if (xi < 0.0) throw std::invalid_argument("xi must be nonnegative");
  detail::EmData e = detail::em_design(d, cols);
  auto estep = [&, xi](long i, double lp_pro, double lp_ns)
      -> std::vector<std::pair<int, double>> {
    if (e.a[i] == 0 && e.s[i] == 1) return {{0, 1.0}};  // ah with probability 1
    if (e.a[i] == 0 && e.s[i] == 0) {
      const double w_ns = 1.0 / (1.0 + std::exp(lp_pro - lp_ns));  // ns vs pro
      return {{2, w_ns}, {1, 1.0 - w_ns}};
    }
    if (e.a[i] == 1 && e.s[i] == 1) {
      const double w_ah = 1.0 / (1.0 + (1.0 + xi) * std::exp(lp_pro));  // ah vs pro
      return {{0, w_ah}, {1, 1.0 - w_ah}};
    }
    // A=1, S=0: ah (via harmed) vs ns
    const double w_ah = xi / (xi + (1.0 + xi) * std::exp(lp_ns));
    return {{0, w_ah}, {2, 1.0 - w_ah}};
  };
  auto ll = [&, xi](const Eigen::MatrixXd& coef) { return detail::obs_loglik_cpsr(e, coef, xi); };
  detail::EmRun run = detail::run_em_multistart(e, opt, estep, ll);

  PrincipalScoreModel m;
  m.variant = PsVariant::cpsr;
  m.xi = xi;
  m.coef = run.coef;
  m.covariates = cols;
  m.converged = run.converged;
  m.iterations = run.iterations;
  m.loglik = run.loglik;
  return m;
}

// per-unit predicted probabilities for a whole dataset
inline std::vector<StrataProbs> predict_all(const PrincipalScoreModel& m, const Dataset& d) {
  const auto idx = d.role_indices(m.covariates);
  std::vector<StrataProbs> out(d.n());
  Eigen::VectorXd x(idx.size());
  for (long i = 0; i < d.n(); ++i) {
    for (size_t j = 0; j < idx.size(); ++j) x[j] = d.x0(i, idx[j]);
    out[i] = m.predict(x);
  }
  return out;
}

inline std::vector<double> pi_tilde1_all(const PrincipalScoreModel& m, const Dataset& d) {
  const auto probs = predict_all(m, d);
  std::vector<double> out(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) {
    const double den = probs[i].as + probs[i].pro;
    out[i] = den > 0 ? probs[i].as / den : 1.0;
  }
  return out;
}

// model-averaged stratum proportions over the sample
inline StrataProportions average_strata(const PrincipalScoreModel& m, const Dataset& d) {
  const auto probs = predict_all(m, d);
  StrataProportions sp;
  for (const auto& p : probs) {
    sp.as += p.as;
    sp.har += p.har;
    sp.pro += p.pro;
    sp.ns += p.ns;
  }
  const double n = static_cast<double>(probs.size());
  sp.as /= n; sp.har /= n; sp.pro /= n; sp.ns /= n;
  return sp;
}

inline nlohmann::json model_to_json(const PrincipalScoreModel& m) {
  nlohmann::json j;
  j["variant"] = m.variant == PsVariant::monotonicity ? "monotonicity" : "cpsr";
  j["xi"] = m.xi;
  j["covariates"] = m.covariates;
  std::vector<std::vector<double>> rows;
  for (long r = 0; r < m.coef.rows(); ++r) {
    std::vector<double> row(m.coef.cols());
    for (long c = 0; c < m.coef.cols(); ++c) row[c] = m.coef(r, c);
    rows.push_back(std::move(row));
  }
  j["coefficients"] = rows;
  j["converged"] = m.converged;
  j["iterations"] = m.iterations;
  j["loglik"] = m.loglik;
  return j;
}

inline PrincipalScoreModel model_from_json(const nlohmann::json& j) {
  PrincipalScoreModel m;
  const std::string v = j.at("variant").get<std::string>();
  if (v == "monotonicity") m.variant = PsVariant::monotonicity;
  else if (v == "cpsr") m.variant = PsVariant::cpsr;
  else throw std::invalid_argument("unknown principal score variant: " + v);
  m.xi = j.at("xi").get<double>();
  m.covariates = j.at("covariates").get<std::vector<std::string>>();
  auto rows = j.at("coefficients").get<std::vector<std::vector<double>>>();
  m.coef.resize(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c) m.coef(r, c) = rows[r][c];
  m.converged = j.value("converged", false);
  m.iterations = j.value("iterations", 0);
  m.loglik = j.value("loglik", 0.0);
  return m;
}

inline void save_model(const PrincipalScoreModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << model_to_json(m).dump(2) << '\n';
}

inline PrincipalScoreModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model file: " + path);
  nlohmann::json j;
  in >> j;
  return model_from_json(j);
}

}  // namespace sace
