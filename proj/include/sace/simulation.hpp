#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sace/dataset.hpp"
#include "sace/estimators.hpp"
#include "sace/matching.hpp"
#include "sace/principal_score.hpp"
#include "sace/rng.hpp"
#include <json.hpp>

namespace sace {

enum class Stratum { always_survivor, protected_, never_survivor };

struct ScenarioConfig {
  std::string scenario = "A";   // A: pi_as = 0.5, B: pi_as = 0.75
  std::string pi_pro = "high";  // high | low
  int k = 5;
  bool ps_misspecified = false;
  bool outcome_interactions = false;
  long n = 2000;
  // stratum model: multinomial logit with the protected as reference,
  // slope c_g repeated across the k covariates
  double gamma0_as = 0, c_as = 0, gamma0_ns = 0, c_ns = 0;
  // misspecified variant appends square/log terms for covariates 1 and 2
  double mis_sq_as = 0, mis_log_as = 0, mis_sq_ns = 0, mis_log_ns = 0;
  // outcome means per arm
  double beta0_1 = 0, beta0_0 = 0;
  Eigen::VectorXd beta_1, beta_0;

  std::string key() const {
    return scenario + "/" + pi_pro + "/k" + std::to_string(k) + (ps_misspecified ? "/mis" : "/ok") +
           (outcome_interactions ? "/inter" : "/plain");
  }
};

// squared and log-transformed terms appended to the stratum linear predictor
// under principal-score misspecification (analysis models stay linear)
inline std::pair<double, double> misspecify_ps(const Eigen::VectorXd& x0) {
  if (x0.size() < 2) throw std::invalid_argument("misspecify_ps needs k >= 2");
  const double sq = x0[0] * x0[0];
  const double lg = std::log(std::max(std::fabs(x0[1]), 1e-8));
  return {sq, lg};
}

namespace detail {

struct GammaRow {
  double g0as, cas, g0ns, cns, sq_as, log_as, sq_ns, log_ns;
};

// registered design points, keyed by scenario / pi_pro level / k
inline const std::map<std::string, GammaRow>& gamma_registry() {
  static const std::map<std::string, GammaRow> reg = {
      {"A/high/3", {-0.1, 0.27, -0.52, -0.6, -0.81, 0.81, 1.8, -1.8}},
      {"A/high/5", {-0.05, 0.16, -0.4, -0.25, -0.48, 0.48, 0.75, -0.75}},
      {"A/high/10", {-0.954, 0.25, -0.31, -0.16, -0.75, 0.75, 0.48, -0.48}},
      {"A/low/3", {-0.07, 1.24, 1.25, 0.24, -3.72, 3.72, -0.72, 0.7}},
      {"A/low/5", {0.45, 0.75, 0.62, 0.6, -2.25, 2.25, -1.8, 1.8}},
      {"A/low/10", {0.024, 0.41, 0.26, 0.32, -1.23, 1.23, -0.96, 0.96}},
      {"B/high/3", {0.6, 1.325, -0.25, 0.25, -3.975, 3.975, -0.75, 0.75}},
      {"B/high/5", {-0.5, 1.5, -0.25, 0.25, -4.5, 4.5, -0.75, 0.75}},
      {"B/high/10", {-0.954, 0.25, -0.31, -0.16, -0.75, 0.75, 0.48, -0.48}},
      {"B/low/3", {0.84, 1.2, 0.32, -0.2, -3.6, 3.6, 0.6, -0.6}},
      {"B/low/5", {-0.12, 1.25, 0.45, -0.2, -3.75, 3.75, 0.6, -0.6}},
      {"B/low/10", {-0.45, 0.61, 0.4, -0.02, -1.83, 1.83, 0.06, -0.06}},
  };
  return reg;
}

inline std::vector<double> beta_slopes(int k, int arm, bool interactions) {
  if (!interactions) {
    if (k == 3) return {3, 4, 5};
    if (k == 5) return {3, 4, 5, 1, 3};
    if (k == 10) return {5, 2, 1, 3, 5, 5, 2, 1, 3, 5};
  } else {
    if (arm == 1) {
      if (k == 3) return {5, 2, 1};
      if (k == 5) return {5, 2, 1, 3, 5};
      if (k == 10) return {5, 2, 1, 3, 5, 5, 2, 1, 3, 5};
    } else {
      if (k == 3) return {3, 3, 0};
      if (k == 5) return {3, 3, 0, 1, 3};
      if (k == 10) return {3, 3, 0, 1, 3, 3, 3, 0, 1, 3};
    }
  }
  throw std::invalid_argument("registered scenarios have k in {3, 5, 10}");
}

}  // namespace detail

inline ScenarioConfig scenario_config(const std::string& scenario, const std::string& pi_pro, int k,
                                      bool ps_misspecified, bool outcome_interactions, long n = 2000) {
  const std::string key = scenario + "/" + pi_pro + "/" + std::to_string(k);
  auto it = detail::gamma_registry().find(key);
  if (it == detail::gamma_registry().end())
    throw std::invalid_argument("unknown scenario: " + key +
                                " (expect A|B / high|low / k in {3,5,10})");
  const auto& g = it->second;
  ScenarioConfig cfg;
  cfg.scenario = scenario;
  cfg.pi_pro = pi_pro;
  cfg.k = k;
  cfg.ps_misspecified = ps_misspecified;
  cfg.outcome_interactions = outcome_interactions;
  cfg.n = n;
  cfg.gamma0_as = g.g0as;
  cfg.c_as = g.cas;
  cfg.gamma0_ns = g.g0ns;
  cfg.c_ns = g.cns;
  if (ps_misspecified) {
    cfg.mis_sq_as = g.sq_as;
    cfg.mis_log_as = g.log_as;
    cfg.mis_sq_ns = g.sq_ns;
    cfg.mis_log_ns = g.log_ns;
  }
  cfg.beta0_1 = 22;
  cfg.beta0_0 = 20;
  auto b1 = detail::beta_slopes(k, 1, outcome_interactions);
  auto b0 = detail::beta_slopes(k, 0, outcome_interactions);
  cfg.beta_1 = Eigen::Map<Eigen::VectorXd>(b1.data(), b1.size());
  cfg.beta_0 = Eigen::Map<Eigen::VectorXd>(b0.data(), b0.size());
  return cfg;
}

inline nlohmann::json scenario_registry_json() {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [key, g] : detail::gamma_registry()) {
    nlohmann::json j;
    j["key"] = key;
    j["gamma0_as"] = g.g0as;
    j["c_as"] = g.cas;
    j["gamma0_ns"] = g.g0ns;
    j["c_ns"] = g.cns;
    j["misspec"] = {{"square_as", g.sq_as},
                    {"log_as", g.log_as},
                    {"square_ns", g.sq_ns},
                    {"log_ns", g.log_ns}};
    const int k = std::stoi(key.substr(key.rfind('/') + 1));
    j["beta"] = {{"no_interactions",
                  {{"beta0_1", 22}, {"slopes_1", detail::beta_slopes(k, 1, false)},
                   {"beta0_0", 20}, {"slopes_0", detail::beta_slopes(k, 0, false)}}},
                 {"interactions",
                  {{"beta0_1", 22}, {"slopes_1", detail::beta_slopes(k, 1, true)},
                   {"beta0_0", 20}, {"slopes_0", detail::beta_slopes(k, 0, true)}}}};
    out.push_back(j);
  }
  return out;
}

struct TruthRecord {
  std::vector<Stratum> stratum;
  Eigen::VectorXd y1, y0;  // NaN where the potential outcome is undefined
};

struct SimulatedData {
  Dataset data;
  TruthRecord truth;
};

namespace detail {

inline StrataProbs dgm_probs(const ScenarioConfig& cfg, const Eigen::VectorXd& x) {
  const double sx = x.sum();
  double lp_as = cfg.gamma0_as + cfg.c_as * sx;
  double lp_ns = cfg.gamma0_ns + cfg.c_ns * sx;
  if (cfg.ps_misspecified) {
    const auto [sq, lg] = misspecify_ps(x);
    lp_as += cfg.mis_sq_as * sq + cfg.mis_log_as * lg;
    lp_ns += cfg.mis_sq_ns * sq + cfg.mis_log_ns * lg;
  }
  const double m = std::max({0.0, lp_as, lp_ns});
  const double e0 = std::exp(-m), ea = std::exp(lp_as - m), en = std::exp(lp_ns - m);
  const double den = e0 + ea + en;
  StrataProbs p;
  p.as = ea / den;
  p.pro = e0 / den;
  p.ns = en / den;
  return p;
}

}  // namespace detail

// X ~ N_k(0.5, I); strata from the multinomial model (monotone world: no
// harmed); correlated always-survivor errors (rho = 0.4); A ~ Bernoulli(0.5).
inline SimulatedData generate_dataset(const ScenarioConfig& cfg, std::uint64_t seed) {
  rng::Prng prng(seed);
  const long n = cfg.n;
  const int k = cfg.k;
  SimulatedData out;
  Dataset& d = out.data;
  d.ids.resize(n);
  d.x0.resize(n, k);
  d.x1.resize(n, 0);
  d.a.resize(n);
  d.s.resize(n);
  d.y.resize(n);
  out.truth.stratum.resize(n);
  out.truth.y1.resize(n);
  out.truth.y0.resize(n);

  const double rho = 0.4;
  const double rho_c = std::sqrt(1.0 - rho * rho);
  for (long i = 0; i < n; ++i) {
    d.ids[i] = static_cast<int>(i + 1);
    for (int j = 0; j < k; ++j) d.x0(i, j) = 0.5 + prng.normal();
    const double u = prng.uniform01();
    const int a = prng.bernoulli(0.5);
    const double z1 = prng.normal();
    const double z2 = prng.normal();

    const StrataProbs p = detail::dgm_probs(cfg, d.x0.row(i));
    Stratum g;
    if (u < p.as) g = Stratum::always_survivor;
    else if (u < p.as + p.pro) g = Stratum::protected_;
    else g = Stratum::never_survivor;
    out.truth.stratum[i] = g;

    const double mean1 = cfg.beta0_1 + cfg.beta_1.dot(d.x0.row(i));
    const double mean0 = cfg.beta0_0 + cfg.beta_0.dot(d.x0.row(i));
    double y1 = std::nan(""), y0 = std::nan("");
    if (g == Stratum::always_survivor) {
      y1 = mean1 + z1;
      y0 = mean0 + rho * z1 + rho_c * z2;
    } else if (g == Stratum::protected_) {
      y1 = mean1 + z1;  // same marginal law; Y(0) undefined
    }
    out.truth.y1[i] = y1;
    out.truth.y0[i] = y0;

    const int s1 = g != Stratum::never_survivor ? 1 : 0;
    const int s0 = g == Stratum::always_survivor ? 1 : 0;
    d.a[i] = a;
    d.s[i] = a == 1 ? s1 : s0;
    d.y[i] = d.s[i] == 1 ? (a == 1 ? y1 : y0) : std::nan("");
  }

  Roles r;
  r.treatment_col = "a";
  r.survival_col = "s";
  r.outcome_col = "y";
  for (int j = 0; j < k; ++j) {
    ColumnMeta m;
    m.name = "x" + std::to_string(j + 1);
    r.covariates.push_back(m);
    r.distance_cols.push_back(m.name);
    r.principal_score_cols.push_back(m.name);
    r.outcome_model_cols.push_back(m.name);
  }
  d.roles = std::move(r);
  return out;
}

// E[Y(1) - Y(0) | always-survivor]: exact intercept difference without
// interactions, otherwise a large Monte Carlo average of the mean contrast
inline double true_sace(const ScenarioConfig& cfg, long oracle_n = 1000000, std::uint64_t seed = 20201021) {
  if (!cfg.outcome_interactions) return cfg.beta0_1 - cfg.beta0_0;
  rng::Prng prng(seed);
  double acc = 0.0, w = 0.0;
  Eigen::VectorXd x(cfg.k);
  for (long i = 0; i < oracle_n; ++i) {
    for (int j = 0; j < cfg.k; ++j) x[j] = 0.5 + prng.normal();
    const StrataProbs p = detail::dgm_probs(cfg, x);
    if (prng.uniform01() < p.as) {
      acc += (cfg.beta0_1 - cfg.beta0_0) + (cfg.beta_1 - cfg.beta_0).dot(x);
      w += 1.0;
    }
  }
  if (w == 0) throw std::runtime_error("true_sace oracle produced no always-survivors");
  return acc / w;
}

struct McRow {
  std::string estimator;
  double mean = 0, emp_sd = 0, est_se = std::nan(""), mse = 0, cp95 = std::nan("");
  long reps = 0;
};

struct McSummary {
  ScenarioConfig cfg;
  double truth = 0;
  long reps_requested = 0;
  long reps_used = 0;
  long failures = 0;
  std::vector<McRow> rows;
};

struct RunOptions {
  double caliper_sd_multiple = 0.25;  // the simulation studies' caliper
  int threads = 0;                    // 0: hardware concurrency
  EmOptions em;
  std::vector<std::string> estimators = {"naive",    "composite", "crude_nr", "ls",
                                         "ls_i",     "crude_wr",  "wls",      "wls_i",
                                         "bc",       "weighting"};
  long oracle_n = 1000000;
};

namespace detail {

struct RepResult {
  bool failed = false;
  std::map<std::string, EstimateReport> est;
};

inline RepResult run_replicate(const ScenarioConfig& cfg, std::uint64_t seed, const RunOptions& opt) {
  RepResult rr;
  SimulatedData sim = generate_dataset(cfg, seed);
  const Dataset& d = sim.data;

  auto wants = [&](const std::string& name) {
    return std::find(opt.estimators.begin(), opt.estimators.end(), name) != opt.estimators.end();
  };

  if (wants("naive")) rr.est["naive"] = estimate_naive(d);
  if (wants("composite")) rr.est["composite"] = estimate_composite(d);

  const bool needs_model = wants("crude_nr") || wants("ls") || wants("ls_i") || wants("crude_wr") ||
                           wants("wls") || wants("wls_i") || wants("bc") || wants("weighting");
  if (!needs_model) return rr;

  PrincipalScoreModel model;
  try {
    model = fit_em_monotonicity(d, d.roles.principal_score_cols, opt.em);
  } catch (const std::exception&) {
    rr.failed = true;
    return rr;
  }
  if (!model.converged) {
    rr.failed = true;
    return rr;
  }

  if (wants("weighting")) rr.est["weighting"] = estimate_weighting(d, model, /*n_boot=*/0);

  DistanceSpec spec;
  spec.kind = DistanceKind::mahalanobis_with_caliper;
  spec.caliper_sd_multiple = opt.caliper_sd_multiple;
  spec.score_model = model;

  try {
    if (wants("crude_wr") || wants("wls") || wants("wls_i") || wants("bc")) {
      MatchedSample wr = match(d, spec, 0, /*with_replacement=*/true);
      if (wants("crude_wr")) {
        rr.est["crude_wr"] = estimate_crude(wr, d);
        rr.est["crude_wr"].estimator = "crude_wr";
      }
      if (wants("wls")) {
        rr.est["wls"] = estimate_regression(fit_outcome_model(d, wr, false), wr, d);
        rr.est["wls"].estimator = "wls";
      }
      if (wants("wls_i")) {
        rr.est["wls_i"] = estimate_regression(fit_outcome_model(d, wr, true), wr, d);
        rr.est["wls_i"].estimator = "wls_i";
      }
      if (wants("bc")) {
        rr.est["bc"] = estimate_bias_corrected(wr, d, fit_arm_regression(d, 1));
        rr.est["bc"].estimator = "bc";
      }
    }
    if (wants("crude_nr") || wants("ls") || wants("ls_i")) {
      MatchedSample nr = match(d, spec, 0, /*with_replacement=*/false, MatchAlgorithm::greedy);
      if (wants("crude_nr")) {
        rr.est["crude_nr"] = estimate_crude(nr, d);
        rr.est["crude_nr"].estimator = "crude_nr";
      }
      if (wants("ls")) {
        rr.est["ls"] = estimate_regression(fit_outcome_model(d, nr, false), nr, d);
        rr.est["ls"].estimator = "ls";
      }
      if (wants("ls_i")) {
        rr.est["ls_i"] = estimate_regression(fit_outcome_model(d, nr, true), nr, d);
        rr.est["ls_i"].estimator = "ls_i";
      }
    }
  } catch (const std::exception&) {
    rr.failed = true;
    rr.est.clear();
  }
  return rr;
}

}  // namespace detail

inline McSummary run_scenario(const ScenarioConfig& cfg, long reps, std::uint64_t seed,
                              const RunOptions& opt = {}) {
  if (reps < 1) throw std::invalid_argument("reps must be >= 1");
  McSummary out;
  out.cfg = cfg;
  out.reps_requested = reps;
  out.truth = true_sace(cfg, opt.oracle_n);

  std::vector<detail::RepResult> results(reps);
  const long hw = static_cast<long>(std::thread::hardware_concurrency());
  const long n_threads =
      std::max<long>(1, std::min<long>(opt.threads > 0 ? opt.threads : (hw > 0 ? hw : 1), reps));
  std::vector<std::thread> pool;
  std::mutex next_mu;
  long next = 0;
  auto worker = [&]() {
    while (true) {
      long r;
      {
        std::lock_guard<std::mutex> lk(next_mu);
        if (next >= reps) return;
        r = next++;
      }
      results[r] = detail::run_replicate(cfg, rng::derive_seed(seed, r), opt);
    }
  };
  for (long t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::map<std::string, std::vector<EstimateReport>> by_est;
  for (const auto& rr : results) {
    if (rr.failed) {
      ++out.failures;
      continue;
    }
    ++out.reps_used;
    for (const auto& [name, rep] : rr.est) by_est[name].push_back(rep);
  }

  for (const auto& name : opt.estimators) {
    auto it = by_est.find(name);
    if (it == by_est.end()) continue;
    const auto& v = it->second;
    McRow row;
    row.estimator = name;
    row.reps = static_cast<long>(v.size());
    double m = 0;
    for (const auto& r : v) m += r.estimate;
    m /= static_cast<double>(v.size());
    double ss = 0, mse = 0, se_sum = 0, cover = 0;
    long se_n = 0;
    for (const auto& r : v) {
      ss += (r.estimate - m) * (r.estimate - m);
      mse += (r.estimate - out.truth) * (r.estimate - out.truth);
      if (!std::isnan(r.se)) {
        se_sum += r.se;
        ++se_n;
        if (r.ci_lo <= out.truth && out.truth <= r.ci_hi) cover += 1.0;
      }
    }
    row.mean = m;
    row.emp_sd = v.size() > 1 ? std::sqrt(ss / (static_cast<double>(v.size()) - 1)) : 0.0;
    row.mse = mse / static_cast<double>(v.size());
    if (se_n > 0) {
      row.est_se = se_sum / static_cast<double>(se_n);
      row.cp95 = cover / static_cast<double>(se_n);
    }
    out.rows.push_back(row);
  }
  return out;
}

inline void save_mc_summary(const McSummary& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "scenario,pi_pro,k,ps_misspecified,interactions,n,reps_used,failures,true_sace,"
         "estimator,mean,emp_sd,est_se,mse,cp95\n";
  for (const auto& r : s.rows) {
    out << s.cfg.scenario << ',' << s.cfg.pi_pro << ',' << s.cfg.k << ','
        << (s.cfg.ps_misspecified ? 1 : 0) << ',' << (s.cfg.outcome_interactions ? 1 : 0) << ','
        << s.cfg.n << ',' << s.reps_used << ',' << s.failures << ','
        << csv::format_double(s.truth) << ',' << r.estimator << ',' << csv::format_double(r.mean)
        << ',' << csv::format_double(r.emp_sd) << ','
        << (std::isnan(r.est_se) ? std::string() : csv::format_double(r.est_se)) << ','
        << csv::format_double(r.mse) << ','
        << (std::isnan(r.cp95) ? std::string() : csv::format_double(r.cp95)) << '\n';
  }
}

}  // namespace sace
