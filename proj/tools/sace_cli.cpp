// Command-line surface for the SACE matching toolkit: principal-score EM,
// matching with balance diagnostics, the estimator menu, sensitivity sweeps
// and the Monte Carlo harness.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sace/dataset.hpp"
#include "sace/estimators.hpp"
#include "sace/matching.hpp"
#include "sace/principal_score.hpp"
#include "sace/rank_tests.hpp"
#include "sace/sensitivity.hpp"
#include "sace/simulation.hpp"

namespace {

using nlohmann::json;

std::vector<double> parse_grid(const std::string& s) {
  // "lo:hi:step" or a comma list
  if (s.find(':') != std::string::npos) {
    const auto parts = sace::csv::split_line(s, ':');
    if (parts.size() != 3) throw std::invalid_argument("grid must be lo:hi:step, got " + s);
    return sace::range_grid(sace::csv::parse_double(parts[0], "grid"),
                            sace::csv::parse_double(parts[1], "grid"),
                            sace::csv::parse_double(parts[2], "grid"));
  }
  std::vector<double> out;
  for (const auto& p : sace::csv::split_line(s, ','))
    if (!p.empty()) out.push_back(sace::csv::parse_double(p, "grid"));
  return out;
}

void write_manifest(const std::string& out_path, const std::string& command, const json& options,
                    std::optional<unsigned long long> seed) {
  json m;
  m["tool"] = "sace";
  m["version"] = SACE_VERSION;
  m["command"] = command;
  m["options"] = options;
  if (seed) m["seed"] = *seed;
  std::ofstream f(out_path + ".manifest.json");
  f << m.dump(2) << '\n';
}

struct PipelineOpts {
  std::string data_path, roles_path, model_path;
  std::string distance = "mahalanobis-caliper";
  std::vector<std::string> distance_columns;
  double caliper_sd = std::nan("");
  double caliper_abs = std::nan("");
  double xi = 0.0;
  bool cpsr = false;
  double em_tol = 1e-6;
  int em_max_iter = 500;
  int em_starts = 1;
  bool replace = true;
  std::string algorithm = "greedy";
  std::string ties = "average";
  int target_arm = 0;
  bool cse = false;

  void add_common(CLI::App* cmd, bool with_match) {
    cmd->add_option("--data", data_path, "input CSV")->required();
    cmd->add_option("--roles", roles_path, "column-roles JSON")->required();
    cmd->add_option("--tol", em_tol, "EM convergence tolerance");
    cmd->add_option("--max-iter", em_max_iter, "EM iteration cap");
    cmd->add_option("--starts", em_starts, "EM random restarts");
    if (with_match) {
      cmd->add_option("--distance", distance,
                      "exact | mahalanobis | pi-tilde | mahalanobis-caliper");
      cmd->add_option("--columns", distance_columns, "distance covariates (default: roles file)");
      cmd->add_option("--caliper-sd", caliper_sd, "caliper as a multiple of SD(pi-tilde)");
      cmd->add_option("--caliper", caliper_abs, "caliper in absolute pi-tilde units");
      cmd->add_option("--model", model_path, "principal score model JSON (else EM is fitted)");
      cmd->add_flag("--replace,!--no-replace", replace, "match with replacement (default on)");
      cmd->add_option("--algorithm", algorithm, "greedy | optimal (without replacement)");
      cmd->add_option("--ties", ties, "average | lowest-id");
      cmd->add_option("--target-arm", target_arm, "0: untreated survivors (SACE), 1: treated");
      cmd->add_flag("--cse", cse, "match on (X0, X1) for conditional separable effects");
    }
  }

  sace::Dataset load() const { return sace::load_dataset(data_path, sace::load_roles(roles_path)); }

  sace::EmOptions em_options() const {
    sace::EmOptions o;
    o.tol = em_tol;
    o.max_iter = em_max_iter;
    o.n_starts = em_starts;
    return o;
  }

  sace::DistanceKind kind() const {
    if (distance == "exact") return sace::DistanceKind::exact;
    if (distance == "mahalanobis") return sace::DistanceKind::mahalanobis;
    if (distance == "pi-tilde") return sace::DistanceKind::pi_tilde_abs_diff;
    if (distance == "mahalanobis-caliper") return sace::DistanceKind::mahalanobis_with_caliper;
    throw std::invalid_argument("unknown distance '" + distance +
                                "' (exact, mahalanobis, pi-tilde, mahalanobis-caliper)");
  }

  sace::PrincipalScoreModel score_model(const sace::Dataset& d) const {
    if (!model_path.empty()) return sace::load_model(model_path);
    if (cpsr) return sace::fit_em_cpsr(d, xi, d.roles.principal_score_cols, em_options());
    return sace::fit_em_monotonicity(d, d.roles.principal_score_cols, em_options());
  }

  sace::DistanceSpec spec(const sace::Dataset& d,
                          std::optional<sace::PrincipalScoreModel>* fitted = nullptr) const {
    sace::DistanceSpec s;
    s.kind = kind();
    s.columns = distance_columns;
    s.use_post = cse;
    if (s.needs_score()) {
      auto m = score_model(d);
      if (fitted) *fitted = m;
      s.score_model = std::move(m);
      if (!std::isnan(caliper_abs)) s.caliper_abs = caliper_abs;
      else s.caliper_sd_multiple = std::isnan(caliper_sd) ? 0.3 : caliper_sd;
    }
    return s;
  }

  sace::MatchAlgorithm algo() const {
    if (algorithm == "greedy") return sace::MatchAlgorithm::greedy;
    if (algorithm == "optimal") return sace::MatchAlgorithm::optimal;
    throw std::invalid_argument("unknown algorithm '" + algorithm + "' (greedy, optimal)");
  }

  sace::TiePolicy tie_policy() const {
    if (ties == "average") return sace::TiePolicy::average;
    if (ties == "lowest-id") return sace::TiePolicy::lowest_id;
    throw std::invalid_argument("unknown tie policy '" + ties + "' (average, lowest-id)");
  }

  json to_json() const {
    json j;
    j["data"] = data_path;
    j["roles"] = roles_path;
    j["distance"] = distance;
    j["columns"] = distance_columns;
    if (!std::isnan(caliper_sd)) j["caliper_sd"] = caliper_sd;
    if (!std::isnan(caliper_abs)) j["caliper"] = caliper_abs;
    j["replace"] = replace;
    j["algorithm"] = algorithm;
    j["ties"] = ties;
    j["target_arm"] = target_arm;
    j["cse"] = cse;
    j["em"] = {{"tol", em_tol}, {"max_iter", em_max_iter}, {"starts", em_starts}};
    if (!model_path.empty()) j["model"] = model_path;
    return j;
  }
};

json strata_report(const sace::Dataset& d, const sace::PrincipalScoreModel& model) {
  auto [p0, p1] = sace::survival_rates(d);
  json rep;
  rep["survival_rates"] = {{"p0", p0}, {"p1", p1}};
  auto [lo, hi] = sace::xi_bounds(p0, p1);
  rep["xi_bounds"] = {lo, hi};
  const auto sp = sace::strata_proportions(p0, p1, model.xi);
  rep["plugin_proportions"] = {{"as", sp.as}, {"har", sp.har}, {"pro", sp.pro}, {"ns", sp.ns}};
  const auto rounded = sace::largest_remainder_round({sp.as, sp.har, sp.pro, sp.ns}, 2);
  rep["plugin_proportions_2dp"] = {
      {"as", rounded[0]}, {"har", rounded[1]}, {"pro", rounded[2]}, {"ns", rounded[3]}};
  const auto avg = sace::average_strata(model, d);
  rep["model_average_proportions"] = {
      {"as", avg.as}, {"har", avg.har}, {"pro", avg.pro}, {"ns", avg.ns}};
  return rep;
}

int cmd_em(const PipelineOpts& po, double xi, bool use_cpsr, const std::string& out,
           const std::string& report_path) {
  sace::Dataset d = po.load();
  sace::PrincipalScoreModel model =
      use_cpsr ? sace::fit_em_cpsr(d, xi, d.roles.principal_score_cols, po.em_options())
               : sace::fit_em_monotonicity(d, d.roles.principal_score_cols, po.em_options());
  sace::save_model(model, out);
  json options = po.to_json();
  options["cpsr"] = use_cpsr;
  options["xi"] = xi;
  write_manifest(out, "em", options, std::nullopt);
  json rep = strata_report(d, model);
  rep["model"] = sace::model_to_json(model);
  if (!report_path.empty()) {
    std::ofstream f(report_path);
    f << rep.dump(2) << '\n';
  }
  std::cout << rep.dump(2) << '\n';
  return model.converged ? 0 : 3;
}

sace::EstimateReport run_one_estimator(const std::string& name, const sace::Dataset& d,
                                       const sace::MatchedSample& sample,
                                       const sace::PrincipalScoreModel* model,
                                       const PipelineOpts& po, unsigned long long seed, int n_boot,
                                       int threads) {
  std::vector<std::string> cols = d.roles.outcome_model_cols;
  if (cols.empty())
    for (const auto& m : d.roles.covariates) cols.push_back(m.name);
  if (po.cse)  // CSE regressions adjust for the post-treatment covariates too
    for (const auto& m : d.roles.post_covariates) cols.push_back(m.name);

  if (name == "crude") return sace::estimate_crude(sample, d);
  if (name == "wls" || name == "ls" || name == "regression")
    return sace::estimate_regression(sace::fit_outcome_model(d, sample, false, cols), sample, d);
  if (name == "wls-i" || name == "ls-i" || name == "regression-i")
    return sace::estimate_regression(sace::fit_outcome_model(d, sample, true, cols), sample, d);
  if (name == "bc")
    return sace::estimate_bias_corrected(
        sample, d, sace::fit_arm_regression(d, 1 - sample.target_arm, cols));
  if (name == "naive") return sace::estimate_naive(d);
  if (name == "composite") return sace::estimate_composite(d);
  if (name == "weighting") {
    if (model == nullptr || model->variant != sace::PsVariant::monotonicity)
      throw std::invalid_argument("weighting needs a monotonicity principal score model");
    return sace::estimate_weighting(d, *model, n_boot, seed, po.em_options(), threads);
  }
  throw std::invalid_argument(
      "unknown estimator '" + name +
      "'; valid: crude, wls, wls-i, ls, ls-i, regression, regression-i, bc, naive, composite, "
      "weighting");
}

int cmd_estimate(const PipelineOpts& po, const std::vector<std::string>& estimators,
                 unsigned long long seed, int n_boot, int threads, const std::string& out,
                 const std::string& balance_path, const std::string& rank_path) {
  sace::Dataset d = po.load();
  std::optional<sace::PrincipalScoreModel> model;

  const bool needs_match = std::any_of(estimators.begin(), estimators.end(), [](const auto& e) {
    return e != "naive" && e != "composite" && e != "weighting";
  });
  const bool wants_weighting =
      std::find(estimators.begin(), estimators.end(), "weighting") != estimators.end();

  sace::DistanceSpec spec;
  std::optional<sace::MatchedSample> sample;
  if (needs_match) {
    spec = po.spec(d, &model);
    sample = sace::match(d, spec, po.target_arm, po.replace, po.algo(), po.tie_policy());
  }
  if (wants_weighting && !model) model = po.score_model(d);
  if (po.cse && !d.roles.post_declared)
    throw std::invalid_argument("CSE estimation requires declared post-treatment covariates");

  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  f << sace::report_csv_header() << '\n';
  for (const auto& name : estimators) {
    sace::EstimateReport r = run_one_estimator(name, d, sample ? *sample : sace::MatchedSample{},
                                               model ? &*model : nullptr, po, seed, n_boot,
                                               threads);
    if (po.cse) {
      r.estimator = "cse_" + r.estimator;
      r.cse_arm = po.target_arm;
    }
    f << sace::report_csv_row(r) << '\n';
  }
  json options = po.to_json();
  options["estimators"] = estimators;
  options["bootstrap"] = n_boot;
  write_manifest(out, "estimate", options, seed);

  if (!balance_path.empty() && sample) {
    auto matched = sace::balance_table(d, *sample);
    sace::save_balance_table(matched, balance_path);
  }
  if (!rank_path.empty() && sample) {
    sace::TestReport t = sample->with_replacement
                             ? sace::aligned_rank(*sample, d, 10000, seed)
                             : static_cast<sace::TestReport>(sace::wilcoxon_signed_rank(*sample, d));
    json jt;
    jt["test"] = t.test;
    jt["statistic"] = t.statistic;
    jt["p_value"] = t.p_value;
    jt["method"] = t.method;
    jt["n_used"] = t.n_used;
    std::ofstream ft(rank_path);
    ft << jt.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Matching-based SACE and CSE estimation with truncation by death"};
  app.require_subcommand(1);

  // ---- em
  PipelineOpts em_po;
  double em_xi = 0.0;
  bool em_cpsr = false;
  std::string em_out = "model.json", em_report;
  auto* em = app.add_subcommand("em", "fit the principal-score EM and report strata proportions");
  em_po.add_common(em, false);
  em->add_option("--xi", em_xi, "fit the CPSR variant at this xi")->check(CLI::NonNegativeNumber);
  em->add_flag("--cpsr", em_cpsr, "CPSR variant (implied by --xi > 0)");
  em->add_option("--out", em_out, "model JSON path");
  em->add_option("--report", em_report, "strata-proportion report path");

  // ---- match
  PipelineOpts match_po;
  std::string match_out = "pairs.csv";
  auto* mt = app.add_subcommand("match", "construct a matched sample");
  match_po.add_common(mt, true);
  mt->add_option("--out", match_out, "pairs CSV path");

  // ---- balance
  PipelineOpts bal_po;
  std::string bal_out = "balance.csv";
  auto* bl = app.add_subcommand("balance", "covariate balance for full, survivor and matched data");
  bal_po.add_common(bl, true);
  bl->add_option("--out", bal_out, "balance CSV path");

  // ---- estimate
  PipelineOpts est_po;
  std::vector<std::string> est_names = {"crude", "wls", "wls-i", "bc"};
  std::string est_out = "estimates.csv", est_balance, est_rank;
  unsigned long long est_seed = 0;
  bool est_seed_given = false;
  int est_boot = 500;
  auto* es = app.add_subcommand("estimate", "match and run the estimator menu");
  est_po.add_common(es, true);
  es->add_option("--estimators", est_names, "comma list")->delimiter(',');
  auto* seed_opt = es->add_option("--seed", est_seed, "seed for bootstrap / permutation draws");
  es->add_option("--bootstrap", est_boot, "weighting bootstrap resamples");
  int est_threads = 0;
  es->add_option("--threads", est_threads, "bootstrap worker cap (0: hardware)");
  es->add_option("--out", est_out, "estimates CSV path");
  es->add_option("--balance", est_balance, "also write the matched balance table");
  es->add_option("--rank-test", est_rank, "also run the matched-sample rank test (JSON out)");

  // ---- sensitivity
  auto* se = app.add_subcommand("sensitivity", "sensitivity sweeps for PPI and monotonicity");
  se->require_subcommand(1);
  PipelineOpts sens_po;
  std::string a1_grid = "0.5:2:0.1", xi_grid, a0_grid = "0.5:2:0.25";
  std::string sens_out = "sensitivity.csv";
  bool sens_interactions = false, refit_per_xi = false;
  auto* sp = se->add_subcommand("ppi", "sweep the PPI ratio alpha1");
  sens_po.add_common(sp, true);
  sp->add_option("--alpha1", a1_grid, "grid lo:hi:step or comma list");
  sp->add_flag("--interactions", sens_interactions, "plug in the interactions outcome model");
  sp->add_option("--out", sens_out, "curve CSV path");
  auto* sm = se->add_subcommand("mono", "sweep the monotonicity parameters (xi, alpha0)");
  sens_po.add_common(sm, true);
  sm->add_option("--xi-grid", xi_grid, "grid lo:hi:step or comma list (default: bounds at 0.1)");
  sm->add_option("--alpha0", a0_grid, "grid lo:hi:step or comma list");
  sm->add_flag("--interactions", sens_interactions, "plug in the interactions outcome model");
  sm->add_flag("--refit-em-per-xi", refit_per_xi, "refit the CPSR EM for each xi");
  sm->add_option("--out", sens_out, "surface CSV path");

  // ---- simulate
  std::string sc_name = "A", sc_pro = "high";
  int sc_k = 5;
  bool sc_mis = false, sc_inter = false;
  long sc_n = 2000, sc_reps = 0;
  unsigned long long sc_seed = 0;
  bool sc_seed_given = false;
  int sc_threads = 0;
  std::vector<std::string> sc_est;
  std::string sc_out = "mc.csv", dump_scenarios;
  double sc_caliper = 0.25;
  auto* si = app.add_subcommand("simulate", "Monte Carlo evaluation of the estimator menu");
  si->add_option("--scenario", sc_name, "A | B");
  si->add_option("--k", sc_k, "covariate count: 3, 5 or 10");
  si->add_option("--pi-pro", sc_pro, "high | low");
  si->add_flag("--misspec-ps", sc_mis, "misspecified principal-score model");
  si->add_flag("--interactions", sc_inter, "outcome model with treatment interactions");
  si->add_option("--n", sc_n, "sample size per replicate");
  si->add_option("--reps", sc_reps, "replicates")->required();
  auto* sc_seed_opt = si->add_option("--seed", sc_seed, "master seed")->required();
  si->add_option("--threads", sc_threads, "worker cap (0: hardware)");
  si->add_option("--estimators", sc_est, "estimator subset")->delimiter(',');
  si->add_option("--caliper-sd", sc_caliper, "caliper multiple of SD(pi-tilde)");
  si->add_option("--out", sc_out, "summary CSV path");
  si->add_option("--dump-scenarios", dump_scenarios, "write the scenario registry JSON and exit");

  try {
    app.parse(argc, argv);

    if (em->parsed())
      return cmd_em(em_po, em_xi, em_cpsr || em_xi > 0.0, em_out, em_report);

    if (mt->parsed()) {
      sace::Dataset d = match_po.load();
      sace::DistanceSpec spec = match_po.spec(d);
      sace::MatchedSample sample =
          sace::match(d, spec, match_po.target_arm, match_po.replace, match_po.algo(), match_po.tie_policy());
      sace::save_matched_sample(sample, d, match_out);
      write_manifest(match_out, "match", match_po.to_json(), std::nullopt);
      std::cout << "matched " << sample.matched_targets().size() << " of "
                << sample.matched_targets().size() + sample.unmatched_targets.size()
                << " targets\n";
      return 0;
    }

    if (bl->parsed()) {
      sace::Dataset d = bal_po.load();
      sace::DistanceSpec spec = bal_po.spec(d);
      sace::MatchedSample sample =
          sace::match(d, spec, bal_po.target_arm, bal_po.replace, bal_po.algo(), bal_po.tie_policy());
      auto write_panel = [&](const std::string& path, const std::vector<sace::BalanceRow>& rows) {
        sace::save_balance_table(rows, path);
      };
      const std::string stem = bal_out.substr(0, bal_out.rfind('.') == std::string::npos
                                                     ? bal_out.size()
                                                     : bal_out.rfind('.'));
      write_panel(stem + "_full.csv", sace::balance_table(d, sace::BalancePopulation::full));
      write_panel(stem + "_survivors.csv", sace::balance_table(d, sace::BalancePopulation::survivors));
      write_panel(stem + "_matched.csv", sace::balance_table(d, sample));
      write_manifest(bal_out, "balance", bal_po.to_json(), std::nullopt);
      return 0;
    }

    if (es->parsed()) {
      const bool stochastic =
          std::find(est_names.begin(), est_names.end(), "weighting") != est_names.end() ||
          !est_rank.empty();
      est_seed_given = seed_opt->count() > 0;
      if (stochastic && !est_seed_given)
        throw std::invalid_argument("--seed is required when weighting or --rank-test is requested");
      return cmd_estimate(est_po, est_names, est_seed, est_boot, est_threads, est_out, est_balance,
                          est_rank);
    }

    if (sp->parsed() || sm->parsed()) {
      sace::Dataset d = sens_po.load();
      std::optional<sace::PrincipalScoreModel> model;
      sace::DistanceSpec spec = sens_po.spec(d, &model);
      if (!model) model = sens_po.score_model(d);
      if (sm->parsed() && refit_per_xi) {
        auto [p0, p1] = sace::survival_rates(d);
        auto xis = xi_grid.empty() ? sace::default_xi_grid(p0, p1) : parse_grid(xi_grid);
        sace::SensitivityGrid g = sace::sweep_monotonicity_refit(
            d, spec, sens_po.target_arm, sens_po.replace, sens_interactions, xis,
            parse_grid(a0_grid), sens_po.em_options());
        sace::save_sensitivity_grid(g, sens_out);
      } else {
        sace::MatchedSample sample = sace::match(d, spec, sens_po.target_arm, sens_po.replace,
                                                 sens_po.algo(), sens_po.tie_policy());
        sace::OutcomeModel om = sace::fit_outcome_model(d, sample, sens_interactions);
        sace::SensitivityGrid g;
        if (sp->parsed()) {
          g = sace::sweep_ppi(d, sample, *model, om, parse_grid(a1_grid));
        } else {
          auto [p0, p1] = sace::survival_rates(d);
          auto xis = xi_grid.empty() ? sace::default_xi_grid(p0, p1) : parse_grid(xi_grid);
          g = sace::sweep_monotonicity(d, sample, om, xis, parse_grid(a0_grid));
        }
        sace::save_sensitivity_grid(g, sens_out);
        std::cout << "base estimate " << g.base.estimate << " (se " << g.base.se << ")\n";
      }
      json options = sens_po.to_json();
      options["alpha1"] = a1_grid;
      options["xi"] = xi_grid;
      options["alpha0"] = a0_grid;
      options["interactions"] = sens_interactions;
      options["refit_em_per_xi"] = refit_per_xi;
      write_manifest(sens_out, sp->parsed() ? "sensitivity-ppi" : "sensitivity-mono", options,
                     std::nullopt);
      return 0;
    }

    if (si->parsed()) {
      if (!dump_scenarios.empty()) {
        std::ofstream f(dump_scenarios);
        f << sace::scenario_registry_json().dump(2) << '\n';
        return 0;
      }
      sc_seed_given = sc_seed_opt->count() > 0;
      (void)sc_seed_given;
      sace::ScenarioConfig cfg = sace::scenario_config(sc_name, sc_pro, sc_k, sc_mis, sc_inter, sc_n);
      sace::RunOptions opt;
      opt.threads = sc_threads;
      opt.caliper_sd_multiple = sc_caliper;
      if (!sc_est.empty()) opt.estimators = sc_est;
      sace::McSummary s = sace::run_scenario(cfg, sc_reps, sc_seed, opt);
      sace::save_mc_summary(s, sc_out);
      json options = {{"scenario", sc_name}, {"pi_pro", sc_pro},       {"k", sc_k},
                      {"misspec_ps", sc_mis}, {"interactions", sc_inter}, {"n", sc_n},
                      {"reps", sc_reps},      {"threads", sc_threads},  {"caliper_sd", sc_caliper},
                      {"estimators", opt.estimators}};
      write_manifest(sc_out, "simulate", options, sc_seed);
      std::cout << "true SACE " << s.truth << ", replicates used " << s.reps_used << " (failures "
                << s.failures << ")\n";
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    json err;
    err["error"] = e.what();
    std::cerr << err.dump() << '\n';
    return 1;
  }
  return 0;
}
