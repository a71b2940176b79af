#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sace/rng.hpp"
#include "sace/sensitivity.hpp"
#include "testutil.hpp"

using namespace sace;

namespace {

// three-stratum world with all four observed cells populated
Dataset sens_world(long n, unsigned long long seed) {
  rng::Prng prng(seed);
  std::vector<std::vector<double>> x;
  std::vector<int> a, s;
  std::vector<double> y;
  for (long i = 0; i < n; ++i) {
    const double xv = prng.normal();
    const double las = 0.5 + 0.6 * xv, lns = -0.6 - 0.4 * xv;
    const double den = 1 + std::exp(las) + std::exp(lns);
    const double u = prng.uniform01();
    const int g = u < std::exp(las) / den ? 0 : (u < (std::exp(las) + std::exp(lns)) / den ? 2 : 1);
    const int ai = prng.bernoulli(0.5);
    const int si = ai ? (g != 2) : (g == 0);
    const double yi = 10.0 + 2.0 * ai + 1.5 * xv + prng.normal();
    x.push_back({xv});
    a.push_back(ai);
    s.push_back(si);
    y.push_back(si ? yi : 0.0);
  }
  return testutil::make_dataset(x, a, s, y);
}

struct Fitted {
  Dataset d;
  PrincipalScoreModel model;
  MatchedSample sample;
  OutcomeModel outcome;
};

Fitted fit_world(bool interactions, unsigned long long seed = 7) {
  Fitted f{sens_world(900, seed), {}, {}, {}};
  f.model = fit_em_monotonicity(f.d, {"x1"});
  DistanceSpec spec;
  spec.kind = DistanceKind::mahalanobis_with_caliper;
  spec.score_model = f.model;
  spec.caliper_sd_multiple = 0.25;
  f.sample = match(f.d, spec, 0, true);
  f.outcome = fit_outcome_model(f.d, f.sample, interactions);
  return f;
}

}  // namespace

TEST_CASE("alpha1 = 1 reproduces the base regression estimate bit for bit") {
  for (bool inter : {false, true}) {
    Fitted f = fit_world(inter);
    SensitivityGrid g = sweep_ppi(f.d, f.sample, f.model, f.outcome, {0.5, 1.0, 1.5});
    EstimateReport base = estimate_regression(f.outcome, f.sample, f.d);
    const auto& p1 = g.points[1];
    REQUIRE(p1.alpha1 == 1.0);
    CHECK(p1.report.estimate == base.estimate);
    CHECK(p1.report.se == base.se);
    CHECK(g.base.estimate == base.estimate);
  }
}

TEST_CASE("xi = 0 and alpha0 = 1 grid points reproduce the base estimate bit for bit") {
  for (bool inter : {false, true}) {
    Fitted f = fit_world(inter);
    SensitivityGrid g =
        sweep_monotonicity(f.d, f.sample, f.outcome, {0.0, 0.2}, {0.5, 1.0, 2.0});
    EstimateReport base = estimate_regression(f.outcome, f.sample, f.d);
    for (const auto& pt : g.points)
      if (pt.xi == 0.0 || pt.alpha0 == 1.0) {
        CHECK(pt.report.estimate == base.estimate);
        CHECK(pt.report.se == base.se);
      }
  }
}

TEST_CASE("constant pi-tilde of one freezes the PPI curve") {
  Fitted f = fit_world(false);
  PrincipalScoreModel degenerate;
  degenerate.variant = PsVariant::monotonicity;
  degenerate.covariates = {"x1"};
  degenerate.coef.resize(2, 2);
  degenerate.coef << 60.0, 0.0, -60.0, 0.0;  // pi_pro ~ 0 so pi-tilde ~ 1
  SensitivityGrid g = sweep_ppi(f.d, f.sample, degenerate, f.outcome, {0.5, 1.0, 1.7, 2.0});
  for (const auto& pt : g.points)
    CHECK_THAT(pt.report.estimate, Catch::Matchers::WithinAbs(g.base.estimate, 1e-9));
}

TEST_CASE("estimates are monotone where the plug-in algebra says so") {
  Fitted f = fit_world(false);
  SECTION("PPI curve decreases in alpha1 when the treated mean is positive") {
    SensitivityGrid g = sweep_ppi(f.d, f.sample, f.model, f.outcome, default_alpha1_grid());
    for (size_t i = 1; i < g.points.size(); ++i)
      CHECK(g.points[i].report.estimate <= g.points[i - 1].report.estimate + 1e-9);
  }
  SECTION("monotonicity surface increases in alpha0 at fixed xi > 0") {
    SensitivityGrid g = sweep_monotonicity(f.d, f.sample, f.outcome, {0.2},
                                           {0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0});
    for (size_t i = 1; i < g.points.size(); ++i)
      CHECK(g.points[i].report.estimate >= g.points[i - 1].report.estimate - 1e-9);
  }
}

TEST_CASE("sweep validation") {
  Fitted f = fit_world(false);
  SECTION("alpha1 must be positive") {
    REQUIRE_THROWS_AS(sweep_ppi(f.d, f.sample, f.model, f.outcome, {0.0, 1.0}),
                      std::invalid_argument);
  }
  SECTION("xi outside the empirical bounds is rejected") {
    REQUIRE_THROWS_AS(sweep_monotonicity(f.d, f.sample, f.outcome, {0.95}, {1.0}),
                      std::invalid_argument);
  }
  SECTION("alpha0 must be positive") {
    REQUIRE_THROWS_AS(sweep_monotonicity(f.d, f.sample, f.outcome, {0.1}, {-1.0}),
                      std::invalid_argument);
  }
  SECTION("cpsr score model is rejected for the PPI sweep") {
    PrincipalScoreModel cp = fit_em_cpsr(f.d, 0.1, {"x1"});
    REQUIRE_THROWS_AS(sweep_ppi(f.d, f.sample, cp, f.outcome, {1.0}), std::invalid_argument);
  }
}

TEST_CASE("per-xi EM refits stay close to the frozen-sample sweep at xi = 0") {
  Fitted f = fit_world(false);
  DistanceSpec spec = f.sample.spec;
  SensitivityGrid refit = sweep_monotonicity_refit(f.d, spec, 0, true, false, {0.0, 0.2},
                                                   {1.0, 1.5});
  SensitivityGrid frozen = sweep_monotonicity(f.d, f.sample, f.outcome, {0.0, 0.2}, {1.0, 1.5});
  REQUIRE(refit.points.size() == frozen.points.size());
  // xi = 0 refits the CPSR model at zero, which equals the monotonicity fit
  // up to solver tolerance; the matched sample and estimates follow suit
  CHECK_THAT(refit.points[0].report.estimate,
             Catch::Matchers::WithinAbs(frozen.points[0].report.estimate, 1e-3));
}

TEST_CASE("default grids match the reported analysis grids") {
  auto a1 = default_alpha1_grid();
  CHECK(a1.size() == 16);
  CHECK(a1.front() == 0.5);
  CHECK(a1.back() == 2.0);
  auto a0 = default_alpha0_grid();
  CHECK(a0.size() == 7);
  auto xi = default_xi_grid(0.696, 0.774);
  REQUIRE(xi.size() == 6);
  CHECK(xi[0] == 0.0);
  CHECK(xi[4] == 0.4);
  CHECK(xi[5] == 0.48);
}
