#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "sace/matching.hpp"
#include "sace/rank_tests.hpp"
#include "testutil.hpp"

using namespace sace;

TEST_CASE("wilcoxon on all-zero differences") {
  std::vector<std::pair<double, double>> pairs(6, {3.0, 3.0});
  TestReport r = wilcoxon_signed_rank(pairs);
  CHECK(r.p_value == 1.0);
  CHECK(r.n_used == 0);
}

TEST_CASE("five uniformly positive pairs give the textbook one-sided p") {
  std::vector<std::pair<double, double>> pairs;
  for (int i = 1; i <= 5; ++i) pairs.emplace_back(10.0 + i, 10.0);
  TestReport r = wilcoxon_signed_rank(pairs, Alternative::greater);
  CHECK(r.method == "exact");
  CHECK_THAT(r.p_value, Catch::Matchers::WithinAbs(1.0 / 32.0, 1e-12));
}

TEST_CASE("exact wilcoxon equals full sign-flip enumeration on 8 random pairs") {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 10; ++rep) {
    const int m = 8;
    std::vector<double> diff(m);
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < m; ++i) {
      diff[i] = nd(gen);
      if (rep % 3 == 0) diff[i] = std::round(diff[i] * 4.0) / 4.0;  // force ties sometimes
      if (diff[i] == 0.0) diff[i] = 0.25;
      pairs.emplace_back(diff[i], 0.0);
    }
    TestReport r = wilcoxon_signed_rank(pairs, Alternative::greater);
    REQUIRE(r.method == "exact");

    // brute force: all 2^8 sign patterns on the same average ranks
    std::vector<double> absd(m);
    for (int i = 0; i < m; ++i) absd[i] = std::fabs(diff[i]);
    std::vector<size_t> ord(m);
    for (int i = 0; i < m; ++i) ord[i] = i;
    std::sort(ord.begin(), ord.end(), [&](size_t a, size_t b) { return absd[a] < absd[b]; });
    std::vector<double> rank(m);
    int i = 0;
    while (i < m) {
      int j = i;
      while (j + 1 < m && absd[ord[j + 1]] == absd[ord[i]]) ++j;
      for (int t = i; t <= j; ++t) rank[ord[t]] = (i + j) / 2.0 + 1.0;
      i = j + 1;
    }
    double w_obs = 0;
    for (int t = 0; t < m; ++t)
      if (diff[t] > 0) w_obs += rank[t];
    long ge = 0;
    for (int mask = 0; mask < (1 << m); ++mask) {
      double w = 0;
      for (int t = 0; t < m; ++t)
        if (mask & (1 << t)) w += rank[t];
      if (w >= w_obs - 1e-12) ++ge;
    }
    CHECK_THAT(r.p_value, Catch::Matchers::WithinAbs(static_cast<double>(ge) / (1 << m), 1e-12));
  }
}

TEST_CASE("large samples fall back to the tie-corrected normal approximation") {
  std::mt19937_64 gen(9);
  std::normal_distribution<double> nd;
  std::vector<std::pair<double, double>> pairs;
  for (int i = 0; i < 60; ++i) pairs.emplace_back(nd(gen), nd(gen));
  TestReport r = wilcoxon_signed_rank(pairs);
  CHECK(r.method == "normal_approx");
  CHECK(r.p_value >= 0.0);
  CHECK(r.p_value <= 1.0);
}

namespace {

MatchedSample sample_with_groups(const Dataset& d) {
  DistanceSpec spec;
  spec.kind = DistanceKind::mahalanobis;
  return match(d, spec, 0, true);
}

}  // namespace

TEST_CASE("aligned rank on identical outcomes does not reject") {
  Dataset d = testutil::make_dataset({{0.0}, {1.0}, {0.1}, {1.1}}, {0, 0, 1, 1}, {1, 1, 1, 1},
                                     {4, 4, 4, 4});
  MatchedSample s = sample_with_groups(d);
  TestReport r = aligned_rank(s, d);
  CHECK(r.p_value == 1.0);
}

TEST_CASE("Monte Carlo aligned-rank p sits within 3 SE of exact enumeration") {
  // three donors, each matched by two targets: 27 arrangements
  Dataset d = testutil::make_dataset(
      {{0.0}, {0.05}, {1.0}, {1.05}, {2.0}, {2.05}, {0.0}, {1.0}, {2.0}},
      {0, 0, 0, 0, 0, 0, 1, 1, 1}, {1, 1, 1, 1, 1, 1, 1, 1, 1},
      {3.0, 1.5, 2.0, 5.0, 4.0, 0.5, 2.5, 3.5, 1.0});
  MatchedSample s = sample_with_groups(d);
  REQUIRE(s.donor_use.size() == 3);
  TestReport exact = aligned_rank(s, d);
  REQUIRE(exact.method == "exact");
  TestReport mc = aligned_rank(s, d, 20000, 4, /*exact_limit=*/1);
  REQUIRE(mc.method == "permutation");
  const double se = std::sqrt(exact.p_value * (1 - exact.p_value) / 20000.0);
  CHECK(std::fabs(mc.p_value - exact.p_value) <= 3.0 * se + 1e-12);
}

TEST_CASE("permutation p-values are deterministic given the seed") {
  std::mt19937_64 gen(33);
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> x;
  std::vector<int> a, s;
  std::vector<double> y;
  for (int i = 0; i < 40; ++i) {
    x.push_back({nd(gen)});
    a.push_back(i < 28 ? 0 : 1);
    s.push_back(1);
    y.push_back(nd(gen));
  }
  Dataset d = testutil::make_dataset(x, a, s, y);
  MatchedSample smp = sample_with_groups(d);
  TestReport r1 = aligned_rank(smp, d, 5000, 12345, 1);
  TestReport r2 = aligned_rank(smp, d, 5000, 12345, 1);
  CHECK(r1.p_value == r2.p_value);
  CHECK(r1.p_value >= 0.0);
  CHECK(r1.p_value <= 1.0);
}

TEST_CASE("aligned rank refuses samples without replacement") {
  Dataset d = testutil::make_dataset({{0.0}, {1.0}, {0.1}, {1.1}}, {0, 0, 1, 1}, {1, 1, 1, 1},
                                     {1, 2, 3, 4});
  DistanceSpec spec;
  spec.kind = DistanceKind::mahalanobis;
  MatchedSample s = match(d, spec, 0, false);
  REQUIRE_THROWS_AS(aligned_rank(s, d), std::invalid_argument);
  // and the wilcoxon path covers that sample instead
  TestReport r = wilcoxon_signed_rank(s, d);
  CHECK(r.p_value >= 0.0);
}
