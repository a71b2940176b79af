#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sace/dataset.hpp"
#include "sace/matching.hpp"

namespace sace {

enum class Alternative { two_sided, greater, less };

struct TestReport {
  std::string test;
  double statistic = 0.0;
  double p_value = 1.0;
  std::string method;  // exact | permutation | normal_approx
  long n_used = 0;
};

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// average ranks, ties shared
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

// Wilcoxon signed-rank test of the sharp null on 1:1 matched pairs.
// Zero differences dropped, average ranks. Exact null distribution (subset-sum
// over doubled ranks, valid under ties) when the nonzero count allows it,
// normal approximation with tie correction otherwise.
inline TestReport wilcoxon_signed_rank(const std::vector<std::pair<double, double>>& pairs,
                                       Alternative alt = Alternative::two_sided,
                                       int exact_limit = 20) {
  if (pairs.empty()) throw std::invalid_argument("wilcoxon: no pairs");
  std::vector<double> absd;
  std::vector<int> sign;
  for (const auto& [yt, yu] : pairs) {
    const double dd = yt - yu;
    if (dd == 0.0) continue;  // standard zero-drop convention
    absd.push_back(std::fabs(dd));
    sign.push_back(dd > 0 ? 1 : -1);
  }
  TestReport rep;
  rep.test = "wilcoxon_signed_rank";
  rep.n_used = static_cast<long>(absd.size());
  if (absd.empty()) {  // all differences zero: nothing to reject
    rep.statistic = 0.0;
    rep.p_value = 1.0;
    rep.method = "exact";
    return rep;
  }
  const auto ranks = detail::average_ranks(absd);
  double w_plus = 0.0;
  for (size_t i = 0; i < ranks.size(); ++i)
    if (sign[i] > 0) w_plus += ranks[i];
  rep.statistic = w_plus;
  const long m = static_cast<long>(ranks.size());

  if (m <= exact_limit) {
    // doubled ranks are integers even with ties
    std::vector<long> r2(m);
    long total2 = 0;
    for (long i = 0; i < m; ++i) {
      r2[i] = std::lround(2.0 * ranks[i]);
      total2 += r2[i];
    }
    // counts[s] = number of sign assignments with doubled W+ equal to s
    std::vector<double> counts(total2 + 1, 0.0);
    counts[0] = 1.0;
    for (long i = 0; i < m; ++i)
      for (long s = total2; s >= r2[i]; --s) counts[s] += counts[s - r2[i]];
    const double denom = std::pow(2.0, static_cast<double>(m));
    const long w2 = std::lround(2.0 * w_plus);
    double p_ge = 0.0, p_le = 0.0;
    for (long s = 0; s <= total2; ++s) {
      if (s >= w2) p_ge += counts[s];
      if (s <= w2) p_le += counts[s];
    }
    p_ge /= denom;
    p_le /= denom;
    switch (alt) {
      case Alternative::greater: rep.p_value = p_ge; break;
      case Alternative::less: rep.p_value = p_le; break;
      case Alternative::two_sided: rep.p_value = std::min(1.0, 2.0 * std::min(p_ge, p_le)); break;
    }
    rep.method = "exact";
    return rep;
  }

  const double mu = static_cast<double>(m) * (m + 1) / 4.0;
  double var = static_cast<double>(m) * (m + 1) * (2.0 * m + 1) / 24.0;
  std::map<double, long> tie_count;
  for (double r : ranks) ++tie_count[r];
  for (const auto& [r, t] : tie_count)
    if (t > 1) var -= static_cast<double>(t) * (t * t - 1) / 48.0;
  const double z = (w_plus - mu) / std::sqrt(var);
  switch (alt) {
    case Alternative::greater: rep.p_value = 1.0 - detail::normal_cdf(z); break;
    case Alternative::less: rep.p_value = detail::normal_cdf(z); break;
    case Alternative::two_sided: rep.p_value = 2.0 * (1.0 - detail::normal_cdf(std::fabs(z))); break;
  }
  rep.method = "normal_approx";
  return rep;
}

inline TestReport wilcoxon_signed_rank(const MatchedSample& sample, const Dataset& d,
                                       Alternative alt = Alternative::two_sided) {
  if (sample.with_replacement)
    throw std::invalid_argument("wilcoxon applies to 1:1 samples without replacement");
  std::vector<std::pair<double, double>> pairs;
  for (const auto& p : sample.pairs) {
    const double y_target = d.y[p.target], y_donor = d.y[p.donor];
    if (sample.target_arm == 0) pairs.emplace_back(y_donor, y_target);
    else pairs.emplace_back(y_target, y_donor);
  }
  return wilcoxon_signed_rank(pairs, alt);
}

// Aligned-rank test after matching with replacement: each used donor forms a
// group with its matched targets, aligned responses are ranked jointly, and
// the treated rank sum is referred to its within-group permutation law.
inline TestReport aligned_rank(const MatchedSample& sample, const Dataset& d, int n_perm = 10000,
                               unsigned long long seed = 0, long exact_limit = 100000) {
  if (!sample.with_replacement)
    throw std::invalid_argument("aligned-rank test applies after matching with replacement");
  std::map<long, std::vector<long>> groups;  // donor -> targets (by primary donor)
  for (const auto& [t, dn] : sample.primary_donor) groups[dn].push_back(t);

  std::vector<double> vals;
  std::vector<int> treated;  // 1 for the donor member when target_arm == 0
  std::vector<long> gid;
  long g = 0;
  for (const auto& [dn, ts] : groups) {
    if (ts.empty()) throw std::invalid_argument("aligned-rank: group of size 1");
    std::vector<long> members;
    members.push_back(dn);
    members.insert(members.end(), ts.begin(), ts.end());
    double mean = 0;
    for (long u : members) mean += d.y[u];
    mean /= static_cast<double>(members.size());
    for (size_t i = 0; i < members.size(); ++i) {
      vals.push_back(d.y[members[i]] - mean);
      const bool donor_member = i == 0;
      treated.push_back(donor_member == (sample.target_arm == 0) ? 1 : 0);
      gid.push_back(g);
    }
    ++g;
  }
  const auto ranks = detail::average_ranks(vals);

  double t_obs = 0;
  for (size_t i = 0; i < ranks.size(); ++i)
    if (treated[i]) t_obs += ranks[i];

  std::vector<std::vector<double>> group_ranks(g);
  for (size_t i = 0; i < ranks.size(); ++i) group_ranks[gid[i]].push_back(ranks[i]);
  double mu = 0;
  for (const auto& gr : group_ranks) {
    double s = 0;
    for (double r : gr) s += r;
    mu += s / static_cast<double>(gr.size());
  }

  TestReport rep;
  rep.test = "aligned_rank";
  rep.statistic = t_obs;
  rep.n_used = static_cast<long>(ranks.size());
  const double dev = std::fabs(t_obs - mu);
  const double eps = 1e-9;

  double arrangements = 1;
  for (const auto& gr : group_ranks) {
    arrangements *= static_cast<double>(gr.size());
    if (arrangements > static_cast<double>(exact_limit)) break;
  }

  if (arrangements <= static_cast<double>(exact_limit)) {
    long extreme = 0, total = 0;
    std::vector<size_t> pick(g, 0);
    while (true) {
      double t = 0;
      for (long i = 0; i < g; ++i) t += group_ranks[i][pick[i]];
      ++total;
      if (std::fabs(t - mu) >= dev - eps) ++extreme;
      long i = 0;
      for (; i < g; ++i) {
        if (++pick[i] < group_ranks[i].size()) break;
        pick[i] = 0;
      }
      if (i == g) break;
    }
    rep.p_value = static_cast<double>(extreme) / static_cast<double>(total);
    rep.method = "exact";
  } else {
    std::mt19937_64 gen(seed);
    long extreme = 0;
    for (int b = 0; b < n_perm; ++b) {
      double t = 0;
      for (long i = 0; i < g; ++i)
        t += group_ranks[i][gen() % group_ranks[i].size()];
      if (std::fabs(t - mu) >= dev - eps) ++extreme;
    }
    rep.p_value = static_cast<double>(extreme) / static_cast<double>(n_perm);
    rep.method = "permutation";
  }
  return rep;
}

}  // namespace sace
