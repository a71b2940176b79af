#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "sace/dataset.hpp"
#include "sace/principal_score.hpp"

namespace sace {

constexpr double kInf = std::numeric_limits<double>::infinity();

enum class DistanceKind { exact, mahalanobis, pi_tilde_abs_diff, mahalanobis_with_caliper };
enum class MatchAlgorithm { greedy, optimal };
enum class TiePolicy { average, lowest_id };

struct DistanceSpec {
  DistanceKind kind = DistanceKind::mahalanobis;
  // names resolved against x0 covariates first, then post-treatment covariates;
  // empty means the dataset's declared distance role (плюс all x1 when use_post=true)
  std::vector<std::string> columns;
  bool use_post = false;  // CSE matching balances (X0, X1)
  // caliper on |pi-tilde^1 difference|: absolute, or a multiple of its SD over survivors
  std::optional<double> caliper_abs;
  std::optional<double> caliper_sd_multiple;
  std::optional<PrincipalScoreModel> score_model;

  bool needs_score() const {
    return kind == DistanceKind::pi_tilde_abs_diff || kind == DistanceKind::mahalanobis_with_caliper;
  }
};

struct MatchedPair {
  long target = -1;  // row index into the Dataset
  long donor = -1;
  double distance = 0.0;
  double weight = 1.0;  // tied nearest donors share a target's unit weight
};

struct MatchedSample {
  int target_arm = 0;  // 0: {A=0,S=1} targets (SACE, CSE(0)); 1: {A=1,S=1} (CSE(1))
  bool with_replacement = true;
  DistanceSpec spec;  // provenance
  std::vector<MatchedPair> pairs;
  std::vector<long> unmatched_targets;
  std::map<long, double> donor_use;    // K: donor row -> total matched weight
  std::map<long, long> primary_donor;  // target row -> lowest-id minimal donor

  std::vector<long> matched_targets() const {
    std::vector<long> out;
    for (const auto& p : pairs)
      if (out.empty() || out.back() != p.target) out.push_back(p.target);
    return out;
  }
  double total_distance() const {
    double t = 0;
    for (const auto& p : pairs) t += p.weight * p.distance;
    return t;
  }
};

struct BalanceRow {
  std::string covariate;
  bool binary = false;
  double n0 = 0, n1 = 0;
  double mean0 = 0, sd0 = 0, mean1 = 0, sd1 = 0;  // binary: mean=proportion, sd=count
  double smd = 0;
};

// Precomputes everything a distance needs: the base-metric matrix, the pooled
// survivor covariance inverse and the resolved caliper.
class DistanceEvaluator {
 public:
  DistanceEvaluator(const Dataset& d, const DistanceSpec& spec) : spec_(spec) {
    std::vector<std::string> cols = spec.columns;
    if (cols.empty()) cols = d.roles.distance_cols;
    if (cols.empty())
      for (const auto& m : d.roles.covariates) cols.push_back(m.name);

    std::vector<std::pair<bool, int>> resolved;  // (is_post, index)
    for (const auto& nm : cols) {
      bool found = false;
      for (size_t j = 0; j < d.roles.covariates.size(); ++j)
        if (d.roles.covariates[j].name == nm) { resolved.emplace_back(false, j); found = true; break; }
      if (!found) resolved.emplace_back(true, d.post_covariate_index(nm));
    }
    if (spec.use_post)
      for (size_t j = 0; j < d.roles.post_covariates.size(); ++j)
        if (std::find(resolved.begin(), resolved.end(), std::make_pair(true, static_cast<int>(j))) ==
            resolved.end())
          resolved.emplace_back(true, j);

    Z_.resize(d.n(), static_cast<long>(resolved.size()));
    for (size_t j = 0; j < resolved.size(); ++j)
      Z_.col(j) = resolved[j].first ? d.x1.col(resolved[j].second) : d.x0.col(resolved[j].second);

    std::vector<long> surv;
    for (long i = 0; i < d.n(); ++i)
      if (d.s[i] == 1) surv.push_back(i);
    if (surv.size() < 2) throw std::invalid_argument("matching needs at least two survivors");

    if (spec.kind == DistanceKind::mahalanobis || spec.kind == DistanceKind::mahalanobis_with_caliper) {
      Eigen::MatrixXd Zs(surv.size(), Z_.cols());
      for (size_t i = 0; i < surv.size(); ++i) Zs.row(i) = Z_.row(surv[i]);
      Eigen::RowVectorXd mu = Zs.colwise().mean();
      Eigen::MatrixXd C = (Zs.rowwise() - mu).transpose() * (Zs.rowwise() - mu) /
                          static_cast<double>(surv.size() - 1);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(C);
      if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0).any()) {
        // singular covariance: fall back to the pseudo-inverse
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(C);
        sigma_inv_ = cod.pseudoInverse();
        singular_sigma_ = true;
      } else {
        sigma_inv_ = ldlt.solve(Eigen::MatrixXd::Identity(C.rows(), C.cols()));
      }
    }

    if (spec.needs_score()) {
      if (!spec.score_model) throw std::invalid_argument("distance requires a principal score model");
      pi_ = pi_tilde1_all(*spec.score_model, d);
      if (spec.kind == DistanceKind::mahalanobis_with_caliper) {
        if (spec.caliper_abs) {
          caliper_ = *spec.caliper_abs;
        } else if (spec.caliper_sd_multiple) {
          double m = 0, m2 = 0;
          for (long i : surv) m += pi_[i];
          m /= static_cast<double>(surv.size());
          for (long i : surv) m2 += (pi_[i] - m) * (pi_[i] - m);
          const double sd = std::sqrt(m2 / static_cast<double>(surv.size() - 1));
          caliper_ = *spec.caliper_sd_multiple * sd;
        } else {
          throw std::invalid_argument("mahalanobis_with_caliper requires a caliper");
        }
      }
    }
  }

  // squared quadratic form, or +inf past the caliper
  double operator()(long i, long j) const {
    switch (spec_.kind) {
      case DistanceKind::exact:
        return (Z_.row(i) - Z_.row(j)).cwiseAbs().maxCoeff() == 0.0 ? 0.0 : kInf;
      case DistanceKind::pi_tilde_abs_diff:
        return std::fabs(pi_[i] - pi_[j]);
      case DistanceKind::mahalanobis:
        return mahalanobis(i, j);
      case DistanceKind::mahalanobis_with_caliper:
        return std::fabs(pi_[i] - pi_[j]) <= caliper_ ? mahalanobis(i, j) : kInf;
    }
    return kInf;
  }

  double mahalanobis(long i, long j) const {
    Eigen::VectorXd diff = Z_.row(i) - Z_.row(j);
    return diff.dot(sigma_inv_ * diff);
  }

  // caliper-free metric, for units the caliper isolates
  double fallback_distance(long i, long j) const {
    if (sigma_inv_.size() > 0) return mahalanobis(i, j);
    return (*this)(i, j);
  }

  double caliper() const { return caliper_; }
  const std::vector<double>& pi_tilde() const { return pi_; }
  bool has_pi() const { return !pi_.empty(); }
  bool singular_sigma() const { return singular_sigma_; }

 private:
  DistanceSpec spec_;
  Eigen::MatrixXd Z_;
  Eigen::MatrixXd sigma_inv_;
  std::vector<double> pi_;
  double caliper_ = kInf;
  bool singular_sigma_ = false;
};

inline double mahalanobis_distance(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj,
                                   const Eigen::MatrixXd& sigma) {
  if (xi.size() != xj.size() || sigma.rows() != xi.size() || sigma.cols() != xi.size())
    throw std::invalid_argument("mahalanobis: dimension mismatch");
  Eigen::LDLT<Eigen::MatrixXd> ldlt(sigma);
  Eigen::VectorXd diff = xi - xj;
  if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0).any()) {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(sigma);
    return diff.dot(cod.pseudoInverse() * diff);
  }
  return diff.dot(ldlt.solve(diff));
}

inline double distance(const Dataset& d, const DistanceSpec& spec, long i, long j) {
  return DistanceEvaluator(d, spec)(i, j);
}

namespace detail {

// Min-cost assignment by successive shortest augmenting paths (Dijkstra with
// row/column potentials). Each round starts from every unmatched row at once,
// so the global shortest augmenting path is taken; this makes the result a
// maximum-cardinality matching of minimum total cost even when some rows are
// infeasible (only finite-cost edges participate). Returns the column per
// row, -1 if unassigned. Costs must be nonnegative.
inline std::vector<int> min_cost_assignment(const std::vector<std::vector<std::pair<int, double>>>& adj,
                                            int n_rows, int n_cols) {
  std::vector<int> row_match(n_rows, -1), col_match(n_cols, -1);
  // reduced cost rc(r,c) = cost(r,c) - u[r] - v[c] stays >= 0, and 0 on matched edges
  std::vector<double> u(n_rows, 0.0), v(n_cols, 0.0);

  std::vector<double> dcol(n_cols), drow(n_rows);
  std::vector<int> parent(n_cols);
  std::vector<char> done(n_cols), in_tree(n_rows);

  while (true) {
    std::fill(dcol.begin(), dcol.end(), kInf);
    std::fill(parent.begin(), parent.end(), -1);
    std::fill(done.begin(), done.end(), 0);
    std::fill(in_tree.begin(), in_tree.end(), 0);

    using QE = std::pair<double, int>;
    std::priority_queue<QE, std::vector<QE>, std::greater<>> pq;
    auto relax_row = [&](int r, double base) {
      in_tree[r] = 1;
      drow[r] = base;
      for (const auto& [c, w] : adj[r]) {
        if (done[c]) continue;
        const double nd = base + (w - u[r] - v[c]);
        if (nd < dcol[c]) {
          dcol[c] = nd;
          parent[c] = r;
          pq.emplace(nd, c);
        }
      }
    };
    for (int r = 0; r < n_rows; ++r)
      if (row_match[r] < 0 && !adj[r].empty()) relax_row(r, 0.0);

    int free_col = -1;
    double delta = kInf;
    while (!pq.empty()) {
      auto [dc, c] = pq.top();
      pq.pop();
      if (done[c] || dc > dcol[c]) continue;
      done[c] = 1;
      if (col_match[c] < 0) {
        free_col = c;
        delta = dc;
        break;
      }
      relax_row(col_match[c], dc);
    }
    if (free_col < 0) break;  // no augmenting path: the matching is maximum

    for (int c = 0; c < n_cols; ++c)
      if (done[c] && c != free_col) v[c] -= delta - dcol[c];
    for (int r = 0; r < n_rows; ++r)
      if (in_tree[r]) u[r] += delta - drow[r];

    for (int c = free_col; c >= 0;) {
      const int r = parent[c];
      const int next_c = row_match[r];
      row_match[r] = c;
      col_match[c] = r;
      c = next_c;
    }
  }
  return row_match;
}

}  // namespace detail

// Step (iii): match every target-group survivor to donor-arm survivors.
inline MatchedSample match(const Dataset& d, const DistanceSpec& spec, int target_arm,
                           bool with_replacement, MatchAlgorithm algorithm = MatchAlgorithm::greedy,
                           TiePolicy ties = TiePolicy::average) {
  d.validate_for_matching();
  const std::vector<long> targets = d.survivors(target_arm);
  const std::vector<long> donors = d.survivors(1 - target_arm);
  if (targets.empty()) throw std::invalid_argument("target group is empty");

  DistanceEvaluator dist(d, spec);
  MatchedSample out;
  out.target_arm = target_arm;
  out.with_replacement = with_replacement;
  out.spec = spec;

  constexpr double tie_tol = 1e-9;

  if (with_replacement) {
    std::vector<std::pair<long, double>> cands;  // (donor, distance)
    for (long t : targets) {
      cands.clear();
      double best = kInf;
      for (long dn : donors) {
        const double dd = dist(t, dn);
        if (!std::isfinite(dd)) continue;
        if (dd < best) best = dd;
        cands.emplace_back(dn, dd);
      }
      if (!std::isfinite(best)) {
        out.unmatched_targets.push_back(t);
        continue;
      }
      std::vector<std::pair<long, double>> mins;
      for (const auto& cd : cands)
        if (cd.second <= best + tie_tol) mins.push_back(cd);
      if (ties == TiePolicy::lowest_id && mins.size() > 1) mins.resize(1);  // donors scanned in id order
      const double w = 1.0 / static_cast<double>(mins.size());
      out.primary_donor[t] = mins.front().first;
      for (const auto& [dn, dd] : mins) {
        out.pairs.push_back({t, dn, dd, w});
        out.donor_use[dn] += w;
      }
    }
    return out;
  }

  // without replacement
  if (algorithm == MatchAlgorithm::greedy) {
    std::vector<long> order = targets;
    if (dist.has_pi()) {
      const auto& pi = dist.pi_tilde();
      std::stable_sort(order.begin(), order.end(),
                       [&](long a, long b) { return pi[a] > pi[b]; });
    }
    std::vector<bool> used(d.n(), false);
    for (long t : order) {
      double best = kInf;
      long best_d = -1;
      for (long dn : donors) {
        if (used[dn]) continue;
        const double dd = dist(t, dn);
        if (dd < best - tie_tol) {
          best = dd;
          best_d = dn;
        }
      }
      if (best_d < 0) {
        out.unmatched_targets.push_back(t);
        continue;
      }
      used[best_d] = true;
      out.pairs.push_back({t, best_d, best, 1.0});
      out.donor_use[best_d] = 1.0;
      out.primary_donor[t] = best_d;
    }
    std::sort(out.pairs.begin(), out.pairs.end(),
              [](const MatchedPair& a, const MatchedPair& b) { return a.target < b.target; });
    std::sort(out.unmatched_targets.begin(), out.unmatched_targets.end());
    return out;
  }

  // optimal: min-cost assignment over the finite-distance edges
  std::vector<std::vector<std::pair<int, double>>> adj(targets.size());
  for (size_t ti = 0; ti < targets.size(); ++ti)
    for (size_t dj = 0; dj < donors.size(); ++dj) {
      const double dd = dist(targets[ti], donors[dj]);
      if (std::isfinite(dd)) adj[ti].emplace_back(static_cast<int>(dj), dd);
    }
  std::vector<int> assign = detail::min_cost_assignment(adj, static_cast<int>(targets.size()),
                                                        static_cast<int>(donors.size()));
  for (size_t ti = 0; ti < targets.size(); ++ti) {
    if (assign[ti] < 0) {
      out.unmatched_targets.push_back(targets[ti]);
      continue;
    }
    const long dn = donors[assign[ti]];
    const double dd = dist(targets[ti], dn);
    out.pairs.push_back({targets[ti], dn, dd, 1.0});
    out.donor_use[dn] = 1.0;
    out.primary_donor[targets[ti]] = dn;
  }
  return out;
}

namespace detail {

struct WSums {
  double n = 0, mean = 0, var = 0;
};

inline WSums weighted_summary(const std::vector<std::pair<double, double>>& vw) {
  WSums s;
  double sw = 0, m = 0;
  for (const auto& [v, w] : vw) sw += w, m += w * v;
  if (sw <= 0) return s;
  m /= sw;
  double ss = 0;
  for (const auto& [v, w] : vw) ss += w * (v - m) * (v - m);
  s.n = sw;
  s.mean = m;
  s.var = sw > 1 ? ss / (sw - 1) : 0.0;
  return s;
}

inline BalanceRow balance_row(const std::string& name, bool binary,
                              const std::vector<std::pair<double, double>>& g0,
                              const std::vector<std::pair<double, double>>& g1) {
  WSums s0 = weighted_summary(g0), s1 = weighted_summary(g1);
  BalanceRow r;
  r.covariate = name;
  r.binary = binary;
  r.n0 = s0.n;
  r.n1 = s1.n;
  r.mean0 = s0.mean;
  r.mean1 = s1.mean;
  double v0 = s0.var, v1 = s1.var;
  if (binary) {
    v0 = s0.mean * (1.0 - s0.mean);
    v1 = s1.mean * (1.0 - s1.mean);
    r.sd0 = s0.mean * s0.n;  // count
    r.sd1 = s1.mean * s1.n;
  } else {
    r.sd0 = std::sqrt(v0);
    r.sd1 = std::sqrt(v1);
  }
  const double pooled = std::sqrt((v0 + v1) / 2.0);
  r.smd = pooled > 0 ? (r.mean1 - r.mean0) / pooled : 0.0;
  return r;
}

}  // namespace detail

enum class BalancePopulation { full, survivors };

// SMD table across treatment arms on the raw data
inline std::vector<BalanceRow> balance_table(const Dataset& d, BalancePopulation pop) {
  std::vector<BalanceRow> rows;
  for (size_t j = 0; j < d.roles.covariates.size(); ++j) {
    std::vector<std::pair<double, double>> g0, g1;
    for (long i = 0; i < d.n(); ++i) {
      if (pop == BalancePopulation::survivors && d.s[i] != 1) continue;
      (d.a[i] == 0 ? g0 : g1).emplace_back(d.x0(i, j), 1.0);
    }
    rows.push_back(detail::balance_row(d.roles.covariates[j].name,
                                       d.roles.covariates[j].type == ColumnType::binary, g0, g1));
  }
  return rows;
}

// SMD table for a matched sample; with replacement the donor side weights each
// donor by its reuse count K.
inline std::vector<BalanceRow> balance_table(const Dataset& d, const MatchedSample& sample) {
  std::vector<BalanceRow> rows;
  auto covariate_value = [&](long i, size_t j) { return d.x0(i, j); };
  for (size_t j = 0; j < d.roles.covariates.size(); ++j) {
    std::vector<std::pair<double, double>> g0, g1;
    for (long t : sample.matched_targets())
      (sample.target_arm == 0 ? g0 : g1).emplace_back(covariate_value(t, j), 1.0);
    for (const auto& [dn, k] : sample.donor_use)
      (sample.target_arm == 0 ? g1 : g0).emplace_back(covariate_value(dn, j), k);
    rows.push_back(detail::balance_row(d.roles.covariates[j].name,
                                       d.roles.covariates[j].type == ColumnType::binary, g0, g1));
  }
  return rows;
}

inline void save_matched_sample(const MatchedSample& sample, const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "target_id,donor_id,distance,weight,K\n";
  for (const auto& p : sample.pairs)
    out << d.ids[p.target] << ',' << d.ids[p.donor] << ',' << csv::format_double(p.distance) << ','
        << csv::format_double(p.weight) << ',' << csv::format_double(sample.donor_use.at(p.donor))
        << '\n';
}

inline void save_balance_table(const std::vector<BalanceRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "covariate,type,n0,mean0,sd0,n1,mean1,sd1,smd\n";
  for (const auto& r : rows)
    out << r.covariate << ',' << (r.binary ? "binary" : "continuous") << ','
        << csv::format_double(r.n0) << ',' << csv::format_double(r.mean0) << ','
        << csv::format_double(r.sd0) << ',' << csv::format_double(r.n1) << ','
        << csv::format_double(r.mean1) << ',' << csv::format_double(r.sd1) << ','
        << csv::format_double(r.smd) << '\n';
}

}  // namespace sace
