#pragma once

// Test-only oracles, kept independent of the library's solver paths.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "sace/dataset.hpp"

namespace testutil {

// Nelder-Mead maximizer with restarts; enough for the smooth concave
// likelihoods it is pointed at.
inline Eigen::VectorXd nelder_mead_max(const std::function<double(const Eigen::VectorXd&)>& f,
                                       Eigen::VectorXd x0, int rounds = 8, int iters = 4000,
                                       double step = 0.5) {
  const int n = static_cast<int>(x0.size());
  auto neg = [&](const Eigen::VectorXd& x) { return -f(x); };
  Eigen::VectorXd best = x0;
  double best_val = neg(best);
  double h = step;
  for (int round = 0; round < rounds; ++round) {
    std::vector<Eigen::VectorXd> pts(n + 1, best);
    std::vector<double> vals(n + 1);
    for (int i = 0; i < n; ++i) pts[i + 1][i] += h;
    for (int i = 0; i <= n; ++i) vals[i] = neg(pts[i]);
    for (int it = 0; it < iters; ++it) {
      std::vector<int> ord(n + 1);
      for (int i = 0; i <= n; ++i) ord[i] = i;
      std::sort(ord.begin(), ord.end(), [&](int a, int b) { return vals[a] < vals[b]; });
      std::vector<Eigen::VectorXd> p2(n + 1);
      std::vector<double> v2(n + 1);
      for (int i = 0; i <= n; ++i) { p2[i] = pts[ord[i]]; v2[i] = vals[ord[i]]; }
      pts = p2; vals = v2;
      if (std::fabs(vals[n] - vals[0]) < 1e-14 * (1.0 + std::fabs(vals[0]))) break;
      Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
      for (int i = 0; i < n; ++i) centroid += pts[i];
      centroid /= n;
      Eigen::VectorXd xr = centroid + (centroid - pts[n]);
      double fr = neg(xr);
      if (fr < vals[0]) {
        Eigen::VectorXd xe = centroid + 2.0 * (centroid - pts[n]);
        double fe = neg(xe);
        if (fe < fr) { pts[n] = xe; vals[n] = fe; }
        else { pts[n] = xr; vals[n] = fr; }
      } else if (fr < vals[n - 1]) {
        pts[n] = xr; vals[n] = fr;
      } else {
        Eigen::VectorXd xc = centroid + 0.5 * (pts[n] - centroid);
        double fc = neg(xc);
        if (fc < vals[n]) { pts[n] = xc; vals[n] = fc; }
        else {
          for (int i = 1; i <= n; ++i) {
            pts[i] = pts[0] + 0.5 * (pts[i] - pts[0]);
            vals[i] = neg(pts[i]);
          }
        }
      }
    }
    int arg = 0;
    for (int i = 1; i <= n; ++i)
      if (vals[i] < vals[arg]) arg = i;
    if (vals[arg] < best_val) { best_val = vals[arg]; best = pts[arg]; }
    h *= 0.25;  // restart from the incumbent with a smaller simplex
  }
  return best;
}

// Exhaustive min-cost max-cardinality assignment for small instances.
// cost(i, j) may be +inf. Returns {cardinality, total_cost}.
inline std::pair<int, double> brute_force_assignment(const Eigen::MatrixXd& cost) {
  const int nr = static_cast<int>(cost.rows());
  const int nc = static_cast<int>(cost.cols());
  int best_card = 0;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<int> pick(nr, -1);
  std::vector<bool> used(nc, false);
  std::function<void(int, int, double)> rec = [&](int row, int card, double total) {
    if (row == nr) {
      if (card > best_card || (card == best_card && total < best_cost)) {
        best_card = card;
        best_cost = total;
      }
      return;
    }
    rec(row + 1, card, total);  // leave row unmatched
    for (int c = 0; c < nc; ++c) {
      if (used[c] || !std::isfinite(cost(row, c))) continue;
      used[c] = true;
      rec(row + 1, card + 1, total + cost(row, c));
      used[c] = false;
    }
  };
  rec(0, 0, 0.0);
  return {best_card, best_card == 0 ? 0.0 : best_cost};
}

// independent little linear solver (Gauss-Jordan with partial pivoting)
inline Eigen::VectorXd gauss_solve(Eigen::MatrixXd A, Eigen::VectorXd b) {
  const int n = static_cast<int>(A.rows());
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::fabs(A(r, col)) > std::fabs(A(piv, col))) piv = r;
    A.row(col).swap(A.row(piv));
    std::swap(b[col], b[piv]);
    const double d = A(col, col);
    A.row(col) /= d;
    b[col] /= d;
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = A(r, col);
      A.row(r) -= f * A.row(col);
      b[r] -= f * b[col];
    }
  }
  return b;
}

// two-sample Kolmogorov-Smirnov p-value (asymptotic)
inline double ks_two_sample_p(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  double d = 0;
  size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::fabs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double en = std::sqrt(na * nb / (na + nb));
  const double lambda = (en + 0.12 + 0.11 / en) * d;
  double p = 0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

// small in-memory dataset with every covariate in every role
inline sace::Dataset make_dataset(const std::vector<std::vector<double>>& x0,
                                  const std::vector<int>& a, const std::vector<int>& s,
                                  const std::vector<double>& y) {
  sace::Dataset d;
  const long n = static_cast<long>(a.size());
  const long k = x0.empty() ? 0 : static_cast<long>(x0[0].size());
  d.ids.resize(n);
  d.x0.resize(n, k);
  d.x1.resize(n, 0);
  d.a.resize(n);
  d.s.resize(n);
  d.y.resize(n);
  for (long i = 0; i < n; ++i) {
    d.ids[i] = static_cast<int>(i + 1);
    for (long j = 0; j < k; ++j) d.x0(i, j) = x0[i][j];
    d.a[i] = a[i];
    d.s[i] = s[i];
    d.y[i] = s[i] == 1 ? y[i] : std::nan("");
  }
  sace::Roles r;
  r.treatment_col = "a";
  r.survival_col = "s";
  r.outcome_col = "y";
  for (long j = 0; j < k; ++j) {
    sace::ColumnMeta m;
    m.name = "x" + std::to_string(j + 1);
    r.covariates.push_back(m);
    r.distance_cols.push_back(m.name);
    r.principal_score_cols.push_back(m.name);
    r.outcome_model_cols.push_back(m.name);
  }
  d.roles = std::move(r);
  return d;
}

}  // namespace testutil
