#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace sace {

struct MultinomialOptions {
  double grad_tol = 1e-8;
  int max_iter = 100;
};

// Coefficients of a baseline-category logit model. Category 0 is the
// reference; row c-1 holds the coefficients of category c.
struct MultinomialFit {
  Eigen::MatrixXd coef;
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;
  double grad_norm = 0.0;
};

namespace detail {

// category probabilities, one row per observation
inline Eigen::MatrixXd multinomial_probs(const Eigen::MatrixXd& X, const Eigen::MatrixXd& coef) {
  const long n = X.rows();
  const long c = coef.rows() + 1;
  Eigen::MatrixXd lp(n, c);
  lp.col(0).setZero();
  for (long j = 1; j < c; ++j) lp.col(j) = X * coef.row(j - 1).transpose();
  Eigen::VectorXd m = lp.rowwise().maxCoeff();
  Eigen::MatrixXd p = (lp.colwise() - m).array().exp();
  Eigen::VectorXd den = p.rowwise().sum();
  for (long j = 0; j < c; ++j) p.col(j).array() /= den.array();
  return p;
}

inline double weighted_multinomial_loglik(const Eigen::MatrixXd& X, const std::vector<int>& cat,
                                          const Eigen::VectorXd& w, const Eigen::MatrixXd& coef) {
  const long n = X.rows();
  const long c = coef.rows() + 1;
  Eigen::MatrixXd lp(n, c);
  lp.col(0).setZero();
  for (long j = 1; j < c; ++j) lp.col(j) = X * coef.row(j - 1).transpose();
  double ll = 0.0;
  for (long i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    double m = lp.row(i).maxCoeff();
    double lse = m + std::log((lp.row(i).array() - m).exp().sum());
    ll += w[i] * (lp(i, cat[i]) - lse);
  }
  return ll;
}

}  // namespace detail

// Newton-Raphson MLE of the weighted multinomial logit, with step halving.
// `cat[i]` in [0, n_categories); weights nonnegative, not all zero.
inline MultinomialFit fit_weighted_multinomial(const Eigen::MatrixXd& X, const std::vector<int>& cat,
                                               const Eigen::VectorXd& w, int n_categories,
                                               const Eigen::MatrixXd* init = nullptr,
                                               const MultinomialOptions& opt = {}) {
  const long n = X.rows();
  const long p = X.cols();
  const int c = n_categories;
  if (static_cast<long>(cat.size()) != n || w.size() != n)
    throw std::invalid_argument("multinomial: size mismatch");
  if (w.minCoeff() < 0.0) throw std::invalid_argument("multinomial: negative weight");
  if (w.sum() <= 0.0) throw std::invalid_argument("multinomial: all weights zero");
  for (long i = 0; i < n; ++i)
    if (cat[i] < 0 || cat[i] >= c) throw std::invalid_argument("multinomial: category out of range");
  if (init == nullptr) {  // cold start: validate; warm starts (EM path) skip the O(np^2) checks
    std::vector<double> wsum(c, 0.0);
    for (long i = 0; i < n; ++i) wsum[cat[i]] += w[i];
    for (int j = 1; j < c; ++j)
      if (wsum[j] == 0.0)
        throw std::invalid_argument("multinomial: category " + std::to_string(j) + " has no weight");
    if (Eigen::ColPivHouseholderQR<Eigen::MatrixXd>(X).rank() < p)
      throw std::invalid_argument("multinomial: rank-deficient design matrix");
  }

  MultinomialFit fit;
  fit.coef = init ? *init : Eigen::MatrixXd::Zero(c - 1, p);
  double ll = detail::weighted_multinomial_loglik(X, cat, w, fit.coef);

  const long dim = (c - 1) * p;
  Eigen::VectorXd g(dim);
  Eigen::MatrixXd H(dim, dim);
  for (int it = 0; it < opt.max_iter; ++it) {
    Eigen::MatrixXd P = detail::multinomial_probs(X, fit.coef);
    Eigen::MatrixXd R = -P;  // indicator minus probability
    for (long i = 0; i < n; ++i) R(i, cat[i]) += 1.0;
    for (int a = 1; a < c; ++a)
      g.segment((a - 1) * p, p) = X.transpose() * (w.array() * R.col(a).array()).matrix();
    fit.grad_norm = g.norm();
    fit.iterations = it;
    if (fit.grad_norm < opt.grad_tol) {
      fit.converged = true;
      break;
    }
    for (int a = 1; a < c; ++a)
      for (int b = 1; b < c; ++b) {
        Eigen::VectorXd wab =
            (w.array() * P.col(a).array() * ((a == b ? 1.0 : 0.0) - P.col(b).array())).matrix();
        H.block((a - 1) * p, (b - 1) * p, p, p) = -(X.transpose() * wab.asDiagonal() * X);
      }
    Eigen::VectorXd step = (-H).ldlt().solve(g);
    if (!step.allFinite()) break;  // singular information: separation or collinearity
    double t = 1.0;
    Eigen::MatrixXd trial;
    double trial_ll = ll;
    bool improved = false;
    for (int h = 0; h < 40; ++h) {
      trial = fit.coef;
      for (int a = 1; a < c; ++a) trial.row(a - 1) += t * step.segment((a - 1) * p, p).transpose();
      trial_ll = detail::weighted_multinomial_loglik(X, cat, w, trial);
      if (trial_ll >= ll - 1e-12 * (1.0 + std::fabs(ll))) {
        improved = true;
        break;
      }
      t *= 0.5;
    }
    if (!improved) break;
    fit.coef = trial;
    ll = trial_ll;
  }
  fit.loglik = ll;
  if (fit.converged) {
    // perfect classification means separation: the MLE does not exist
    Eigen::MatrixXd P = detail::multinomial_probs(X, fit.coef);
    bool perfect = true;
    for (long i = 0; i < n && perfect; ++i)
      if (w[i] > 0.0 && P(i, cat[i]) < 1.0 - 1e-6) perfect = false;
    if (perfect) fit.converged = false;
  }
  return fit;
}

}  // namespace sace
