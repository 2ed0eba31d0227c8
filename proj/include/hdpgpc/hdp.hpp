#pragma once

#include "hdpgpc/linalg.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <cmath>
#include <functional>
#include <stdexcept>

namespace hdpgpc {

using boost::math::digamma;

struct HDPConfig {
  double gamma = 10.0;
  double alpha = 20.0;

  void validate() const {
    if (!(gamma > 0.0) || !(alpha > 0.0))
      throw std::invalid_argument("HDPConfig: concentrations must be positive");
  }
};

/// Beta posteriors over the stick-breaking weights:
/// q(v_k) = Beta(lambda_k eta_k, (1 - lambda_k) eta_k).
struct StickPosterior {
  Vec lambda;
  Vec eta;

  int truncation() const { return static_cast<int>(lambda.size()); }

  void validate() const {
    if (lambda.size() != eta.size()) throw std::invalid_argument("StickPosterior: size mismatch");
    for (Eigen::Index k = 0; k < lambda.size(); ++k)
      if (!(lambda[k] > 0.0 && lambda[k] < 1.0 && eta[k] > 0.0))
        throw std::invalid_argument("StickPosterior: lambda in (0,1), eta > 0 required");
  }

  static StickPosterior prior(const HDPConfig& cfg, int k) {
    StickPosterior s;
    s.lambda = Vec::Constant(k, 1.0 / (1.0 + cfg.gamma));
    s.eta = Vec::Constant(k, 1.0 + cfg.gamma);
    return s;
  }
};

/// E[beta_k] = lambda_k prod_{j<k} (1 - lambda_j); entry K+1 is the remainder,
/// computed as the complement so the vector sums to one.
inline Vec expected_beta(const StickPosterior& sticks) {
  sticks.validate();
  const int k = sticks.truncation();
  Vec beta(k + 1);
  double rest = 1.0;
  double used = 0.0;
  for (int i = 0; i < k; ++i) {
    beta[i] = sticks.lambda[i] * rest;
    used += beta[i];
    rest *= 1.0 - sticks.lambda[i];
  }
  beta[k] = 1.0 - used;
  return beta;
}

/// Dirichlet posteriors over transition rows. Rows j = 0..K (row 0 is the
/// initial-state row), columns k = 1..K+1 with the last column holding the
/// aggregate inactive mass.
struct TransitionPosterior {
  Mat kappa;  // (K+1) x (K+1)

  int truncation() const { return static_cast<int>(kappa.cols()) - 1; }

  void validate() const {
    if (kappa.rows() != kappa.cols() || kappa.rows() < 2)
      throw std::invalid_argument("TransitionPosterior: kappa must be (K+1)x(K+1), K >= 1");
    if ((kappa.array() <= 0.0).any())
      throw std::invalid_argument("TransitionPosterior: entries must be positive");
  }
};

/// kappa_jk = alpha E[beta_k] + N_jk. N's last column must be zero (the
/// inactive aggregate receives no data mass).
inline TransitionPosterior update_transition_posterior(const HDPConfig& cfg,
                                                       const StickPosterior& sticks,
                                                       const Mat& counts) {
  cfg.validate();
  const int k = sticks.truncation();
  if (counts.rows() != k + 1 || counts.cols() != k + 1)
    throw std::invalid_argument("update_transition_posterior: counts must be (K+1)x(K+1)");
  if ((counts.array() < 0.0).any())
    throw std::invalid_argument("update_transition_posterior: negative counts");
  if (counts.col(k).cwiseAbs().maxCoeff() != 0.0)
    throw std::invalid_argument("update_transition_posterior: inactive column must be zero");
  const Vec beta = expected_beta(sticks);
  TransitionPosterior out;
  out.kappa = counts;
  out.kappa.rowwise() += (cfg.alpha * beta).transpose();
  return out;
}

/// E[log pi_jk] = psi(kappa_jk) - psi(sum_k kappa_jk).
inline Mat expected_log_pi(const TransitionPosterior& trans) {
  trans.validate();
  Mat out(trans.kappa.rows(), trans.kappa.cols());
  for (Eigen::Index j = 0; j < trans.kappa.rows(); ++j) {
    const double row_sum = trans.kappa.row(j).sum();
    const double psi_sum = digamma(row_sum);
    for (Eigen::Index k = 0; k < trans.kappa.cols(); ++k)
      out(j, k) = digamma(trans.kappa(j, k)) - psi_sum;
  }
  return out;
}

inline double beta_entropy(double a, double b) {
  const double lbeta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  return lbeta - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) +
         (a + b - 2.0) * digamma(a + b);
}

inline double dirichlet_entropy(const Vec& kappa) {
  const double k0 = kappa.sum();
  double lbeta = -std::lgamma(k0);
  double psi_part = 0.0;
  for (Eigen::Index i = 0; i < kappa.size(); ++i) {
    lbeta += std::lgamma(kappa[i]);
    psi_part += (kappa[i] - 1.0) * digamma(kappa[i]);
  }
  return lbeta + (k0 - static_cast<double>(kappa.size())) * digamma(k0) - psi_part;
}

/// The v-dependent terms of the HDP part of the lower bound:
///   E[log p(pi|v,alpha)] + E[log p(v|gamma)] - E[log q(v)],
/// with E[beta] plugged into the Dirichlet log-normalizer.
inline double stick_objective(const HDPConfig& cfg, const Mat& elog_pi, const Vec& lambda,
                              const Vec& eta) {
  const int k = static_cast<int>(lambda.size());
  StickPosterior s{lambda, eta};
  const Vec beta = expected_beta(s);
  double val = 0.0;
  for (Eigen::Index j = 0; j < elog_pi.rows(); ++j) {
    val += std::lgamma(cfg.alpha);
    for (int c = 0; c <= k; ++c) {
      const double ab = cfg.alpha * std::max(beta[c], 1e-300);
      val += -std::lgamma(ab) + (ab - 1.0) * elog_pi(j, c);
    }
  }
  for (int i = 0; i < k; ++i) {
    const double a = lambda[i] * eta[i];
    const double b = (1.0 - lambda[i]) * eta[i];
    val += std::log(cfg.gamma) + (cfg.gamma - 1.0) * (digamma(b) - digamma(eta[i]));
    val += beta_entropy(a, b);
  }
  return val;
}

struct StickOptResult {
  StickPosterior sticks;
  double objective = 0.0;
  bool improved = false;
};

namespace detail {

// Coarse grid plus golden-section refinement; the argument is mapped through
// `to_x` (identity or exp for log-scale searches).
inline double line_max(const std::function<double(double)>& f, double lo, double hi,
                       double& arg_best) {
  constexpr int kGrid = 16;
  double best_u = lo, best_v = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= kGrid; ++i) {
    const double u = lo + (hi - lo) * i / kGrid;
    const double v = f(u);
    if (std::isfinite(v) && v > best_v) {
      best_v = v;
      best_u = u;
    }
  }
  double a = std::max(lo, best_u - (hi - lo) / kGrid);
  double b = std::min(hi, best_u + (hi - lo) / kGrid);
  const double gr = 0.6180339887498949;
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  double f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < 40; ++it) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + gr * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - gr * (b - a);
      f1 = f(x1);
    }
  }
  const double u = 0.5 * (a + b);
  const double v = f(u);
  if (v >= best_v) {
    arg_best = u;
    return v;
  }
  arg_best = best_u;
  return best_v;
}

}  // namespace detail

/// Coordinate ascent on (lambda_k, eta_k) per stick, lambda in (1e-4, 1-1e-4),
/// eta in (1e-2, 1e4) searched on a log scale. Returns `current` unchanged
/// (improved = false) when no ascent step is found.
inline StickOptResult optimize_sticks(const HDPConfig& cfg, const TransitionPosterior& trans,
                                      const StickPosterior& current) {
  cfg.validate();
  current.validate();
  const Mat elog_pi = expected_log_pi(trans);
  Vec lam = current.lambda;
  Vec eta = current.eta;
  const double f0 = stick_objective(cfg, elog_pi, lam, eta);
  double f = f0;
  const int k = current.truncation();
  for (int round = 0; round < 2; ++round) {
    for (int i = 0; i < k; ++i) {
      double arg = lam[i];
      const double fl = detail::line_max(
          [&](double x) {
            Vec l2 = lam;
            l2[i] = x;
            return stick_objective(cfg, elog_pi, l2, eta);
          },
          1e-4, 1.0 - 1e-4, arg);
      if (fl > f) {
        lam[i] = arg;
        f = fl;
      }
      double log_arg = std::log(eta[i]);
      const double fe = detail::line_max(
          [&](double x) {
            Vec e2 = eta;
            e2[i] = std::exp(x);
            return stick_objective(cfg, elog_pi, lam, e2);
          },
          std::log(1e-2), std::log(1e4), log_arg);
      if (fe > f) {
        eta[i] = std::exp(log_arg);
        f = fe;
      }
    }
  }
  if (f > f0) return {StickPosterior{lam, eta}, f, true};
  return {current, f0, false};
}

}  // namespace hdpgpc
