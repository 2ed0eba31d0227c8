#pragma once

#include "hdpgpc/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hdpgpc {

/// Squared-exponential kernel hyperparameters. Used both for the cluster
/// morphology kernel (theta) and the time-warp prior kernel (vartheta).
struct KernelParams {
  double sigma_f = 1.0;      ///< signal std-dev, data units
  double length_scale = 1.0; ///< time units
  double sigma_n = 0.1;      ///< noise std-dev, data units

  void validate() const {
    if (!(sigma_f > 0.0) || !(length_scale > 0.0) || !(sigma_n > 0.0) ||
        !std::isfinite(sigma_f) || !std::isfinite(length_scale) || !std::isfinite(sigma_n))
      throw std::invalid_argument("KernelParams: all parameters must be strictly positive and finite");
  }
};

/// k(t,t') = sigma_f^2 exp(-(t-t')^2 / (2 l^2)) + sigma_n^2 delta_{t,t'}.
/// The delta fires only on diagonal entries whose time values match exactly,
/// i.e. when t1 and t2 hold the same support; cross-covariances between
/// distinct supports stay noise-free.
inline Mat sqexp_cov(const Vec& t1, const Vec& t2, const KernelParams& p, bool include_noise) {
  p.validate();
  if (t1.size() == 0 || t2.size() == 0)
    throw std::invalid_argument("sqexp_cov: empty time vector");
  if (!t1.allFinite() || !t2.allFinite())
    throw std::invalid_argument("sqexp_cov: non-finite time values");

  const double sf2 = p.sigma_f * p.sigma_f;
  const double inv_2l2 = 0.5 / (p.length_scale * p.length_scale);
  Mat k(t1.size(), t2.size());
  for (Eigen::Index i = 0; i < t1.size(); ++i)
    for (Eigen::Index j = 0; j < t2.size(); ++j) {
      const double d = t1[i] - t2[j];
      k(i, j) = sf2 * std::exp(-d * d * inv_2l2);
    }
  if (include_noise) {
    const double sn2 = p.sigma_n * p.sigma_n;
    const Eigen::Index n = std::min(t1.size(), t2.size());
    for (Eigen::Index i = 0; i < n; ++i)
      if (t1[i] == t2[i]) k(i, i) += sn2;
  }
  return k;
}

/// log N(y | 0, K + sigma_n^2 I) under the zero-mean GP prior.
inline double log_marginal_likelihood(const Vec& t, const Vec& y, const KernelParams& p) {
  if (t.size() != y.size())
    throw std::invalid_argument("log_marginal_likelihood: |t| != |y|");
  const Mat ky = sqexp_cov(t, t, p, true);
  const JitteredLLT f = jittered_llt(ky, p.sigma_f * p.sigma_f);
  return gaussian_log_density(y, f);
}

struct KernelBounds {
  KernelParams lower{1e-8, 1e-6, 1e-8};
  KernelParams upper{1e8, 1e6, 1e8};

  bool contains(const KernelParams& p) const {
    return p.sigma_f >= lower.sigma_f && p.sigma_f <= upper.sigma_f &&
           p.length_scale >= lower.length_scale && p.length_scale <= upper.length_scale &&
           p.sigma_n >= lower.sigma_n && p.sigma_n <= upper.sigma_n;
  }
};

struct KernelFit {
  KernelParams params;
  double log_ml = 0.0;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

// Gradient of the (jittered) log marginal likelihood w.r.t. the
// log-parameters (log sigma_f, log l, log sigma_n).
inline Eigen::Vector3d lml_log_gradient(const Vec& t, const Vec& y, const KernelParams& p) {
  const Mat kse = sqexp_cov(t, t, p, false);
  Mat ky = kse;
  ky.diagonal().array() += p.sigma_n * p.sigma_n;
  const JitteredLLT f = jittered_llt(ky, p.sigma_f * p.sigma_f);
  const Eigen::Index q = t.size();
  const Vec alpha = f.solve(y);
  const Mat kinv = f.solve(Mat::Identity(q, q));
  const Mat pm = alpha * alpha.transpose() - kinv;

  Mat d2(q, q);
  for (Eigen::Index i = 0; i < q; ++i)
    for (Eigen::Index j = 0; j < q; ++j) {
      const double d = t[i] - t[j];
      d2(i, j) = d * d;
    }
  const double l2 = p.length_scale * p.length_scale;
  Eigen::Vector3d g;
  // d/dlog(sigma_f): dK = 2 Kse + 2 jitter I (the jitter scales with sigma_f^2)
  g[0] = pm.cwiseProduct(kse).sum() + f.jitter * pm.trace();
  g[1] = 0.5 * pm.cwiseProduct(kse.cwiseProduct(d2 / l2)).sum();
  g[2] = p.sigma_n * p.sigma_n * pm.trace();
  return g;
}

}  // namespace detail

/// Maximum-likelihood ascent over log-parameters with box bounds.
/// Backtracking gradient ascent; the returned parameters never score below
/// the init (best-so-far is kept on non-convergence).
inline KernelFit fit_hyperparams(const Vec& t, const Vec& y, const KernelParams& init,
                                 const KernelBounds& bounds = {}, int max_iter = 100) {
  init.validate();
  if (!bounds.contains(init))
    throw std::invalid_argument("fit_hyperparams: init outside bounds");

  auto to_log = [](const KernelParams& p) {
    return Eigen::Vector3d(std::log(p.sigma_f), std::log(p.length_scale), std::log(p.sigma_n));
  };
  auto from_log = [](const Eigen::Vector3d& v) {
    return KernelParams{std::exp(v[0]), std::exp(v[1]), std::exp(v[2])};
  };
  const Eigen::Vector3d lo = to_log(bounds.lower);
  const Eigen::Vector3d hi = to_log(bounds.upper);
  auto clamp = [&](Eigen::Vector3d v) {
    for (int i = 0; i < 3; ++i) v[i] = std::clamp(v[i], lo[i], hi[i]);
    return v;
  };

  Eigen::Vector3d rho = clamp(to_log(init));
  double cur = log_marginal_likelihood(t, y, from_log(rho));
  KernelFit best{from_log(rho), cur, 0, false};

  double step = 0.1;
  int it = 0;
  for (; it < max_iter; ++it) {
    Eigen::Vector3d grad;
    try {
      grad = detail::lml_log_gradient(t, y, from_log(rho));
    } catch (const FactorizationError&) {
      break;
    }
    if (!grad.allFinite() || grad.norm() < 1e-10 * (1.0 + std::abs(cur))) {
      best.converged = true;
      break;
    }
    bool improved = false;
    double next = cur;
    for (int ls = 0; ls < 40; ++ls) {
      const Eigen::Vector3d cand = clamp(rho + step * grad);
      double val;
      try {
        val = log_marginal_likelihood(t, y, from_log(cand));
      } catch (const FactorizationError&) {
        step *= 0.5;
        continue;
      }
      if (std::isfinite(val) && val > cur) {
        rho = cand;
        next = val;
        improved = true;
        step = std::min(step * 2.0, 1e3);
        break;
      }
      step *= 0.5;
      if (step < 1e-14) break;
    }
    if (!improved) {
      best.converged = true;
      break;
    }
    const double gain = next - cur;
    cur = next;
    if (cur > best.log_ml) {
      best.params = from_log(rho);
      best.log_ml = cur;
    }
    if (gain < 1e-9 * (1.0 + std::abs(cur))) {
      best.converged = true;
      break;
    }
  }
  best.iterations = it;
  return best;
}

}  // namespace hdpgpc
