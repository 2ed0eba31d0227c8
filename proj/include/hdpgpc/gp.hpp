#pragma once

#include "hdpgpc/kernel.hpp"

#include <stdexcept>

namespace hdpgpc {

/// Finite Gaussian belief over a latent process at a set of support points.
struct GPBelief {
  Vec mean;
  Mat cov;
  Vec support;
  KernelParams kernel;

  void validate() const {
    if (mean.size() != support.size() || cov.rows() != cov.cols() || cov.rows() != mean.size())
      throw std::invalid_argument("GPBelief: inconsistent sizes");
  }
};

/// GP regression: posterior over the latent f at t_test given noisy (t_train, y_train).
inline GPBelief gp_condition(const KernelParams& prior_kernel, const Vec& t_train,
                             const Vec& y_train, const Vec& t_test) {
  if (t_train.size() != y_train.size())
    throw std::invalid_argument("gp_condition: |t_train| != |y_train|");
  GPBelief out;
  out.support = t_test;
  out.kernel = prior_kernel;
  const Mat ktest = sqexp_cov(t_test, t_test, prior_kernel, false);
  if (t_train.size() == 0) {
    out.mean = Vec::Zero(t_test.size());
    out.cov = ktest;
    return out;
  }
  const Mat ktt = sqexp_cov(t_train, t_train, prior_kernel, true);
  const JitteredLLT f = jittered_llt(ktt, prior_kernel.sigma_f * prior_kernel.sigma_f);
  const Mat kxt = sqexp_cov(t_test, t_train, prior_kernel, false);
  const Mat sol = f.solve(Mat(kxt.transpose()));  // train x test
  out.mean = sol.transpose() * y_train;
  out.cov = symmetrize(ktest - kxt * sol);
  return out;
}

/// A reduced set of p support locations a GP belief is projected onto.
struct InducingSet {
  Vec locations;

  void validate() const {
    if (locations.size() == 0) throw std::invalid_argument("InducingSet: empty");
    for (Eigen::Index i = 1; i < locations.size(); ++i)
      if (!(locations[i] > locations[i - 1]))
        throw std::invalid_argument("InducingSet: locations must be strictly increasing");
  }

  bool covers(const Vec& support) const {
    return support.minCoeff() >= locations[0] - 1e-12 &&
           support.maxCoeff() <= locations[locations.size() - 1] + 1e-12;
  }

  /// Uniform grid over the span of t with p = min(|t|, p) points.
  static InducingSet uniform(const Vec& t, int p) {
    if (t.size() < 2) throw std::invalid_argument("InducingSet::uniform: need >= 2 points");
    const int n = std::min<int>(p, static_cast<int>(t.size()));
    if (n < 2) throw std::invalid_argument("InducingSet::uniform: p must be >= 2");
    InducingSet out;
    out.locations = Vec::LinSpaced(n, t[0], t[t.size() - 1]);
    return out;
  }
};

/// KL-optimal projection of a belief at q support points onto p <= q inducing
/// locations: the prior conditional of f at the inducing points given f at the
/// support, with the belief's moments propagated through it.
inline GPBelief project_to_inducing(const GPBelief& belief, const InducingSet& ind) {
  belief.validate();
  ind.validate();
  if (ind.locations.size() > belief.support.size())
    throw std::invalid_argument("project_to_inducing: p > q");
  if (ind.locations.size() == belief.support.size() && ind.locations == belief.support)
    return belief;  // projection is the identity on an identical support

  const Vec& s = belief.support;
  const Vec& z = ind.locations;
  const KernelParams& k = belief.kernel;
  const double sf2 = k.sigma_f * k.sigma_f;
  const Mat kss = sqexp_cov(s, s, k, false);
  const JitteredLLT f = jittered_llt(kss, sf2);
  const Mat kzs = sqexp_cov(z, s, k, false);
  const Mat proj = f.solve(Mat(kzs.transpose())).transpose();  // p x q
  GPBelief out;
  out.support = z;
  out.kernel = k;
  out.mean = proj * belief.mean;
  const Mat kzz = sqexp_cov(z, z, k, false);
  out.cov = symmetrize(kzz - proj * kzs.transpose() + proj * belief.cov * proj.transpose());
  return out;
}

/// Marginal of the observation process at warped locations, given a belief
/// over the pseudo-observation process x on its support:
///   mean = K_{w,s} K_{s,s}^{-1} E[x]
///   cov  = K_{w,w} - K_{w,s} K_{s,s}^{-1} K_{s,w}
///        + K_{w,s} K_{s,s}^{-1} cov(x) K_{s,s}^{-1} K_{s,w}
inline GPBelief predict_at_warp(const GPBelief& x_belief, const Vec& t_obs, const Vec& t_warped) {
  x_belief.validate();
  if (t_obs.size() != t_warped.size())
    throw std::invalid_argument("predict_at_warp: |t_obs| != |t_warped|");
  const Vec& s = x_belief.support;
  const KernelParams& k = x_belief.kernel;
  const Mat kss = sqexp_cov(s, s, k, true);
  const JitteredLLT f = jittered_llt(kss, k.sigma_f * k.sigma_f);
  const Mat kws = sqexp_cov(t_warped, s, k, false);
  const Mat g = f.solve(Mat(kws.transpose()));  // p x q
  GPBelief out;
  out.support = t_warped;
  out.kernel = k;
  out.mean = g.transpose() * x_belief.mean;
  const Mat kww = sqexp_cov(t_warped, t_warped, k, true);
  out.cov = symmetrize(kww - kws * g + g.transpose() * x_belief.cov * g);
  return out;
}

}  // namespace hdpgpc
