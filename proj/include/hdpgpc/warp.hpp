#pragma once

#include "hdpgpc/gp.hpp"
#include "hdpgpc/segment.hpp"

#include <cmath>
#include <stdexcept>

namespace hdpgpc {

/// Unconstrained auxiliary variables parameterizing a monotonic warp.
struct WarpAux {
  Vec a;

  static WarpAux identity(Eigen::Index q) { return WarpAux{Vec::Zero(q)}; }
};

/// Monotonic warped time grid. `g` lives on the scaled abstract grid
/// (identity = grid_scale * (1, 2, ..., Q), final value Q * grid_scale
/// exactly); `warped_times()` maps it onto the segment's physical span.
struct WarpFunction {
  Vec g;
  Vec source_grid;
  double grid_scale = 1.0;

  Vec warped_times() const {
    if (source_grid.size() != g.size())
      throw std::invalid_argument("WarpFunction: no source grid attached");
    return (g.array() - grid_scale + source_grid[0]).matrix();
  }
};

/// g_q = Q * grid_scale * cumsum(softmax(a))_q. Strictly increasing for any
/// finite a, with the endpoint hit exactly.
inline WarpFunction warp_from_aux(const WarpAux& aux, double grid_scale) {
  const Eigen::Index q = aux.a.size();
  if (q < 2) throw std::invalid_argument("warp_from_aux: Q must be >= 2");
  if (!aux.a.allFinite()) throw std::invalid_argument("warp_from_aux: non-finite aux");
  const double amax = aux.a.maxCoeff();
  Vec e = (aux.a.array() - amax).exp();
  const double total = e.sum();
  WarpFunction w;
  w.grid_scale = grid_scale;
  w.g.resize(q);
  double run = 0.0;
  const double top = grid_scale * static_cast<double>(q);
  for (Eigen::Index i = 0; i < q; ++i) {
    run += e[i];
    w.g[i] = top * (run / total);
  }
  w.g[q - 1] = top;  // run/total == 1 analytically; pin the endpoint bit-exactly
  return w;
}

/// Warp for a segment grid t: grid_scale = (t_Q - t_1)/(Q-1), physical warped
/// times start at t_1 and end at t_Q.
inline WarpFunction warp_for_grid(const WarpAux& aux, const Vec& t) {
  if (t.size() != aux.a.size())
    throw std::invalid_argument("warp_for_grid: |a| != |t|");
  const double scale = (t[t.size() - 1] - t[0]) / static_cast<double>(t.size() - 1);
  WarpFunction w = warp_from_aux(aux, scale);
  w.source_grid = t;
  return w;
}

/// log N(g | t, K^vartheta_{t,t}): GP prior on the warp around the identity map.
inline double warp_log_prior(const WarpFunction& warp, const KernelParams& vartheta, const Vec& t) {
  if (warp.g.size() != t.size())
    throw std::invalid_argument("warp_log_prior: |g| != |t|");
  WarpFunction w = warp;
  if (w.source_grid.size() == 0) w.source_grid = t;
  const Vec resid = w.warped_times() - t;
  const Mat k = sqexp_cov(t, t, vartheta, true);
  const JitteredLLT f = jittered_llt(k, vartheta.sigma_f * vartheta.sigma_f);
  return gaussian_log_density(resid, f);
}

struct WarpOptions {
  int max_iter = 100;
  double rel_tol = 1e-6;
};

struct MapWarpResult {
  WarpAux aux;
  WarpFunction warp;
  double objective = 0.0;
  bool converged = false;
  int iterations = 0;
};

namespace detail {

// State shared across objective/gradient evaluations of one map_warp call.
struct WarpObjective {
  const Vec& t;
  const Vec& y;
  const Vec& s;        // x-belief support
  KernelParams theta;
  KernelParams vartheta;
  double scale;
  JitteredLLT b_llt;   // K_{s,s} with noise
  Vec b;               // K_{s,s}^{-1} E[x]
  JitteredLLT prior_llt;

  WarpObjective(const Segment& seg, const GPBelief& x_belief, const KernelParams& th,
                const KernelParams& vth)
      : t(seg.t), y(seg.y), s(x_belief.support), theta(th), vartheta(vth),
        scale((seg.t[seg.t.size() - 1] - seg.t[0]) / static_cast<double>(seg.t.size() - 1)),
        b_llt(jittered_llt(sqexp_cov(x_belief.support, x_belief.support, th, true),
                           th.sigma_f * th.sigma_f)),
        b(b_llt.solve(x_belief.mean)),
        prior_llt(jittered_llt(sqexp_cov(seg.t, seg.t, vth, true), vth.sigma_f * vth.sigma_f)) {}

  Vec warped(const WarpAux& aux) const {
    WarpFunction w = warp_from_aux(aux, scale);
    return (w.g.array() - scale + t[0]).matrix();
  }

  // value only (line search)
  double value(const WarpAux& aux) const {
    const Vec w = warped(aux);
    const Mat kws = sqexp_cov(w, s, theta, false);
    const Mat g = b_llt.solve(Mat(kws.transpose()));
    Mat sigma = symmetrize(sqexp_cov(w, w, theta, true) - kws * g);
    const JitteredLLT sf = jittered_llt(sigma, theta.sigma_f * theta.sigma_f);
    const Vec resid = y - kws * b;
    const Vec dw = w - t;
    return gaussian_log_density(resid, sf) + gaussian_log_density(dw, prior_llt);
  }

  // value and gradient w.r.t. aux
  double value_grad(const WarpAux& aux, Vec& grad_out) const {
    const Eigen::Index q = t.size();
    const Eigen::Index p = s.size();
    const Vec w = warped(aux);
    const double sf2 = theta.sigma_f * theta.sigma_f;
    const double inv_l2 = 1.0 / (theta.length_scale * theta.length_scale);

    Mat kws(q, p), kdot_ws(q, p);
    for (Eigen::Index i = 0; i < q; ++i)
      for (Eigen::Index j = 0; j < p; ++j) {
        const double d = w[i] - s[j];
        const double v = sf2 * std::exp(-0.5 * d * d * inv_l2);
        kws(i, j) = v;
        kdot_ws(i, j) = -d * inv_l2 * v;
      }
    Mat kww(q, q), kdot_ww(q, q);
    for (Eigen::Index i = 0; i < q; ++i)
      for (Eigen::Index j = 0; j < q; ++j) {
        const double d = w[i] - w[j];
        const double v = sf2 * std::exp(-0.5 * d * d * inv_l2);
        kww(i, j) = v;
        kdot_ww(i, j) = -d * inv_l2 * v;
      }
    kww.diagonal().array() += theta.sigma_n * theta.sigma_n;

    const Mat g = b_llt.solve(Mat(kws.transpose()));  // p x q
    Mat sigma = symmetrize(kww - kws * g);
    const JitteredLLT sf = jittered_llt(sigma, sf2);
    const Vec mu = kws * b;
    const Vec resid = y - mu;
    const Vec alpha = sf.solve(resid);
    const Vec dw = w - t;
    const Vec prior_alpha = prior_llt.solve(dw);
    const double val = -0.5 * resid.dot(alpha) - 0.5 * sf.log_det() -
                       0.5 * kLog2Pi * static_cast<double>(q) +
                       gaussian_log_density(dw, prior_llt);

    // dF/dw_i = alpha_i d_i + sum_j P_ij (Kdot_ww_ij - U_ij) - prior_alpha_i
    const Mat sinv = sf.solve(Mat::Identity(q, q));
    const Mat pm = alpha * alpha.transpose() - sinv;
    const Vec d = kdot_ws * b;
    const Mat u = kdot_ws * g;  // q x q
    Vec phi(q);
    for (Eigen::Index i = 0; i < q; ++i)
      phi[i] = alpha[i] * d[i] + pm.row(i).dot(kdot_ww.row(i) - u.row(i)) - prior_alpha[i];

    // chain rule through w = t1 + g - scale, g_i = Q*scale*cumsum(softmax(a))_i
    const double amax = aux.a.maxCoeff();
    Vec e = (aux.a.array() - amax).exp();
    const double total = e.sum();
    const Vec sm = e / total;
    Vec cums(q);
    double run = 0.0;
    for (Eigen::Index i = 0; i < q; ++i) {
      run += sm[i];
      cums[i] = run;
    }
    const double dot_phi_s = phi.dot(cums);
    double suffix = 0.0;
    grad_out.resize(q);
    const double top = scale * static_cast<double>(q);
    for (Eigen::Index j = q - 1; j >= 0; --j) {
      suffix += phi[j];
      grad_out[j] = top * sm[j] * (suffix - dot_phi_s);
    }
    return val;
  }
};

}  // namespace detail

/// MAP estimate of the warp aligning a segment to a cluster's pseudo-observation
/// belief: ascends log p(y | m_x(g), K^x_{g,g}) + log p(g | t) over the aux
/// variables. Returns best-so-far with converged=false if the iteration cap is
/// hit while still improving.
inline MapWarpResult map_warp(const Segment& segment, const GPBelief& x_belief,
                              const KernelParams& theta, const KernelParams& vartheta,
                              const WarpAux& init, const WarpOptions& opts = {}) {
  segment.validate();
  if (init.a.size() != segment.t.size())
    throw std::invalid_argument("map_warp: |init.a| != |t|");

  detail::WarpObjective obj(segment, x_belief, theta, vartheta);
  auto recenter = [](Vec a) { return Vec(a.array() - a.mean()); };

  Vec a = recenter(init.a);
  Vec grad;
  double cur = obj.value_grad(WarpAux{a}, grad);
  MapWarpResult best;
  best.aux = WarpAux{a};
  best.objective = cur;

  double step = 1.0;
  int it = 0;
  bool converged = false;
  for (; it < opts.max_iter; ++it) {
    if (!grad.allFinite() || grad.norm() < 1e-12 * (1.0 + std::abs(cur))) {
      converged = true;
      break;
    }
    bool improved = false;
    for (int ls = 0; ls < 40 && !improved; ++ls) {
      const Vec cand = recenter(a + step * grad);
      double val;
      try {
        val = obj.value(WarpAux{cand});
      } catch (const FactorizationError&) {
        step *= 0.5;
        continue;
      }
      if (std::isfinite(val) && val > cur) {
        const double gain = val - cur;
        a = cand;
        cur = val;
        improved = true;
        step = std::min(step * 2.0, 1e6);
        if (cur > best.objective) {
          best.objective = cur;
          best.aux = WarpAux{a};
        }
        if (gain < opts.rel_tol * (1.0 + std::abs(cur))) {
          converged = true;
        }
      } else {
        step *= 0.5;
        if (step < 1e-16) break;
      }
    }
    if (!improved || converged) {
      converged = converged || !improved;
      break;
    }
    cur = obj.value_grad(WarpAux{a}, grad);
  }
  best.converged = converged;
  best.iterations = it;
  best.warp = warp_for_grid(best.aux, segment.t);
  return best;
}

}  // namespace hdpgpc
