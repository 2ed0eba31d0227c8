#pragma once

#include "hdpgpc/gp.hpp"
#include "hdpgpc/warp.hpp"

#include <stdexcept>
#include <vector>

namespace hdpgpc {

/// Matrix-normal inverse-Wishart posterior for one linear map and its noise:
/// A | Sigma ~ MN(M, Sigma, V^{-1}) with V the column-side precision matrix,
/// Sigma ~ IW(dof, S).
struct MNIWPosterior {
  Mat M;
  Mat V;
  Mat S;
  double dof = 0.0;

  int rows() const { return static_cast<int>(M.rows()); }

  void validate() const {
    if (M.rows() == 0 || V.rows() != V.cols() || S.rows() != S.cols() ||
        V.rows() != M.cols() || S.rows() != M.rows())
      throw std::invalid_argument("MNIWPosterior: inconsistent shapes");
    if (!(dof > static_cast<double>(S.rows()) - 1.0))
      throw std::invalid_argument("MNIWPosterior: dof must exceed dim - 1");
  }

  /// Identity-mean prior with column precision v_scale*I, IW scale `noise`.
  static MNIWPosterior identity_prior(const Mat& noise, double dof_, double v_scale = 1.0) {
    MNIWPosterior p;
    const Eigen::Index d = noise.rows();
    p.M = Mat::Identity(d, d);
    p.V = v_scale * Mat::Identity(d, d);
    p.S = noise;
    p.dof = dof_;
    return p;
  }

  /// Expected noise covariance (inverse-Wishart mean), defined for dof > dim + 1.
  Mat iw_mean() const {
    const double denom = dof - static_cast<double>(S.rows()) - 1.0;
    return S / std::max(denom, 1.0);
  }
};

/// Responsibility-weighted second-moment sums for one linear-regression block
/// u = A z + noise: Szz = sum w E[z z^T], Suz = sum w E[u z^T],
/// Suu = sum w E[u u^T], count = sum of weights.
struct RegressionStats {
  Mat Szz;
  Mat Suz;
  Mat Suu;
  double count = 0.0;

  static RegressionStats zero(Eigen::Index u_dim, Eigen::Index z_dim) {
    return {Mat::Zero(z_dim, z_dim), Mat::Zero(u_dim, z_dim), Mat::Zero(u_dim, u_dim), 0.0};
  }
};

/// Conjugate MNIW update. The prior terms are folded into the Psi statistics:
///   Psi_zz = Szz + V, Psi_uz = Suz + M V, Psi_uu = Suu + M V M^T,
///   M~ = Psi_uz Psi_zz^{-1}, V~ = Psi_zz, S~ = Psi_uu - M~ Psi_uz^T + S,
///   dof~ = count + dof.
inline MNIWPosterior mniw_update(const MNIWPosterior& prior, const RegressionStats& stats) {
  prior.validate();
  if (stats.count < 0.0) throw std::invalid_argument("mniw_update: negative count");
  const Mat psi_zz = stats.Szz + prior.V;
  const Mat psi_uz = stats.Suz + prior.M * prior.V;
  const Mat psi_uu = stats.Suu + prior.M * prior.V * prior.M.transpose();
  const JitteredLLT f = jittered_llt(psi_zz, mean_abs_diagonal(psi_zz));
  MNIWPosterior post;
  post.M = f.solve(Mat(psi_uz.transpose())).transpose();
  post.V = symmetrize(psi_zz);
  post.S = symmetrize(psi_uu - post.M * psi_uz.transpose()) + prior.S;
  post.dof = stats.count + prior.dof;
  return post;
}

struct GaussState {
  Vec mean;
  Mat cov;
};

/// Phi = (C P C^T + S_eps) / r, the responsibility-scaled innovation noise.
inline Mat innovation_noise(const Mat& c, const Mat& p, const Mat& s_eps, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("innovation_noise: r must be positive");
  return (c * p * c.transpose() + s_eps) / r;
}

/// Per-step observation operator: y = Khat C f + residual, with the GP
/// interpolation residual covariance Rgp = K_{g,g} - Khat K_{z,g}.
struct ObservationModel {
  Mat khat;  // q x p
  Mat rgp;   // q x q
};

struct FilterMatrices {
  Mat A;
  Mat C;
  Mat Sw;
  Mat Se;
};

/// Below this responsibility the update is skipped and filtered = predicted.
inline constexpr double kFilterSkipR = 1e-12;

struct ChainStep {
  Vec pred_mean;
  Mat pred_cov;  // P_{m|m-1}
  Vec filt_mean;
  Mat filt_cov;
  Vec smooth_mean;
  Mat smooth_cov;
  Mat lag_one;   // Cov(f_m, f_{m-1}); empty at the first step
  double cond_log_det = 0.0;  // log |cov(f_m | f_{m+1})|, filled by the smoother
  double r = 1.0;
  bool updated = false;
};

/// One forward (filtering) step:
///   P = A Sig A^T + Sw,  Phi = (C P C^T + Se) / r,
///   Sinn = Rgp + Khat Phi Khat^T,  H = P (Khat C)^T Sinn^{-1},
///   mu = A mu_prev + H (y - Khat C A mu_prev),  Sig = (I - H Khat C) P.
/// For r below kFilterSkipR the update is skipped (gain -> 0 limit).
inline ChainStep kalman_forward_step(const GaussState& prev, const FilterMatrices& fm,
                                     const ObservationModel& om, const Vec& y, double r) {
  if (r < 0.0 || r > 1.0 + 1e-12) throw std::invalid_argument("kalman_forward_step: r outside [0,1]");
  ChainStep step;
  step.r = r;
  step.pred_mean = fm.A * prev.mean;
  step.pred_cov = symmetrize(fm.A * prev.cov * fm.A.transpose() + fm.Sw);
  if (r < kFilterSkipR) {
    step.filt_mean = step.pred_mean;
    step.filt_cov = step.pred_cov;
    step.updated = false;
    return step;
  }
  const Mat phi = innovation_noise(fm.C, step.pred_cov, fm.Se, r);
  const Mat obs = om.khat * fm.C;  // q x p
  const Mat sinn = symmetrize(om.rgp + om.khat * phi * om.khat.transpose());
  const JitteredLLT f = jittered_llt(sinn, mean_abs_diagonal(sinn));
  const Mat gain = f.solve(Mat(obs * step.pred_cov)).transpose();  // p x q
  step.filt_mean = step.pred_mean + gain * (y - obs * step.pred_mean);
  step.filt_cov = symmetrize((Mat::Identity(step.pred_cov.rows(), step.pred_cov.cols()) -
                              gain * obs) *
                             step.pred_cov);
  step.updated = true;
  return step;
}

/// RTS smoothing over a filtered chain, in place. Fills smoothed moments,
/// lag-one covariances Cov(f_m, f_{m-1}) = Sig~_m J_{m-1}^T and the
/// log-determinants of the backward conditionals (used by the entropy term).
inline void kalman_backward(std::vector<ChainStep>& chain, const Mat& a) {
  if (chain.empty()) return;
  const Eigen::Index n = static_cast<Eigen::Index>(chain.size());
  chain[n - 1].smooth_mean = chain[n - 1].filt_mean;
  chain[n - 1].smooth_cov = chain[n - 1].filt_cov;
  {
    const JitteredLLT f =
        jittered_llt(chain[n - 1].smooth_cov, mean_abs_diagonal(chain[n - 1].smooth_cov));
    chain[n - 1].cond_log_det = f.log_det();
  }
  for (Eigen::Index m = n - 2; m >= 0; --m) {
    const ChainStep& next = chain[m + 1];
    ChainStep& cur = chain[m];
    const JitteredLLT pf = jittered_llt(next.pred_cov, mean_abs_diagonal(next.pred_cov));
    const Mat j = pf.solve(Mat(a * cur.filt_cov)).transpose();  // p x p
    cur.smooth_mean = cur.filt_mean + j * (next.smooth_mean - next.pred_mean);
    cur.smooth_cov = symmetrize(cur.filt_cov + j * (next.smooth_cov - next.pred_cov) * j.transpose());
    chain[m + 1].lag_one = next.smooth_cov * j.transpose();
    const Mat cond = symmetrize(cur.filt_cov - j * next.pred_cov * j.transpose());
    const JitteredLLT cf = jittered_llt(cond, mean_abs_diagonal(cur.filt_cov));
    cur.cond_log_det = cf.log_det();
  }
}

/// Emission marginal after smoothing: mean = C mu~, cov = Se + C Sig~ C^T.
inline GaussState emission_marginal(const Mat& c, const Mat& se, const GaussState& smoothed) {
  GaussState out;
  out.mean = c * smoothed.mean;
  out.cov = symmetrize(se + c * smoothed.cov * c.transpose());
  return out;
}

/// One cluster: kernels, inducing support, MNIW posteriors over dynamics and
/// emission, and the latent chain over all processed segments.
struct ClusterState {
  KernelParams theta;
  KernelParams vartheta;
  InducingSet inducing;
  MNIWPosterior dyn;         // (A, Sigma_omega)
  MNIWPosterior emit;        // (C, Sigma_eps)
  MNIWPosterior dyn_prior;
  MNIWPosterior emit_prior;
  std::vector<ChainStep> chain;
  double n_k = 0.0;
  bool use_iw_mean = false;  // plug the IW mean instead of the literal scale matrix

  Mat kzz;                   // K_{z,z} with noise
  JitteredLLT kzz_llt;

  int state_dim() const { return static_cast<int>(inducing.locations.size()); }

  void cache_kernel() {
    kzz = sqexp_cov(inducing.locations, inducing.locations, theta, true);
    kzz_llt = jittered_llt(kzz, theta.sigma_f * theta.sigma_f);
  }

  Mat sw_eff() const { return use_iw_mean ? dyn.iw_mean() : dyn.S; }
  Mat se_eff() const { return use_iw_mean ? emit.iw_mean() : emit.S; }

  FilterMatrices filter_matrices() const { return {dyn.M, emit.M, sw_eff(), se_eff()}; }

  /// q(f_0) = N(0, K_{z,z}).
  GaussState initial_state() const {
    return {Vec::Zero(state_dim()), kzz};
  }

  /// Observation operator for a warp of this cluster's kernel.
  ObservationModel observation_model(const WarpFunction& warp) const {
    const Vec w = warp.warped_times();
    ObservationModel om;
    const Mat kwz = sqexp_cov(w, inducing.locations, theta, false);
    om.khat = kzz_llt.solve(Mat(kwz.transpose())).transpose();  // q x p
    const Mat kww = sqexp_cov(w, w, theta, true);
    om.rgp = symmetrize(kww - om.khat * kwz.transpose());
    return om;
  }

  GaussState last_filtered() const {
    return chain.empty() ? initial_state()
                         : GaussState{chain.back().filt_mean, chain.back().filt_cov};
  }

  /// Appends one filtered step for a segment with responsibility r.
  void forward(const Segment& seg, const WarpFunction& warp, double r) {
    const ObservationModel om = observation_model(warp);
    chain.push_back(kalman_forward_step(last_filtered(), filter_matrices(), om, seg.y, r));
  }

  void smooth() { kalman_backward(chain, dyn.M); }

  /// Smoothed emission marginal q(x_m) as a belief on the inducing support.
  GPBelief x_marginal(std::size_t step) const {
    const ChainStep& s = chain.at(step);
    const GaussState x = emission_marginal(emit.M, se_eff(), {s.smooth_mean, s.smooth_cov});
    return {x.mean, x.cov, inducing.locations, theta};
  }

  /// One-step-ahead predictive of x past the end of the chain.
  GPBelief x_predictive_end() const {
    const GaussState prev = last_filtered();
    const FilterMatrices fm = filter_matrices();
    const Mat p = symmetrize(fm.A * prev.cov * fm.A.transpose() + fm.Sw);
    const GaussState x = emission_marginal(fm.C, fm.Se, {fm.A * prev.mean, p});
    return {x.mean, x.cov, inducing.locations, theta};
  }
};

}  // namespace hdpgpc
