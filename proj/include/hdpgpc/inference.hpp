#pragma once

#include "hdpgpc/hdp.hpp"
#include "hdpgpc/lds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <vector>

namespace hdpgpc {

struct InferenceConfig {
  double gamma = 10.0;
  double alpha = 20.0;
  double varrho = 1.0;          // prior-scale factor for S_omega / S_eps
  int k_init = 1;
  int max_outer = 50;
  int max_inner = 8;
  double tol_outer = 1e-5;      // relative ELBO change, outer loop
  double tol_inner = 1e-4;      // relative L_OBS change, inner loop
  int p_inducing = 32;
  KernelParams theta_init{300.0, 1.0, 0.0};  // sigma_n <= 0 resolves to sqrt(mean S_eps)
  KernelParams vartheta_init{1.0, 4.0, 1.0};
  bool fit_theta = true;
  double birth_margin = 0.0;
  int warp_max_iter = 100;
  double warp_rel_tol = 1e-6;
  double warp_skip_r = 1e-3;    // below this the identity warp is kept
  int calibration_segments = 20;
  bool use_iw_mean = false;     // noise convention inside the filter
  double v_prior_scale = 1.0;
  double eta_birth = 0.0;       // <= 0 resolves to 1 + gamma
  double occupancy_threshold = 0.5;
  std::uint64_t seed = 0;

  HDPConfig hdp() const { return {gamma, alpha}; }

  void validate() const {
    hdp().validate();
    if (!(varrho > 0.0) || k_init < 1 || max_outer < 1 || max_inner < 1 ||
        !(tol_outer > 0.0) || !(tol_inner > 0.0) || p_inducing < 2)
      throw std::invalid_argument("InferenceConfig: invalid field");
  }
};

struct ElboBreakdown {
  double total = 0.0;
  double l_obs = 0.0;
  double l_hdp = 0.0;
  double entropy = 0.0;
};

/// Chain-structured posterior over assignments: marginals r_nk, pairwise
/// xi[n](j,k) for the transition (n-1) -> n, and the Shannon entropy of q(S).
struct Responsibilities {
  Mat r;
  std::vector<Mat> xi;  // xi[0] unused
  double log_z = 0.0;
  double entropy = 0.0;
  std::vector<int> impossible;  // segments whose likelihood row was all -inf
};

namespace detail {

inline double lse(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace detail

/// Forward-backward over the K-state assignment chain. `loglik` is N x K
/// (expected observation log-likelihoods), `elog_pi` is (K+1) x (K+1) with
/// row 0 acting as the initial-state distribution. Rows of all -inf are
/// reported and treated as uniform.
inline Responsibilities update_assignments(const Mat& loglik, const Mat& elog_pi) {
  const Eigen::Index n = loglik.rows();
  const Eigen::Index k = loglik.cols();
  if (n == 0 || k == 0) throw std::invalid_argument("update_assignments: empty input");
  if (elog_pi.rows() < k + 1 || elog_pi.cols() < k)
    throw std::invalid_argument("update_assignments: elog_pi too small");

  Responsibilities out;
  Mat ll = loglik;
  for (Eigen::Index m = 0; m < n; ++m)
    if (!std::isfinite(ll.row(m).maxCoeff())) {
      ll.row(m).setZero();
      out.impossible.push_back(static_cast<int>(m));
    }

  Mat alpha(n, k), beta(n, k);
  alpha.row(0) = ll.row(0) + elog_pi.row(0).head(k);
  for (Eigen::Index m = 1; m < n; ++m)
    for (Eigen::Index c = 0; c < k; ++c) {
      Vec terms(k);
      for (Eigen::Index j = 0; j < k; ++j) terms[j] = alpha(m - 1, j) + elog_pi(j + 1, c);
      alpha(m, c) = ll(m, c) + detail::lse(terms);
    }
  out.log_z = detail::lse(alpha.row(n - 1));
  beta.row(n - 1).setZero();
  for (Eigen::Index m = n - 2; m >= 0; --m)
    for (Eigen::Index j = 0; j < k; ++j) {
      Vec terms(k);
      for (Eigen::Index c = 0; c < k; ++c)
        terms[c] = elog_pi(j + 1, c) + ll(m + 1, c) + beta(m + 1, c);
      beta(m, j) = detail::lse(terms);
    }

  out.r.resize(n, k);
  for (Eigen::Index m = 0; m < n; ++m) {
    Vec un = alpha.row(m) + beta.row(m);
    const double z = detail::lse(un);
    out.r.row(m) = (un.array() - z).exp();
    out.r.row(m) /= out.r.row(m).sum();
  }
  out.xi.assign(n, Mat());
  double escore = 0.0;
  for (Eigen::Index c = 0; c < k; ++c)
    escore += out.r(0, c) * (ll(0, c) + elog_pi(0, c));
  for (Eigen::Index m = 1; m < n; ++m) {
    Mat e(k, k);
    for (Eigen::Index j = 0; j < k; ++j)
      for (Eigen::Index c = 0; c < k; ++c)
        e(j, c) = alpha(m - 1, j) + elog_pi(j + 1, c) + ll(m, c) + beta(m, c) - out.log_z;
    e = e.array().exp();
    const double s = e.sum();
    if (s > 0) e /= s;
    out.xi[m] = e;
    for (Eigen::Index j = 0; j < k; ++j)
      for (Eigen::Index c = 0; c < k; ++c)
        escore += e(j, c) * (elog_pi(j + 1, c) + ll(m, c));
  }
  out.entropy = out.log_z - escore;
  return out;
}

/// N_jk counts from the chain posterior: row 0 collects the first segment's
/// responsibilities, the last column (inactive mass) stays zero.
inline Mat transition_counts(const Responsibilities& resp, Eigen::Index upto) {
  const Eigen::Index k = resp.r.cols();
  Mat counts = Mat::Zero(k + 1, k + 1);
  if (upto == 0) return counts;
  for (Eigen::Index c = 0; c < k; ++c) counts(0, c) = resp.r(0, c);
  for (Eigen::Index m = 1; m < upto; ++m)
    if (resp.xi[m].size() > 0) counts.block(1, 0, k, k) += resp.xi[m];
  return counts;
}

/// E_x[log N(y | Khat x, Rgp)]: Gaussian expected log-likelihood of a segment
/// under the pseudo-observation belief pushed through the warp projector.
inline double expected_obs_loglik(const Vec& y, const GPBelief& x, const ObservationModel& om) {
  const JitteredLLT f = jittered_llt(om.rgp, x.kernel.sigma_f * x.kernel.sigma_f);
  const Vec resid = y - om.khat * x.mean;
  const Mat prop = om.khat * x.cov * om.khat.transpose();
  const double tr = f.solve(prop).trace();
  return -0.5 * resid.dot(f.solve(resid)) - 0.5 * f.log_det() -
         0.5 * kLog2Pi * static_cast<double>(y.size()) - 0.5 * tr;
}

/// zeta_{njk} in log form: E[log pi_jk] plus the expected observation
/// log-likelihood of the segment against the cluster's belief at `step`
/// (one-step-ahead predictive when the chain has no such slot yet).
inline double log_zeta(const Segment& seg, const ClusterState& cluster, const WarpFunction& warp,
                       double elog_pi_jk, std::optional<std::size_t> step = {}) {
  const ObservationModel om = cluster.observation_model(warp);
  GPBelief x;
  if (step && *step < cluster.chain.size() && cluster.chain[*step].smooth_mean.size() > 0)
    x = cluster.x_marginal(*step);
  else
    x = cluster.x_predictive_end();
  return elog_pi_jk + expected_obs_loglik(seg.y, x, om);
}

// ----- MNIW expectations used by the lower bound -----

inline double lmvgamma(double x, int p) {
  double s = 0.25 * p * (p - 1) * std::log(M_PI);
  for (int i = 1; i <= p; ++i) s += std::lgamma(x + 0.5 * (1.0 - i));
  return s;
}

inline double mvdigamma(double x, int p) {
  double s = 0.0;
  for (int i = 1; i <= p; ++i) s += digamma(x + 0.5 * (1.0 - i));
  return s;
}

/// E[log |Sigma|] under Sigma ~ IW(dof, S).
inline double iw_expected_log_det(const Mat& s, double dof) {
  const int p = static_cast<int>(s.rows());
  const JitteredLLT f = jittered_llt(s, mean_abs_diagonal(s));
  return f.log_det() - p * std::log(2.0) - mvdigamma(0.5 * dof, p);
}

/// KL(q || p) between two MNIW distributions sharing shapes.
inline double mniw_kl(const MNIWPosterior& q, const MNIWPosterior& p) {
  q.validate();
  p.validate();
  const int rd = static_cast<int>(q.M.rows());
  const int cd = static_cast<int>(q.M.cols());
  const JitteredLLT vq = jittered_llt(q.V, mean_abs_diagonal(q.V));
  const JitteredLLT vp = jittered_llt(p.V, mean_abs_diagonal(p.V));
  const JitteredLLT sq = jittered_llt(q.S, mean_abs_diagonal(q.S));
  const JitteredLLT sp = jittered_llt(p.S, mean_abs_diagonal(p.S));

  // matrix-normal part, with tr(Sigma^{-1} ...) taken under the IW posterior
  const Mat dm = q.M - p.M;
  const double tr_v = vq.solve(p.V).trace();
  const double quad = q.dof * sq.solve(Mat(dm * p.V * dm.transpose())).trace();
  const double mn = 0.5 * (rd * tr_v - rd * cd + quad + rd * (vq.log_det() - vp.log_det()));

  // inverse-Wishart part
  const double iw = 0.5 * (q.dof - p.dof) * mvdigamma(0.5 * q.dof, rd) +
                    0.5 * p.dof * (sq.log_det() - sp.log_det()) +
                    0.5 * q.dof * (sq.solve(p.S).trace() - rd) +
                    lmvgamma(0.5 * p.dof, rd) - lmvgamma(0.5 * q.dof, rd);
  return mn + iw;
}

struct ChainElboTerms {
  double transitions = 0.0;
  double f_entropy = 0.0;
  double x_nodes = 0.0;
  double dyn_kl = 0.0;
  double emit_kl = 0.0;

  double sum() const { return transitions + f_entropy + x_nodes - dyn_kl - emit_kl; }
};

/// Per-cluster chain terms of L_OBS:
///   E[log p(F|phi)] - E[log q(F)] + E[log p(X|F,phi)] - E[log q(X|F)]
///   - KL(q(phi) || p(phi)),
/// with the smoothed chain as q(F) and the MNIW posteriors integrated exactly.
inline ChainElboTerms chain_elbo_terms(const ClusterState& c) {
  ChainElboTerms out;
  if (c.chain.empty()) return out;
  const int p = c.state_dim();
  const Mat eye = Mat::Identity(p, p);

  const JitteredLLT sw = jittered_llt(c.dyn.S, mean_abs_diagonal(c.dyn.S));
  const Mat lam_w = c.dyn.dof * sw.solve(eye);
  const JitteredLLT vw = jittered_llt(c.dyn.V, mean_abs_diagonal(c.dyn.V));
  const Mat aq = c.dyn.M.transpose() * lam_w * c.dyn.M + p * vw.solve(eye);
  const double elogdet_w = iw_expected_log_det(c.dyn.S, c.dyn.dof);

  const JitteredLLT se = jittered_llt(c.emit.S, mean_abs_diagonal(c.emit.S));
  const Mat lam_e = c.emit.dof * se.solve(eye);
  const JitteredLLT ve = jittered_llt(c.emit.V, mean_abs_diagonal(c.emit.V));
  const Mat vc_inv = ve.solve(eye);
  const double elogdet_e = iw_expected_log_det(c.emit.S, c.emit.dof);
  const Mat se_q = c.se_eff();
  const double tr_se = (lam_e * se_q).trace();
  const double logdet_se_q = jittered_llt(se_q, mean_abs_diagonal(se_q)).log_det();

  Mat ezz = c.kzz;  // fixed q(f_0) = N(0, K_zz), independent of the chain
  Vec prev_mean = Vec::Zero(p);
  const double half_p_l2pi = 0.5 * p * kLog2Pi;
  for (std::size_t m = 0; m < c.chain.size(); ++m) {
    const ChainStep& st = c.chain[m];
    const Mat euu = st.smooth_cov + st.smooth_mean * st.smooth_mean.transpose();
    Mat ezu;  // E[f_{m-1} f_m^T]
    if (m == 0)
      ezu = Mat::Zero(p, p);
    else
      ezu = c.chain[m].lag_one.transpose() + prev_mean * st.smooth_mean.transpose();
    const double quad = (lam_w * euu).trace() - 2.0 * (lam_w * c.dyn.M * ezu).trace() +
                        (aq * ezz).trace();
    out.transitions += -half_p_l2pi - 0.5 * elogdet_w - 0.5 * quad;
    out.f_entropy += 0.5 * (p * (kLog2Pi + 1.0) + st.cond_log_det);
    out.x_nodes += -half_p_l2pi - 0.5 * elogdet_e -
                   0.5 * (tr_se + p * (vc_inv * euu).trace()) +
                   0.5 * (p * (kLog2Pi + 1.0) + logdet_se_q);
    ezz = euu;
    prev_mean = st.smooth_mean;
  }
  out.dyn_kl = mniw_kl(c.dyn, c.dyn_prior);
  out.emit_kl = mniw_kl(c.emit, c.emit_prior);
  return out;
}

/// Full model state: clusters, HDP posteriors, per-(segment, cluster) warps,
/// responsibilities, the ELBO trace, and bookkeeping caches.
struct ModelState {
  InferenceConfig config;
  std::vector<ClusterState> clusters;
  StickPosterior sticks;
  TransitionPosterior trans;
  Mat elog_pi;
  std::vector<std::vector<WarpAux>> aux;        // [segment][cluster]
  std::vector<std::vector<WarpFunction>> warps; // [segment][cluster]
  Mat loglik;         // N x K expected observation log-likelihoods
  Mat warp_logprior;  // N x K
  Responsibilities resp;
  std::vector<ElboBreakdown> trace;
  bool converged = false;
  int iterations = 0;

  // data-derived LDS prior profiles (diagonal, on the reference grid)
  Vec prior_grid;
  Vec sw_profile;
  Vec se_profile;

  // per-segment caches for the birth criterion
  std::map<std::string, KernelParams> fitted_theta;
  std::map<std::string, double> fitted_ml;

  int truncation() const { return static_cast<int>(clusters.size()); }

  Vec cluster_masses() const {
    Vec m(truncation());
    for (int k = 0; k < truncation(); ++k) m[k] = clusters[k].n_k;
    return m;
  }

  /// argmax assignments over the responsibility rows
  std::vector<int> assignments() const {
    std::vector<int> out(resp.r.rows());
    for (Eigen::Index n = 0; n < resp.r.rows(); ++n) {
      Eigen::Index best;
      resp.r.row(n).maxCoeff(&best);
      out[n] = static_cast<int>(best);
    }
    return out;
  }
};

namespace detail {

inline Vec interp_linear(const Vec& xs, const Vec& ys, const Vec& xq) {
  Vec out(xq.size());
  for (Eigen::Index i = 0; i < xq.size(); ++i) {
    const double x = xq[i];
    if (x <= xs[0]) {
      out[i] = ys[0];
      continue;
    }
    if (x >= xs[xs.size() - 1]) {
      out[i] = ys[ys.size() - 1];
      continue;
    }
    Eigen::Index j = 1;
    while (xs[j] < x) ++j;
    const double w = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
    out[i] = (1.0 - w) * ys[j - 1] + w * ys[j];
  }
  return out;
}

}  // namespace detail

/// Coordinate-ascent engine shared by the off-line and on-line algorithms.
class Inference {
 public:
  Inference(std::vector<Segment> segments, InferenceConfig config)
      : segments_(std::move(segments)), cfg_(std::move(config)) {
    cfg_.validate();
    if (segments_.empty()) throw std::invalid_argument("inference: need at least one segment");
    for (const auto& s : segments_) s.validate();
    model_.config = cfg_;
  }

  /// Off-line coordinate ascent (batch): a streaming bootstrap pass discovers
  /// an initial cluster set, then outer iterations alternate birth scans,
  /// local updates to L_OBS convergence and global HDP updates until the
  /// lower bound converges.
  ModelState run_offline() {
    const int n = static_cast<int>(segments_.size());
    init_priors(n);
    bootstrap_pass(n);

    double prev = -std::numeric_limits<double>::infinity();
    for (int outer = 0; outer < cfg_.max_outer; ++outer) {
      model_.iterations = outer + 1;
      birth_scan();
      inner_loop(n);
      global_pass(n);
      const ElboBreakdown e = elbo(n);
      model_.trace.push_back(e);
      if (std::isfinite(prev) &&
          std::abs(e.total - prev) < cfg_.tol_outer * (1.0 + std::abs(e.total))) {
        model_.converged = true;
        break;
      }
      prev = e.total;
    }
    finalize(n);
    return std::move(model_);
  }

  /// On-line single pass: per segment, iterate warp -> assignment -> chains ->
  /// globals until the bound over the processed prefix stabilizes, then freeze
  /// that segment's responsibilities.
  ModelState run_online() {
    const int n = static_cast<int>(segments_.size());
    init_priors(std::min(n, cfg_.calibration_segments));
    seed_first_cluster();
    online_entropy_ = 0.0;
    model_.resp.r = Mat::Zero(1, 1);
    model_.resp.r(0, 0) = 1.0;
    model_.resp.xi.assign(1, Mat());
    rebuild_chains(1);
    global_pass(1);
    model_.converged = true;
    model_.trace.push_back(elbo(1));

    for (int m = 1; m < n; ++m) {
      grow_resp(m + 1);
      bool segment_converged = false;
      double prev = -std::numeric_limits<double>::infinity();
      bool born = false;
      for (int inner = 0; inner < cfg_.max_inner; ++inner) {
        warp_row(m);
        refresh_loglik_row(m);
        assignment_step_online(m);
        if (!born && maybe_birth(m)) {
          born = true;
          warp_row(m);
          refresh_loglik_row(m);
          assignment_step_online(m);
        }
        rebuild_chains(m + 1);
        phi_pass(m + 1);
        global_pass(m + 1);
        refresh_loglik_row(m);
        const ElboBreakdown e = elbo(m + 1);
        if (std::isfinite(prev) &&
            std::abs(e.total - prev) < cfg_.tol_outer * (1.0 + std::abs(e.total))) {
          segment_converged = true;
          model_.trace.push_back(e);
          break;
        }
        prev = e.total;
        if (inner == cfg_.max_inner - 1) model_.trace.push_back(e);
      }
      online_entropy_ += row_entropy(m);
      model_.converged = model_.converged && segment_converged;
      model_.iterations = m + 1;
    }
    finalize(n);
    return std::move(model_);
  }

  /// Birth policy: a segment spawns a fresh cluster when its prior GP
  /// evidence plus the remaining stick mass beats every existing cluster's
  /// zeta by the configured margin. K grows by at most one per call.
  bool maybe_birth(int n) {
    const int k = model_.truncation();
    const int row = prev_state_row(n);
    double best = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      best = std::max(best, model_.elog_pi(row, c) + model_.loglik(n, c));
    const double fresh = model_.elog_pi(row, k) + fresh_evidence(n);
    if (fresh <= best + cfg_.birth_margin) return false;
    spawn_cluster(n);
    return true;
  }

  const ModelState& model() const { return model_; }

  // --- passes below are public for white-box tests ---

  void init_priors(int upto) {
    const auto& first = segments_.front();
    const Eigen::Index q = first.t.size();
    bool uniform = true;
    for (const auto& s : segments_)
      if (s.t.size() != q) uniform = false;

    Vec se_prof, sw_prof;
    if (uniform) {
      se_prof = Vec::Zero(q);
      sw_prof = Vec::Zero(q);
      int d = 0, dd = 0;
      for (int m = 0; m < upto; ++m) {
        se_prof.array() += segments_[m].y.array().square();
        ++d;
        if (m > 0) {
          sw_prof.array() += (segments_[m].y - segments_[m - 1].y).array().square();
          ++dd;
        }
      }
      se_prof /= std::max(d, 1);
      sw_prof /= std::max(dd, 1);
    } else {
      double se = 0.0, sw = 0.0;
      long cnt = 0;
      for (int m = 0; m < upto; ++m) {
        se += segments_[m].y.array().square().sum();
        cnt += segments_[m].y.size();
      }
      se /= std::max<long>(cnt, 1);
      int dd = 0;
      for (int m = 1; m < upto; ++m) {
        const Eigen::Index len = std::min(segments_[m].y.size(), segments_[m - 1].y.size());
        sw += (segments_[m].y.head(len) - segments_[m - 1].y.head(len)).array().square().mean();
        ++dd;
      }
      sw /= std::max(dd, 1);
      se_prof = Vec::Constant(q, se);
      sw_prof = Vec::Constant(q, sw);
    }
    const double floor_v = 1e-12 + 1e-6 * se_prof.maxCoeff();
    model_.prior_grid = first.t;
    model_.se_profile = cfg_.varrho * se_prof.cwiseMax(floor_v);
    model_.sw_profile = cfg_.varrho * sw_prof.cwiseMax(floor_v);
  }

  void seed_first_cluster() {
    spawn_cluster(0);
    model_.loglik = Mat::Zero(1, 1);
    model_.warp_logprior = Mat::Zero(1, 1);
    grow_resp(1);
    model_.resp.r(0, 0) = 1.0;
  }

  /// Streaming hard-assignment pass used to initialise the off-line run:
  /// grows K as unexplained morphologies arrive and leaves one-hot
  /// responsibilities behind.
  void bootstrap_pass(int n) {
    seed_first_cluster();
    std::vector<int> hard(n, 0);
    for (int m = 1; m < n; ++m) {
      grow_resp(m + 1);
      const int row = hard[m - 1] + 1;
      int k = model_.truncation();
      int best_k = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double z = model_.elog_pi(row, c) +
                         log_zeta(segments_[m], model_.clusters[c], identity_warp(m), 0.0);
        if (z > best) {
          best = z;
          best_k = c;
        }
      }
      const double fresh = model_.elog_pi(row, k) + fresh_evidence(m);
      if (fresh > best + cfg_.birth_margin) {
        spawn_cluster(m);
        best_k = model_.truncation() - 1;
      }
      hard[m] = best_k;
      model_.resp.r.row(m).setZero();
      model_.resp.r(m, best_k) = 1.0;
      Mat xi = Mat::Zero(model_.truncation(), model_.truncation());
      xi(hard[m - 1], best_k) = 1.0;
      model_.resp.xi[m] = xi;
      // advance every chain one step: members update, the rest propagate
      for (int c = 0; c < model_.truncation(); ++c) {
        if (static_cast<int>(model_.clusters[c].chain.size()) > m) continue;  // fresh seed
        model_.clusters[c].forward(segments_[m], identity_warp(m), c == best_k ? 1.0 : 0.0);
      }
      global_pass(m + 1);
    }
    for (auto& c : model_.clusters) c.smooth();
    refresh_loglik(n);
  }

  void inner_loop(int upto) {
    double prev = -std::numeric_limits<double>::infinity();
    for (int inner = 0; inner < cfg_.max_inner; ++inner) {
      assignment_pass(upto);
      for (int m = 0; m < upto; ++m) warp_row(m);
      rebuild_chains(upto);
      phi_pass(upto);
      refresh_loglik(upto);
      const double lobs = elbo(upto).l_obs;
      if (std::isfinite(prev) && std::abs(lobs - prev) < cfg_.tol_inner * (1.0 + std::abs(lobs)))
        break;
      prev = lobs;
    }
  }

  void assignment_pass(int upto) {
    Responsibilities r =
        update_assignments(model_.loglik.topRows(upto), model_.elog_pi);
    model_.resp = std::move(r);
    const Vec masses = model_.resp.r.colwise().sum();
    for (int k = 0; k < model_.truncation(); ++k) model_.clusters[k].n_k = masses[k];
  }

  /// Filtering-style assignment for the newest segment; earlier rows stay
  /// frozen.
  void assignment_step_online(int m) {
    const int k = model_.truncation();
    Vec log_r(k);
    Mat log_xi(k, k);
    for (int c = 0; c < k; ++c) {
      Vec terms(k);
      for (int j = 0; j < k; ++j) {
        const double lr = model_.resp.r(m - 1, j) > 0 ? std::log(model_.resp.r(m - 1, j))
                                                      : -std::numeric_limits<double>::infinity();
        terms[j] = lr + model_.elog_pi(j + 1, c);
        log_xi(j, c) = terms[j] + model_.loglik(m, c);
      }
      log_r[c] = detail::lse(terms) + model_.loglik(m, c);
    }
    const double z = detail::lse(log_r);
    model_.resp.r.row(m) = (log_r.array() - z).exp();
    model_.resp.r.row(m) /= model_.resp.r.row(m).sum();
    Mat xi = (log_xi.array() - z).exp();
    const double s = xi.sum();
    if (s > 0) xi /= s;
    model_.resp.xi[m] = xi;
    Vec masses = model_.resp.r.topRows(m + 1).colwise().sum();
    for (int c = 0; c < k; ++c) model_.clusters[c].n_k = masses[c];
  }

  void warp_row(int m) {
    const int k = model_.truncation();
    for (int c = 0; c < k; ++c) {
      if (model_.resp.r(m, c) < cfg_.warp_skip_r) {
        model_.aux[m][c] = WarpAux::identity(segments_[m].t.size());
        model_.warps[m][c] = identity_warp(m);
        model_.warp_logprior(m, c) = warp_log_prior(model_.warps[m][c],
                                                    model_.clusters[c].vartheta, segments_[m].t);
        continue;
      }
      const ClusterState& cl = model_.clusters[c];
      GPBelief x;
      if (cl.chain.size() > static_cast<std::size_t>(m) &&
          cl.chain[m].smooth_mean.size() > 0)
        x = cl.x_marginal(m);
      else
        x = cl.x_predictive_end();
      WarpOptions opts;
      opts.max_iter = cfg_.warp_max_iter;
      opts.rel_tol = cfg_.warp_rel_tol;
      MapWarpResult res =
          map_warp(segments_[m], x, cl.theta, cl.vartheta, model_.aux[m][c], opts);
      model_.aux[m][c] = res.aux;
      model_.warps[m][c] = res.warp;
      model_.warp_logprior(m, c) =
          warp_log_prior(res.warp, cl.vartheta, segments_[m].t);
    }
  }

  void rebuild_chains(int upto) {
    for (int c = 0; c < model_.truncation(); ++c) {
      ClusterState& cl = model_.clusters[c];
      cl.chain.clear();
      for (int m = 0; m < upto; ++m)
        cl.forward(segments_[m], model_.warps[m][c], model_.resp.r(m, c));
      cl.smooth();
    }
  }

  void phi_pass(int upto) {
    for (int c = 0; c < model_.truncation(); ++c) {
      ClusterState& cl = model_.clusters[c];
      const int p = cl.state_dim();
      RegressionStats dyn = RegressionStats::zero(p, p);
      RegressionStats emit = RegressionStats::zero(p, p);
      double nk = 0.0;
      for (int m = 0; m < upto; ++m) {
        const double w = model_.resp.r(m, c);
        nk += w;
        const ChainStep& st = cl.chain[m];
        const Mat euu = st.smooth_cov + st.smooth_mean * st.smooth_mean.transpose();
        if (m > 0 && w > 0.0) {
          const ChainStep& pv = cl.chain[m - 1];
          const Mat ezz = pv.smooth_cov + pv.smooth_mean * pv.smooth_mean.transpose();
          const Mat euz = st.lag_one + st.smooth_mean * pv.smooth_mean.transpose();
          dyn.Szz += w * ezz;
          dyn.Suz += w * euz;
          dyn.Suu += w * euu;
        }
        if (w > 0.0) {
          const Vec xhat = back_projected_target(m, c);
          emit.Szz += w * euu;
          emit.Suz += w * xhat * st.smooth_mean.transpose();
          emit.Suu += w * xhat * xhat.transpose();
        }
      }
      dyn.count = nk;
      emit.count = nk;
      cl.n_k = nk;
      cl.dyn = mniw_update(cl.dyn_prior, dyn);
      cl.emit = mniw_update(cl.emit_prior, emit);
    }
  }

  void global_pass(int upto) {
    const Mat counts = transition_counts(model_.resp, upto);
    model_.trans = update_transition_posterior(cfg_.hdp(), model_.sticks, counts);
    const StickOptResult so = optimize_sticks(cfg_.hdp(), model_.trans, model_.sticks);
    model_.sticks = so.sticks;
    model_.elog_pi = expected_log_pi(model_.trans);
  }

  void refresh_loglik(int upto) {
    for (int m = 0; m < upto; ++m) refresh_loglik_row(m);
  }

  void refresh_loglik_row(int m) {
    for (int c = 0; c < model_.truncation(); ++c)
      model_.loglik(m, c) =
          log_zeta(segments_[m], model_.clusters[c], model_.warps[m][c], 0.0, m);
  }

  ElboBreakdown elbo(int upto) {
    ElboBreakdown e;
    for (int c = 0; c < model_.truncation(); ++c)
      e.l_obs += chain_elbo_terms(model_.clusters[c]).sum();
    for (int m = 0; m < upto; ++m)
      for (int c = 0; c < model_.truncation(); ++c)
        e.l_obs += model_.resp.r(m, c) *
                   (model_.loglik(m, c) + model_.warp_logprior(m, c));

    const int k = model_.truncation();
    double elog_ps = 0.0;
    for (int c = 0; c < k; ++c) elog_ps += model_.resp.r(0, c) * model_.elog_pi(0, c);
    for (int m = 1; m < upto; ++m)
      if (model_.resp.xi[m].size() > 0)
        for (int j = 0; j < k; ++j)
          for (int c = 0; c < k; ++c)
            elog_ps += model_.resp.xi[m](j, c) * model_.elog_pi(j + 1, c);
    double dir_ent = 0.0;
    for (Eigen::Index j = 0; j < model_.trans.kappa.rows(); ++j)
      dir_ent += dirichlet_entropy(model_.trans.kappa.row(j));
    e.l_hdp = elog_ps + dir_ent +
              stick_objective(cfg_.hdp(), model_.elog_pi, model_.sticks.lambda,
                              model_.sticks.eta);
    e.entropy = online_mode_ ? online_entropy_ + row_entropy_pending(upto) : model_.resp.entropy;
    e.total = e.l_obs + e.l_hdp + e.entropy;
    return e;
  }

 private:
  WarpFunction identity_warp(int m) const {
    return warp_for_grid(WarpAux::identity(segments_[m].t.size()), segments_[m].t);
  }

  int prev_state_row(int n) const {
    if (n == 0) return 0;
    Eigen::Index best;
    model_.resp.r.row(n - 1).maxCoeff(&best);
    return static_cast<int>(best) + 1;
  }

  double fresh_evidence(int n) {
    const auto& seg = segments_[n];
    auto it = model_.fitted_ml.find(seg.id);
    if (it != model_.fitted_ml.end()) return it->second;
    const KernelParams init = effective_theta_init();
    KernelParams th = init;
    double ml;
    if (cfg_.fit_theta) {
      const KernelFit fit = fit_hyperparams(seg.t, seg.y, init);
      th = fit.params;
      ml = fit.log_ml;
    } else {
      ml = log_marginal_likelihood(seg.t, seg.y, th);
    }
    model_.fitted_theta[seg.id] = th;
    model_.fitted_ml[seg.id] = ml;
    return ml;
  }

  KernelParams effective_theta_init() const {
    KernelParams th = cfg_.theta_init;
    if (!(th.sigma_n > 0.0))
      th.sigma_n = std::sqrt(std::max(model_.se_profile.mean(), 1e-12));
    return th;
  }

  void spawn_cluster(int n) {
    const Segment& seg = segments_[n];
    fresh_evidence(n);  // ensures the fitted kernel cache is warm
    ClusterState cl;
    cl.theta = cfg_.fit_theta ? model_.fitted_theta[seg.id] : effective_theta_init();
    cl.vartheta = cfg_.vartheta_init;
    cl.inducing = InducingSet::uniform(seg.t, cfg_.p_inducing);
    cl.use_iw_mean = cfg_.use_iw_mean;
    const int p = cl.state_dim();
    const Vec sw_diag = detail::interp_linear(model_.prior_grid, model_.sw_profile,
                                              cl.inducing.locations);
    const Vec se_diag = detail::interp_linear(model_.prior_grid, model_.se_profile,
                                              cl.inducing.locations);
    cl.dyn_prior = MNIWPosterior::identity_prior(Mat(sw_diag.asDiagonal()), p + 2.0,
                                                 cfg_.v_prior_scale);
    cl.emit_prior = MNIWPosterior::identity_prior(Mat(se_diag.asDiagonal()),
                                                  static_cast<double>(seg.t.size()) + 2.0,
                                                  cfg_.v_prior_scale);
    cl.dyn = cl.dyn_prior;
    cl.emit = cl.emit_prior;
    cl.cache_kernel();
    // seed the chain so the predictive carries this morphology
    WarpFunction w = warp_for_grid(WarpAux::identity(seg.t.size()), seg.t);
    for (int m = 0; m < n; ++m)
      cl.chain.push_back(kalman_forward_step(cl.last_filtered(), cl.filter_matrices(),
                                             cl.observation_model(identity_warp(m)),
                                             segments_[m].y, 0.0));
    cl.forward(seg, w, 1.0);
    cl.smooth();
    cl.n_k = 1.0;
    model_.clusters.push_back(std::move(cl));

    const int k = model_.truncation();
    // extend stick and transition posteriors
    StickPosterior grown;
    grown.lambda = Vec::Constant(k, 1.0 / (1.0 + cfg_.gamma));
    grown.eta = Vec::Constant(k, cfg_.eta_birth > 0.0 ? cfg_.eta_birth : 1.0 + cfg_.gamma);
    if (k > 1) {
      grown.lambda.head(k - 1) = model_.sticks.lambda;
      grown.eta.head(k - 1) = model_.sticks.eta;
    }
    model_.sticks = grown;
    grow_structures(k);
    const Mat counts = transition_counts(model_.resp, std::min<int>(n + 1, model_.resp.r.rows()));
    model_.trans = update_transition_posterior(cfg_.hdp(), model_.sticks, counts);
    model_.elog_pi = expected_log_pi(model_.trans);
    if (static_cast<int>(model_.resp.r.rows()) > n) {
      model_.resp.r.row(n).setZero();
      model_.resp.r(n, k - 1) = 1.0;
    }
    refresh_loglik_col(k - 1, std::min<int>(static_cast<int>(model_.resp.r.rows()),
                                            static_cast<int>(segments_.size())));
  }

  void grow_structures(int k) {
    const int n = static_cast<int>(segments_.size());
    if (model_.aux.empty()) {
      model_.aux.assign(n, {});
      model_.warps.assign(n, {});
    }
    for (int m = 0; m < n; ++m)
      while (static_cast<int>(model_.aux[m].size()) < k) {
        model_.aux[m].push_back(WarpAux::identity(segments_[m].t.size()));
        model_.warps[m].push_back(identity_warp(m));
      }
    auto grow_mat = [&](Mat& x, double fill) {
      Mat g = Mat::Constant(n, k, fill);
      if (x.size() > 0) g.topLeftCorner(x.rows(), x.cols()) = x;
      x = g;
    };
    grow_mat(model_.loglik, 0.0);
    grow_mat(model_.warp_logprior, 0.0);
    if (model_.resp.r.size() > 0 && model_.resp.r.cols() < k) {
      Mat r = Mat::Zero(model_.resp.r.rows(), k);
      r.topLeftCorner(model_.resp.r.rows(), model_.resp.r.cols()) = model_.resp.r;
      model_.resp.r = r;
      for (auto& xi : model_.resp.xi)
        if (xi.size() > 0) {
          Mat g = Mat::Zero(k, k);
          g.topLeftCorner(xi.rows(), xi.cols()) = xi;
          xi = g;
        }
    }
    for (int m = 0; m < n; ++m)
      model_.warp_logprior(m, k - 1) = warp_log_prior(
          model_.warps[m][k - 1], model_.clusters[k - 1].vartheta, segments_[m].t);
  }

  void grow_resp(int rows) {
    const int k = std::max(1, model_.truncation());
    Mat r = Mat::Zero(rows, k);
    if (model_.resp.r.size() > 0)
      r.topLeftCorner(model_.resp.r.rows(), model_.resp.r.cols()) = model_.resp.r;
    model_.resp.r = r;
    model_.resp.xi.resize(rows, Mat());
  }

  void refresh_loglik_col(int c, int upto) {
    for (int m = 0; m < upto; ++m)
      model_.loglik(m, c) =
          log_zeta(segments_[m], model_.clusters[c], model_.warps[m][c], 0.0, m);
  }

  void birth_scan() {
    const int n = static_cast<int>(segments_.size());
    for (int m = 1; m < n; ++m) maybe_birth(m);
  }

  Vec back_projected_target(int m, int c) const {
    const ClusterState& cl = model_.clusters[c];
    const Vec w = model_.warps[m][c].warped_times();
    const Mat kww = sqexp_cov(w, w, cl.theta, true);
    const JitteredLLT f = jittered_llt(kww, cl.theta.sigma_f * cl.theta.sigma_f);
    const Mat kzw = sqexp_cov(cl.inducing.locations, w, cl.theta, false);
    return kzw * f.solve(segments_[m].y);
  }

  double row_entropy(int m) const {
    // H(s_m | s_{m-1}) of the filtering posterior
    const Mat& xi = model_.resp.xi[m];
    double h = 0.0;
    for (Eigen::Index j = 0; j < xi.rows(); ++j)
      for (Eigen::Index c = 0; c < xi.cols(); ++c)
        if (xi(j, c) > 0 && model_.resp.r(m - 1, j) > 0)
          h -= xi(j, c) * std::log(xi(j, c) / model_.resp.r(m - 1, j));
    return h;
  }

  double row_entropy_pending(int upto) const {
    // entropy contribution of the newest (not yet frozen) row
    const int m = upto - 1;
    if (m < 1 || model_.resp.xi[m].size() == 0) return 0.0;
    return row_entropy(m);
  }

  void finalize(int upto) {
    refresh_loglik(upto);
    if (online_mode_) model_.resp.entropy = online_entropy_;
  }

  std::vector<Segment> segments_;
  InferenceConfig cfg_;
  ModelState model_;
  bool online_mode_ = false;
  double online_entropy_ = 0.0;

 public:
  void set_online_mode(bool v) { online_mode_ = v; }
};

/// Algorithm entry point, batch flavour.
inline ModelState fit_offline(std::vector<Segment> segments, InferenceConfig config) {
  Inference eng(std::move(segments), std::move(config));
  return eng.run_offline();
}

/// Algorithm entry point, streaming flavour (single ordered pass).
inline ModelState fit_online(std::vector<Segment> segments, InferenceConfig config) {
  Inference eng(std::move(segments), std::move(config));
  eng.set_online_mode(true);
  return eng.run_online();
}

/// Spec-level birth hook: spawns at most one cluster for `segment` when the
/// fresh-cluster zeta exceeds `current_best_logzeta` by the birth margin.
inline bool maybe_spawn_cluster(Inference& engine, int segment_index) {
  return engine.maybe_birth(segment_index);
}

}  // namespace hdpgpc
