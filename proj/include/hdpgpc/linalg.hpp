#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace hdpgpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kLog2Pi = 1.8378770664093454836;

// Relative jitter policy for Cholesky factorizations: start at kJitterBase
// times the problem scale and escalate by a factor of 10 on failure, up to
// kJitterMax times the scale.
inline constexpr double kJitterBase = 1e-8;
inline constexpr double kJitterMax = 1e-2;

class FactorizationError : public std::runtime_error {
 public:
  explicit FactorizationError(const std::string& what) : std::runtime_error(what) {}
};

inline Mat symmetrize(const Mat& a) { return 0.5 * (a + a.transpose()); }

/// Cholesky factor of a symmetric matrix with the escalating jitter policy.
/// `scale` sets the unit of the jitter (typically sigma_f^2 for kernel
/// matrices, or the mean diagonal for generic covariances).
struct JitteredLLT {
  Eigen::LLT<Mat> llt;
  double jitter = 0.0;

  double log_det() const {
    const Mat& l = llt.matrixLLT();
    double s = 0.0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
  }

  Mat solve(const Mat& b) const { return llt.solve(b); }
  Vec solve(const Vec& b) const { return llt.solve(b); }
};

inline JitteredLLT jittered_llt(const Mat& a, double scale) {
  if (a.rows() != a.cols()) throw std::invalid_argument("jittered_llt: matrix not square");
  if (!(scale > 0.0) || !std::isfinite(scale)) scale = 1.0;
  const Mat sym = symmetrize(a);
  for (double rel = kJitterBase; rel <= kJitterMax * (1.0 + 1e-12); rel *= 10.0) {
    Mat m = sym;
    m.diagonal().array() += rel * scale;
    Eigen::LLT<Mat> llt(m);
    if (llt.info() == Eigen::Success) return {std::move(llt), rel * scale};
  }
  throw FactorizationError("Cholesky factorization failed after jitter escalation");
}

/// log N(resid | 0, Sigma) with Sigma prefactored.
inline double gaussian_log_density(const Vec& resid, const JitteredLLT& f) {
  const Vec alpha = f.solve(resid);
  return -0.5 * resid.dot(alpha) - 0.5 * f.log_det() -
         0.5 * kLog2Pi * static_cast<double>(resid.size());
}

inline double mean_abs_diagonal(const Mat& a) {
  double s = a.diagonal().cwiseAbs().mean();
  return (s > 0.0 && std::isfinite(s)) ? s : 1.0;
}

}  // namespace hdpgpc
