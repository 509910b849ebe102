#pragma once

#include <Eigen/Cholesky>

#include "cgpattn/common.hpp"

namespace cgpattn {

/// Cholesky factorization of (K + sigma^2 I + jitter I), reusable for
/// repeated solves. The jitter escalates geometrically from 1e-10 by factor 10
/// until the factorization succeeds, capped at 1e-2.
class PsdSolveContext {
 public:
  static constexpr double kJitterFloor = 1e-10;
  static constexpr double kJitterCap = 1e-2;

  /// Factorizes K + sigma2*I under the jitter policy. Throws
  /// SingularMatrixError at the cap and DimensionError on shape problems.
  /// `check_symmetry` enforces the psd_solve precondition (symmetric within
  /// 1e-10).
  static PsdSolveContext factorize(const Matrix& k, double sigma2,
                                   bool check_symmetry = true);

  Matrix solve(const Matrix& rhs) const;
  Vector solve(const Vector& rhs) const;
  double log_det() const;
  /// Lower Cholesky factor of (K + sigma^2 I + jitter I).
  Matrix chol_lower() const { return llt_.matrixL(); }

  double jitter_applied() const { return jitter_; }
  Index size() const { return llt_.matrixLLT().rows(); }

 private:
  Eigen::LLT<Matrix> llt_;
  double jitter_{0.0};
};

/// Returns X with (K + sigma^2 I + jitter I) X = B.
Matrix psd_solve(const Matrix& k, double sigma2, const Matrix& b);

/// log det(K + sigma^2 I + jitter I) computed from the factorization.
double logdet_psd(const Matrix& k, double sigma2);

/// Gaussian conditional mean K_cross (K_obs + sigma^2 I)^-1 z_obs.
Vector conditional(const Matrix& k_cross, const Matrix& k_obs, double sigma2,
                   const Vector& z_obs);

struct GaussianPredictive {
  Vector mean;
  Matrix covariance;
};

/// Full Gaussian conditional: mean as in `conditional`, covariance
/// K_query - K_cross (K_obs + sigma^2 I)^-1 K_cross^T.
GaussianPredictive conditional_full(const Matrix& k_query,
                                    const Matrix& k_cross,
                                    const Matrix& k_obs, double sigma2,
                                    const Vector& z_obs);

/// `count` i.i.d. draws (rows) from N(0, K + jitter I). Identical seeds give
/// bit-identical output.
Matrix sample_mvn(const Matrix& k, int count, std::uint64_t seed);

/// Diagnostic counters for jitter escalation events (any factorization that
/// needed jitter > 0). Thread-safe; reported in run metadata.
std::uint64_t jitter_event_count();
void reset_jitter_events();

}  // namespace cgpattn
