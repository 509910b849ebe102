#include "cgpattn/gp_core.hpp"

#include <atomic>
#include <cmath>
#include <string>

namespace cgpattn {

namespace {

std::atomic<std::uint64_t> g_jitter_events{0};

bool factor_ok(const Eigen::LLT<Matrix>& llt) {
  if (llt.info() != Eigen::Success) return false;
  // Guard against quiet NaN propagation from non-finite input.
  return Matrix(llt.matrixLLT()).allFinite();
}

}  // namespace

std::uint64_t jitter_event_count() { return g_jitter_events.load(); }
void reset_jitter_events() { g_jitter_events.store(0); }

PsdSolveContext PsdSolveContext::factorize(const Matrix& k, double sigma2,
                                           bool check_symmetry) {
  if (k.rows() != k.cols())
    throw DimensionError("psd factorization needs a square matrix");
  if (!k.allFinite()) throw ValueError("psd factorization: non-finite input");
  if (sigma2 < 0.0) throw ValueError("noise variance must be nonnegative");
  if (check_symmetry &&
      (k - k.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + k.cwiseAbs().maxCoeff()))
    throw ValueError("psd factorization expects a symmetric matrix");

  PsdSolveContext ctx;
  Matrix s = k;
  s.diagonal().array() += sigma2;
  ctx.llt_.compute(s);
  if (factor_ok(ctx.llt_)) {
    ctx.jitter_ = 0.0;
    return ctx;
  }
  for (double jitter = kJitterFloor; jitter <= kJitterCap * (1.0 + 1e-12);
       jitter *= 10.0) {
    Matrix sj = s;
    sj.diagonal().array() += jitter;
    ctx.llt_.compute(sj);
    if (factor_ok(ctx.llt_)) {
      ctx.jitter_ = jitter;
      g_jitter_events.fetch_add(1, std::memory_order_relaxed);
      return ctx;
    }
  }
  throw SingularMatrixError(
      "matrix not factorizable at jitter cap " + std::to_string(kJitterCap),
      kJitterCap);
}

Matrix PsdSolveContext::solve(const Matrix& rhs) const {
  if (rhs.rows() != size())
    throw DimensionError("solve: right-hand side row mismatch");
  return llt_.solve(rhs);
}

Vector PsdSolveContext::solve(const Vector& rhs) const {
  if (rhs.size() != size())
    throw DimensionError("solve: right-hand side size mismatch");
  return llt_.solve(rhs);
}

double PsdSolveContext::log_det() const {
  double acc = 0.0;
  const auto& packed = llt_.matrixLLT();
  for (Index i = 0; i < packed.rows(); ++i) acc += std::log(packed(i, i));
  return 2.0 * acc;
}

Matrix psd_solve(const Matrix& k, double sigma2, const Matrix& b) {
  return PsdSolveContext::factorize(k, sigma2).solve(b);
}

double logdet_psd(const Matrix& k, double sigma2) {
  return PsdSolveContext::factorize(k, sigma2).log_det();
}

Vector conditional(const Matrix& k_cross, const Matrix& k_obs, double sigma2,
                   const Vector& z_obs) {
  if (k_cross.cols() != k_obs.rows() || k_obs.rows() != z_obs.size())
    throw DimensionError("conditional: shape mismatch");
  return k_cross * PsdSolveContext::factorize(k_obs, sigma2).solve(z_obs);
}

GaussianPredictive conditional_full(const Matrix& k_query,
                                    const Matrix& k_cross,
                                    const Matrix& k_obs, double sigma2,
                                    const Vector& z_obs) {
  if (k_query.rows() != k_query.cols() || k_query.rows() != k_cross.rows())
    throw DimensionError("conditional_full: query shape mismatch");
  if (k_cross.cols() != k_obs.rows() || k_obs.rows() != z_obs.size())
    throw DimensionError("conditional_full: observation shape mismatch");
  const auto ctx = PsdSolveContext::factorize(k_obs, sigma2);
  GaussianPredictive out;
  out.mean = k_cross * ctx.solve(z_obs);
  Matrix cov = k_query - k_cross * ctx.solve(Matrix(k_cross.transpose()));
  out.covariance = 0.5 * (cov + cov.transpose());
  return out;
}

Matrix sample_mvn(const Matrix& k, int count, std::uint64_t seed) {
  if (count < 1) throw ValueError("sample_mvn needs count >= 1");
  const auto ctx = PsdSolveContext::factorize(k, 0.0);
  const Matrix chol = ctx.chol_lower();
  Rng rng(seed);
  Matrix out(count, k.rows());
  Vector u(k.rows());
  for (int r = 0; r < count; ++r) {
    for (Index i = 0; i < u.size(); ++i) u(i) = rng.gaussian();
    out.row(r) = (chol * u).transpose();
  }
  return out;
}

}  // namespace cgpattn
