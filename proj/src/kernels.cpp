#include "cgpattn/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <string>

namespace cgpattn {

int worker_thread_count() {
  static const int cached = [] {
    const char* env = std::getenv("CGP_ATTN_THREADS");
    if (env == nullptr) return 1;
    const long parsed = std::strtol(env, nullptr, 10);
    if (parsed < 1) return 1;
    if (parsed > 64) return 64;
    return static_cast<int>(parsed);
  }();
  return cached;
}

KernelKind KernelKind::ard_rbf(double output_variance, Vector lengthscales) {
  KernelKind k;
  k.family = KernelFamily::ArdRbf;
  k.output_variance = output_variance;
  k.lengthscales = std::move(lengthscales);
  return k;
}

KernelKind KernelKind::exp_dot(double output_variance, Vector lengthscales) {
  KernelKind k;
  k.family = KernelFamily::ExpDot;
  k.output_variance = output_variance;
  k.lengthscales = std::move(lengthscales);
  return k;
}

KernelKind KernelKind::unit(KernelFamily family, Index dim) {
  KernelKind k;
  k.family = family;
  if (family != KernelFamily::CanonicalSE) {
    k.output_variance = 1.0;
    k.lengthscales = Vector::Ones(dim);
  }
  return k;
}

void KernelKind::validate(Index dim) const {
  if (family == KernelFamily::CanonicalSE) return;
  if (!(output_variance > 0.0))
    throw ValueError("kernel output variance must be positive");
  if (lengthscales.size() != dim)
    throw DimensionError("lengthscale vector length " +
                         std::to_string(lengthscales.size()) +
                         " does not match input dimension " +
                         std::to_string(dim));
  for (Index i = 0; i < lengthscales.size(); ++i)
    if (!(lengthscales(i) > 0.0))
      throw ValueError("lengthscales must be positive");
}

void BranchProjection::validate() const {
  if (weight.rows() < 1 || weight.cols() < 1)
    throw DimensionError("branch projection must be at least 1x1");
  if (!weight.allFinite())
    throw ValueError("branch projection has non-finite entries");
  if (!(scale > 0.0)) throw ValueError("branch scale must be positive");
}

namespace {

void require_same_dim(const Vector& x, const Vector& y) {
  if (x.size() != y.size())
    throw DimensionError("kernel inputs have mismatched dimensions " +
                         std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()));
}

}  // namespace

double eval_canonical(const Vector& x, const Vector& y) {
  require_same_dim(x, y);
  double sq = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double d = x(i) - y(i);
    sq += d * d;
  }
  return std::exp(-0.5 * sq);
}

double eval_branch(const Vector& x, const Vector& y,
                   const BranchProjection& branch) {
  branch.validate();
  if (x.size() != branch.in_dim() || y.size() != branch.in_dim())
    throw DimensionError("branch projection expects dimension " +
                         std::to_string(branch.in_dim()));
  const Vector px = branch.weight * x;
  const Vector py = branch.weight * y;
  return branch.scale * branch.scale * eval_canonical(px, py);
}

double eval_cross(const Vector& x, const Vector& y, const BranchProjection& a,
                  const BranchProjection& b) {
  a.validate();
  b.validate();
  if (x.size() != a.in_dim() || y.size() != b.in_dim())
    throw DimensionError("cross kernel inputs do not match the projections");
  if (a.out_dim() != b.out_dim())
    throw DimensionError("cross kernel branches project to different spaces");
  const Vector px = a.weight * x;
  const Vector py = b.weight * y;
  return a.scale * b.scale * eval_canonical(px, py);
}

double eval_baseline(const Vector& x, const Vector& y,
                     const KernelKind& kind) {
  require_same_dim(x, y);
  if (kind.family == KernelFamily::CanonicalSE) return eval_canonical(x, y);
  kind.validate(x.size());
  double acc = 0.0;
  if (kind.family == KernelFamily::ArdRbf) {
    for (Index i = 0; i < x.size(); ++i) {
      const double d = x(i) - y(i);
      acc += d * d / kind.lengthscales(i);
    }
    return kind.output_variance * std::exp(-0.5 * acc);
  }
  for (Index i = 0; i < x.size(); ++i)
    acc += x(i) * y(i) / kind.lengthscales(i);
  return kind.output_variance * std::exp(acc);
}

GramMatrix gram(const std::vector<Vector>& a, const std::vector<Vector>& b,
                const KernelEvaluator& evaluator) {
  if (a.empty() || b.empty())
    throw DimensionError("gram requires nonempty point lists");
  GramMatrix out;
  out.entries.resize(static_cast<Index>(a.size()), static_cast<Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      out.entries(static_cast<Index>(i), static_cast<Index>(j)) =
          evaluator(a[i], b[j]);
  if (a.size() == b.size()) {
    bool same_points = true;
    for (std::size_t i = 0; i < a.size() && same_points; ++i)
      same_points = a[i].size() == b[i].size() && a[i] == b[i];
    if (same_points &&
        (out.entries - out.entries.transpose()).cwiseAbs().maxCoeff() <= 1e-12)
      out.symmetric = true;
  }
  return out;
}

Matrix gram_canonical_rows(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw DimensionError("gram_canonical_rows: column mismatch");
  Matrix out(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.rows(); ++j) {
      double sq = 0.0;
      for (Index c = 0; c < a.cols(); ++c) {
        const double d = a(i, c) - b(j, c);
        sq += d * d;
      }
      out(i, j) = std::exp(-0.5 * sq);
    }
  }
  return out;
}

}  // namespace cgpattn
