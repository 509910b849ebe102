#pragma once

#include <functional>
#include <vector>

#include "cgpattn/common.hpp"

namespace cgpattn {

enum class KernelFamily { CanonicalSE, ArdRbf, ExpDot };

/// Kernel selection for the baseline attention paths. CanonicalSE carries no
/// parameters; ArdRbf and ExpDot carry an output variance and per-dimension
/// squared lengthscales.
struct KernelKind {
  KernelFamily family{KernelFamily::CanonicalSE};
  double output_variance{1.0};
  Vector lengthscales;  // squared lengthscales, one per input dimension

  static KernelKind canonical() { return {}; }
  static KernelKind ard_rbf(double output_variance, Vector lengthscales);
  static KernelKind exp_dot(double output_variance, Vector lengthscales);

  /// Unit-parameter kernel of the given family for dimension `dim`.
  static KernelKind unit(KernelFamily family, Index dim);

  void validate(Index dim) const;
};

/// Affine scaling (W, sigma) that derives one GP branch from the canonical
/// process: z(x) = sigma * z_o(x W^T).
struct BranchProjection {
  Matrix weight;  // s x d
  double scale{1.0};

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
  void validate() const;
};

struct GramMatrix {
  Matrix entries;
  bool symmetric{false};
};

using KernelEvaluator =
    std::function<double(const Vector&, const Vector&)>;

/// Parameter-free squared exponential: exp(-0.5 ||x - x'||^2).
double eval_canonical(const Vector& x, const Vector& y);

/// Branch kernel sigma^2 * k_o(x W^T, x' W^T).
double eval_branch(const Vector& x, const Vector& y,
                   const BranchProjection& branch);

/// Cross kernel sigma_a sigma_b * k_o(x W_a^T, x' W_b^T). Asymmetric in its
/// arguments unless the branches coincide.
double eval_cross(const Vector& x, const Vector& y, const BranchProjection& a,
                  const BranchProjection& b);

/// Baseline attention kernels (ARD-RBF, exponential dot product).
double eval_baseline(const Vector& x, const Vector& y, const KernelKind& kind);

/// Dense Gram matrix with entries evaluator(A[i], B[j]). The symmetric flag is
/// set when A and B are the same list and the result equals its transpose
/// within 1e-12.
GramMatrix gram(const std::vector<Vector>& a, const std::vector<Vector>& b,
                const KernelEvaluator& evaluator);

/// Row-wise canonical Gram: out(i,j) = exp(-0.5 ||A.row(i) - B.row(j)||^2).
/// Difference-based so that identical rows give exactly 1.
Matrix gram_canonical_rows(const Matrix& a, const Matrix& b);

}  // namespace cgpattn
