#pragma once

#include <optional>
#include <vector>

#include "cgpattn/gp_core.hpp"
#include "cgpattn/kernels.hpp"

namespace cgpattn {

/// All learnable quantities of one exact CGP attention head.
struct CgpHeadParams {
  BranchProjection branch_q;  // (W_q, sigma_q)
  BranchProjection branch_k;  // (W_k, sigma_k)
  Matrix w_value;             // s x d
  Matrix w_latent;            // s x d, latent inputs X_o = X W_latent^T
  double noise{0.1};          // sigma >= 0

  Index token_dim() const { return branch_q.in_dim(); }
  Index head_dim() const { return branch_q.out_dim(); }
  void validate() const;
};

struct McConfig {
  int sample_count{8};
  std::uint64_t seed{0};
};

struct GramBundle {
  Matrix k_o;   // n x n canonical Gram on latent inputs
  Matrix k_q;   // n x n query-branch Gram
  Matrix k_k;   // n x n key-branch Gram
  Matrix k_qo;  // n x n query/latent cross
  Matrix k_ok;  // n x n latent/key cross
};

struct AttentionResult {
  Matrix v_plus;                      // n x s
  double uncertainty{0.0};            // accumulated negated lower bound
  std::optional<GramBundle> layer_cache;
  std::vector<Matrix> predictive_cov;  // one n x n matrix per output dim
};

/// Latent inputs X_o = X W_latent^T.
Matrix latent_inputs(const Matrix& x, const CgpHeadParams& p);

/// All Gram matrices of one head on token matrix X.
GramBundle build_grams(const Matrix& x, const CgpHeadParams& p);

/// Exact CGP attention operator
/// K_qo (K_o + sigma^2 I)^-1 K_ok (K_k + sigma^2 I)^-1.
Matrix attention_matrix_exact(const Matrix& x, const CgpHeadParams& p);

/// Full head forward: Z = (K_k + sigma^2 I) X W_v^T, per-dimension outputs
/// nu_a = K z_a, uncertainty accumulated over output dimensions.
AttentionResult forward_exact(const Matrix& x, const CgpHeadParams& p,
                              const McConfig& mc,
                              bool with_covariance = false,
                              bool with_cache = false);

/// Predictive covariance of the attention output (independent of the
/// conditioning values; the rank-one terms of the second moment cancel
/// against the squared mean).
Matrix predictive_variance_exact(const Matrix& x, const CgpHeadParams& p);

/// Negated Monte-Carlo Jensen lower bound of
/// log E[p(z_q = nu_a | z_o)] + log E[p(z_k = z_a | z_o)].
double regularizer_exact(const Vector& nu_a, const Vector& z_a,
                         const Matrix& x, const CgpHeadParams& p,
                         const McConfig& mc);

}  // namespace cgpattn
