#pragma once

#include "cgpattn/cgp_attention.hpp"

namespace cgpattn {

/// Learnable pseudo-inputs in canonical space: S (m x s) for the query-side
/// stage, S' (l x s) for the key-side stage.
struct InducingSets {
  Matrix s_q;  // m x s
  Matrix s_k;  // l x s
  void validate(Index head_dim) const;
};

struct ScgpHeadParams {
  CgpHeadParams base;
  InducingSets inducing;
  void validate() const;
};

/// DTC conditional-mean operator
/// (1/sigma^2) K_am (K_mm + (1/sigma^2) K_mo K_om)^-1 K_mo.
Matrix dtc_mean_operator(const Matrix& k_am, const Matrix& k_mm,
                         const Matrix& k_mo, double sigma2);

/// Sparse attention operator: composition of the two DTC stages. Never forms
/// an n x n inverse.
Matrix attention_matrix_sparse(const Matrix& x, const ScgpHeadParams& p);

/// Sparse head forward: Z = X W_v^T, V+ = K_sparse Z, uncertainty from the
/// closed-form sparse bound summed over output dimensions.
AttentionResult forward_sparse(const Matrix& x, const ScgpHeadParams& p,
                               const McConfig& mc,
                               bool with_covariance = false);

/// Predictive covariance of the sparse attention output (rank-one terms of
/// the second moment cancel against the squared mean, so this is independent
/// of the conditioning values).
Matrix predictive_variance_sparse(const Matrix& x, const ScgpHeadParams& p);

/// Negated closed-form lower bound of
/// log E[p(z_q = nu_a | z_o)] + log E[p(z_k = z_a | z_o)] under the DTC
/// chain. No sampling involved.
double regularizer_sparse(const Vector& nu_a, const Vector& z_a,
                          const Matrix& x, const ScgpHeadParams& p);

}  // namespace cgpattn
