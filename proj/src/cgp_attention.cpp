#include "cgpattn/cgp_attention.hpp"

#include <cmath>

namespace cgpattn {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

struct RegularizerState {
  PsdSolveContext ctx_o;       // (K_o + sigma^2 I)
  PsdSolveContext ctx_sigma_q; // Sigma_q
  PsdSolveContext ctx_sigma_k; // Sigma_k
  Matrix m_q;                  // n x N conditional means K_qo ctx_o^-1 z_o^i
  Matrix m_k;                  // n x N
  double logdet_q{0.0};
  double logdet_k{0.0};
  Index n{0};
  int samples{0};
};

RegularizerState make_regularizer_state(const GramBundle& g,
                                        const CgpHeadParams& p,
                                        const McConfig& mc) {
  if (mc.sample_count < 1) throw ValueError("MC sample count must be >= 1");
  const double sigma2 = p.noise * p.noise;
  RegularizerState st{PsdSolveContext::factorize(g.k_o, sigma2),
                      PsdSolveContext(), PsdSolveContext(), {}, {}, 0.0, 0.0,
                      g.k_o.rows(), mc.sample_count};

  Matrix sigma_q = g.k_q - g.k_qo * st.ctx_o.solve(Matrix(g.k_qo.transpose()));
  sigma_q = 0.5 * (sigma_q + sigma_q.transpose());
  st.ctx_sigma_q = PsdSolveContext::factorize(sigma_q, 0.0);
  st.logdet_q = st.ctx_sigma_q.log_det();

  const Matrix k_ko = g.k_ok.transpose();
  Matrix sigma_k = g.k_k - k_ko * st.ctx_o.solve(Matrix(g.k_ok));
  sigma_k = 0.5 * (sigma_k + sigma_k.transpose());
  st.ctx_sigma_k = PsdSolveContext::factorize(sigma_k, 0.0);
  st.logdet_k = st.ctx_sigma_k.log_det();

  // Common random numbers: one sample set z_o^i ~ N(0, K_o), reused by both
  // bound terms and across all output dimensions of a forward pass.
  const Matrix z_o =
      sample_mvn(g.k_o, mc.sample_count, mc.seed).transpose();  // n x N
  const Matrix solved = st.ctx_o.solve(z_o);
  st.m_q = g.k_qo * solved;
  st.m_k = k_ko * solved;
  return st;
}

double regularizer_value(const RegularizerState& st, const Vector& nu_a,
                         const Vector& z_a) {
  const Index n = st.n;
  if (nu_a.size() != n || z_a.size() != n)
    throw DimensionError("regularizer: vector length mismatch");
  const Matrix res_q = nu_a.replicate(1, st.samples) - st.m_q;
  const Matrix res_k = z_a.replicate(1, st.samples) - st.m_k;
  const double quad_q =
      (res_q.array() * st.ctx_sigma_q.solve(res_q).array()).sum() / st.samples;
  const double quad_k =
      (res_k.array() * st.ctx_sigma_k.solve(res_k).array()).sum() / st.samples;
  const double nlog2pi = static_cast<double>(n) * kLogTwoPi;
  return 0.5 * (quad_q + st.logdet_q + nlog2pi) +
         0.5 * (quad_k + st.logdet_k + nlog2pi);
}

}  // namespace

void CgpHeadParams::validate() const {
  branch_q.validate();
  branch_k.validate();
  const Index d = branch_q.in_dim();
  const Index s = branch_q.out_dim();
  if (branch_k.in_dim() != d || branch_k.out_dim() != s)
    throw DimensionError("query and key branches must share dimensions");
  if (w_value.rows() != s || w_value.cols() != d)
    throw DimensionError("value projection must be s x d");
  if (w_latent.rows() != s || w_latent.cols() != d)
    throw DimensionError("latent projection must be s x d");
  if (!w_value.allFinite() || !w_latent.allFinite())
    throw ValueError("head parameters have non-finite entries");
  if (noise < 0.0) throw ValueError("noise scale must be nonnegative");
}

Matrix latent_inputs(const Matrix& x, const CgpHeadParams& p) {
  if (x.cols() != p.token_dim())
    throw DimensionError("token matrix width does not match the head");
  return x * p.w_latent.transpose();
}

GramBundle build_grams(const Matrix& x, const CgpHeadParams& p) {
  p.validate();
  const Matrix x_o = latent_inputs(x, p);
  const Matrix u_q = x * p.branch_q.weight.transpose();
  const Matrix u_k = x * p.branch_k.weight.transpose();
  const double sq = p.branch_q.scale;
  const double sk = p.branch_k.scale;
  GramBundle g;
  g.k_o = gram_canonical_rows(x_o, x_o);
  g.k_q = sq * sq * gram_canonical_rows(u_q, u_q);
  g.k_k = sk * sk * gram_canonical_rows(u_k, u_k);
  g.k_qo = sq * gram_canonical_rows(u_q, x_o);
  g.k_ok = sk * gram_canonical_rows(x_o, u_k);
  return g;
}

Matrix attention_matrix_exact(const Matrix& x, const CgpHeadParams& p) {
  const GramBundle g = build_grams(x, p);
  const double sigma2 = p.noise * p.noise;
  const auto ctx_o = PsdSolveContext::factorize(g.k_o, sigma2);
  const auto ctx_k = PsdSolveContext::factorize(g.k_k, sigma2);
  const Matrix left = g.k_qo * ctx_o.solve(g.k_ok);
  return ctx_k.solve(Matrix(left.transpose())).transpose();
}

AttentionResult forward_exact(const Matrix& x, const CgpHeadParams& p,
                              const McConfig& mc, bool with_covariance,
                              bool with_cache) {
  const GramBundle g = build_grams(x, p);
  const double sigma2 = p.noise * p.noise;
  const auto ctx_o = PsdSolveContext::factorize(g.k_o, sigma2);
  const auto ctx_k = PsdSolveContext::factorize(g.k_k, sigma2);

  Matrix s_k = g.k_k;
  s_k.diagonal().array() += sigma2;
  const Matrix z = s_k * (x * p.w_value.transpose());  // n x s

  const Matrix left = g.k_qo * ctx_o.solve(g.k_ok);
  const Matrix v_plus = left * ctx_k.solve(z);

  AttentionResult out;
  out.v_plus = v_plus;
  const RegularizerState st = make_regularizer_state(g, p, mc);
  for (Index a = 0; a < v_plus.cols(); ++a)
    out.uncertainty += regularizer_value(st, v_plus.col(a), z.col(a));

  if (with_covariance) {
    const Matrix cov = predictive_variance_exact(x, p);
    out.predictive_cov.assign(static_cast<std::size_t>(v_plus.cols()), cov);
  }
  if (with_cache) out.layer_cache = g;
  return out;
}

Matrix predictive_variance_exact(const Matrix& x, const CgpHeadParams& p) {
  const GramBundle g = build_grams(x, p);
  const double sigma2 = p.noise * p.noise;
  const auto ctx_o = PsdSolveContext::factorize(g.k_o, sigma2);
  const auto ctx_k = PsdSolveContext::factorize(g.k_k, sigma2);

  const Matrix c = ctx_o.solve(Matrix(g.k_qo.transpose())).transpose();
  const Matrix sigma_q_star = g.k_q - c * g.k_qo.transpose();
  const Matrix k_ko = g.k_ok.transpose();
  const Matrix cond_o = g.k_o - g.k_ok * ctx_k.solve(k_ko);
  Matrix var = sigma_q_star + c * cond_o * c.transpose();
  return 0.5 * (var + var.transpose());
}

double regularizer_exact(const Vector& nu_a, const Vector& z_a,
                         const Matrix& x, const CgpHeadParams& p,
                         const McConfig& mc) {
  const GramBundle g = build_grams(x, p);
  const RegularizerState st = make_regularizer_state(g, p, mc);
  return regularizer_value(st, nu_a, z_a);
}

}  // namespace cgpattn
