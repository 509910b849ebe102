#include <doctest.h>

#include <chrono>

#include "cgpattn/scgp_attention.hpp"
#include "support/oracles.hpp"

using namespace cgpattn;

namespace {

ScgpHeadParams random_sparse_head(Rng& rng, Index d, Index s, Index m, Index l,
                                  double noise) {
  ScgpHeadParams p;
  p.base.branch_q = {rng.gaussian_matrix(s, d), rng.uniform(0.7, 1.3)};
  p.base.branch_k = {rng.gaussian_matrix(s, d), rng.uniform(0.7, 1.3)};
  p.base.w_value = rng.gaussian_matrix(s, d);
  p.base.w_latent = rng.gaussian_matrix(s, d);
  p.base.noise = noise;
  p.inducing.s_q = rng.gaussian_matrix(m, s);
  p.inducing.s_k = rng.gaussian_matrix(l, s);
  return p;
}

}  // namespace

TEST_SUITE_BEGIN("scgp_attention");

TEST_CASE("dtc operator with the full inducing set reduces to the exact conditional") {
  Rng rng(51);
  for (const Index n : {4, 8, 16, 32}) {
    const Matrix pts = 1.5 * rng.gaussian_matrix(n, 2);
    const Matrix query = 1.5 * rng.gaussian_matrix(n, 2);
    const Matrix k_oo = oracle::canon_gram(pts, pts);
    const Matrix k_qo = oracle::canon_gram(query, pts);
    const double sigma2 = 0.25;
    const Matrix dtc = dtc_mean_operator(k_qo, k_oo, k_oo, sigma2);
    Matrix shifted = k_oo;
    shifted.diagonal().array() += sigma2;
    const Matrix exact = k_qo * oracle::gj_inverse(shifted);
    CHECK((dtc - exact).norm() / exact.norm() <= 1e-9);
  }
}

TEST_CASE("dtc operator scalar case") {
  Matrix one(1, 1);
  one << 1.0;
  const Matrix op = dtc_mean_operator(one, one, one, 1.0);
  CHECK(op(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("dtc operator shape contract and zero-noise rejection") {
  Rng rng(52);
  const Matrix k_am = rng.gaussian_matrix(3, 2);
  const Matrix raw = rng.gaussian_matrix(2, 2);
  const Matrix k_mm = raw * raw.transpose() + Matrix::Identity(2, 2);
  const Matrix k_mo = rng.gaussian_matrix(2, 4);
  const Matrix op = dtc_mean_operator(k_am, k_mm, k_mo, 0.5);
  CHECK(op.rows() == 3);
  CHECK(op.cols() == 4);
  CHECK(op.allFinite());
  CHECK_THROWS_AS(dtc_mean_operator(k_am, k_mm, k_mo, 0.0), ValueError);
}

TEST_CASE("sparse attention matrix equals the composition of the stages") {
  Rng rng(53);
  const ScgpHeadParams p = random_sparse_head(rng, 3, 2, 4, 5, 0.3);
  const Matrix x = rng.gaussian_matrix(6, 3);
  const Matrix whole = attention_matrix_sparse(x, p);

  const Matrix x_o = latent_inputs(x, p.base);
  const Matrix u_q = x * p.base.branch_q.weight.transpose();
  const Matrix u_k = x * p.base.branch_k.weight.transpose();
  const double sq = p.base.branch_q.scale;
  const double sk = p.base.branch_k.scale;
  const double sigma2 = p.base.noise * p.base.noise;
  const Matrix k_qm = sq * oracle::canon_gram(u_q, p.inducing.s_q);
  const Matrix k_mm = oracle::canon_gram(p.inducing.s_q, p.inducing.s_q);
  const Matrix k_mo = oracle::canon_gram(p.inducing.s_q, x_o);
  const Matrix k_ol = oracle::canon_gram(x_o, p.inducing.s_k);
  const Matrix k_ll = oracle::canon_gram(p.inducing.s_k, p.inducing.s_k);
  const Matrix k_lk = sk * oracle::canon_gram(p.inducing.s_k, u_k);

  const Matrix stage_q = dtc_mean_operator(k_qm, k_mm, k_mo, sigma2);
  const Matrix stage_o = dtc_mean_operator(k_ol, k_ll, k_lk, sigma2);
  const Matrix composed = stage_q * stage_o;
  CHECK((whole - composed).cwiseAbs().maxCoeff() <= 1e-10);

  Rng zr(54);
  const Vector z = zr.gaussian_vector(6);
  CHECK((whole * z - stage_q * (stage_o * z)).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("latent/key inducing sets recover the exact attention matrix") {
  // m-set = latent inputs, l-set = key-projected inputs (sigma_k = 1): both
  // DTC stages then collapse onto their exact conditional operators.
  Rng rng(55);
  ScgpHeadParams p = random_sparse_head(rng, 2, 2, 1, 1, 0.4);
  p.base.branch_k.scale = 1.0;
  const Matrix x = 1.5 * rng.gaussian_matrix(5, 2);
  const Matrix x_o = latent_inputs(x, p.base);
  const Matrix u_q = x * p.base.branch_q.weight.transpose();
  const Matrix u_k = x * p.base.branch_k.weight.transpose();
  p.inducing.s_q = x_o;
  p.inducing.s_k = u_k;
  const double sq = p.base.branch_q.scale;
  const double sigma2 = p.base.noise * p.base.noise;

  const Matrix k_oo = oracle::canon_gram(x_o, x_o);
  const Matrix k_qo = sq * oracle::canon_gram(u_q, x_o);
  const Matrix k_ok = oracle::canon_gram(x_o, u_k);
  const Matrix k_kk = oracle::canon_gram(u_k, u_k);

  Matrix s_o = k_oo;
  s_o.diagonal().array() += sigma2;
  const Matrix exact_stage_q = k_qo * oracle::gj_inverse(s_o);
  const Matrix dtc_stage_q = dtc_mean_operator(k_qo, k_oo, k_oo, sigma2);
  CHECK((dtc_stage_q - exact_stage_q).cwiseAbs().maxCoeff() <= 1e-6);

  Matrix s_k = k_kk;
  s_k.diagonal().array() += sigma2;
  const Matrix exact_stage_o = k_ok * oracle::gj_inverse(s_k);
  const Matrix dtc_stage_o = dtc_mean_operator(k_ok, k_kk, k_kk, sigma2);
  CHECK((dtc_stage_o - exact_stage_o).cwiseAbs().maxCoeff() <= 1e-6);

  const Matrix sparse = attention_matrix_sparse(x, p);
  const Matrix exact = attention_matrix_exact(x, p.base);
  CHECK((sparse - exact).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("sparse forward is the staged product and deterministic") {
  Rng rng(56);
  const ScgpHeadParams p = random_sparse_head(rng, 3, 1, 4, 4, 0.3);
  const Matrix x = rng.gaussian_matrix(5, 3);
  const auto res = forward_sparse(x, p, {1, 2});
  const Matrix z = x * p.base.w_value.transpose();
  const Matrix expected = attention_matrix_sparse(x, p) * z;
  CHECK((res.v_plus - expected).cwiseAbs().maxCoeff() <= 1e-10);

  const auto res2 = forward_sparse(x, p, {1, 2});
  CHECK(res.v_plus == res2.v_plus);
  CHECK(res.uncertainty == res2.uncertainty);
}

TEST_CASE("zero value projection zeroes the sparse output") {
  Rng rng(57);
  ScgpHeadParams p = random_sparse_head(rng, 3, 2, 4, 4, 0.3);
  p.base.w_value.setZero();
  const Matrix x = rng.gaussian_matrix(5, 3);
  const auto res = forward_sparse(x, p, {1, 2});
  CHECK(res.v_plus.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sparse predictive variance matches a scalar transcription") {
  // All Grams are 1x1 with value 1; sigma^2 = 1 and z_k = 0.
  ScgpHeadParams p;
  Matrix w(1, 1);
  w << 1.0;
  p.base.branch_q = {w, 1.0};
  p.base.branch_k = {w, 1.0};
  p.base.w_value = w;
  p.base.w_latent = w;
  p.base.noise = 1.0;
  Matrix x(1, 1);
  x << 0.7;
  p.inducing.s_q = latent_inputs(x, p.base);
  p.inducing.s_k = p.inducing.s_q;

  const double sigma2 = 1.0;
  // Appendix-style assembly with scalars: A = B = 1 + 1/sigma2 = 2.
  const double a = 2.0, b = 2.0;
  const double e_zz_ok = sigma2 + (1.0 / a) + 0.0;   // E[z_o z_o | z_k], z_k = 0
  const double e_qq =
      sigma2 + (1.0 / a) + (1.0 / (sigma2 * sigma2)) * (1.0 / a) * e_zz_ok * (1.0 / a);
  const double mean = 0.0;
  const double expected = e_qq - mean * mean;

  const Matrix got = predictive_variance_sparse(x, p);
  CHECK(got(0, 0) == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("sparse variance with full inducing sets approaches the exact one") {
  Rng rng(58);
  const Index n = 4;
  ScgpHeadParams p;
  const Matrix w = rng.gaussian_matrix(2, 2);
  p.base.branch_q = {w, 1.0};
  p.base.branch_k = {w, 1.0};
  p.base.w_value = rng.gaussian_matrix(2, 2);
  p.base.w_latent = w;
  p.base.noise = std::sqrt(1e-5);
  const Matrix x = 2.0 * rng.gaussian_matrix(n, 2);
  p.inducing.s_q = latent_inputs(x, p.base);
  p.inducing.s_k = p.inducing.s_q;

  const Matrix sparse = predictive_variance_sparse(x, p);
  const Matrix exact = predictive_variance_exact(x, p.base);
  CHECK((sparse - exact).cwiseAbs().maxCoeff() <= 1e-4);
}

TEST_CASE("sparse variance diagonal stays nonnegative") {
  Rng rng(59);
  for (int i = 0; i < 5; ++i) {
    const ScgpHeadParams p = random_sparse_head(rng, 3, 2, 4, 5, 0.3);
    const Matrix x = rng.gaussian_matrix(6, 3);
    const Matrix var = predictive_variance_sparse(x, p);
    CHECK((var - var.transpose()).cwiseAbs().maxCoeff() <= 1e-8);
    for (Index d = 0; d < var.rows(); ++d) CHECK(var(d, d) >= -1e-8);
  }
}

TEST_CASE("sparse regularizer with a zero nu keeps only the trace terms") {
  Rng rng(60);
  const ScgpHeadParams p = random_sparse_head(rng, 2, 1, 3, 3, 0.4);
  const Matrix x = rng.gaussian_matrix(4, 2);
  const Vector z_a = rng.gaussian_vector(4);
  const Vector zero = Vector::Zero(4);
  const double with_nu = regularizer_sparse(z_a, z_a, x, p);
  const double without = regularizer_sparse(zero, z_a, x, p);
  const double sigma2 = p.base.noise * p.base.noise;
  // Removing nu changes the value by exactly ||nu||^2 / (2 sigma^2).
  CHECK(with_nu - without ==
        doctest::Approx(z_a.squaredNorm() / (2.0 * sigma2)).epsilon(1e-10));
}

TEST_CASE("sparse regularizer matches a scalar transcription") {
  ScgpHeadParams p;
  Matrix w(1, 1);
  w << 1.0;
  p.base.branch_q = {w, 1.0};
  p.base.branch_k = {w, 1.0};
  p.base.w_value = w;
  p.base.w_latent = w;
  p.base.noise = 0.5;
  Matrix x(1, 1);
  x << 0.3;
  p.inducing.s_q = latent_inputs(x, p.base);
  p.inducing.s_k = p.inducing.s_q;
  Vector nu(1), z_a(1);
  nu << 0.8;
  z_a << -0.4;
  const double got = regularizer_sparse(nu, z_a, x, p);

  const double sigma2 = 0.25;
  const double k = 1.0;  // every canonical Gram entry at coincident points
  const double a = k + (1.0 / sigma2) * k * k;
  const double trace_q1 = k * (1.0 / a) * k * k * (1.0 / a) * k * k;
  const double trace_q2 = k * (1.0 / a) * k;
  const double n_log_2pi = std::log(2.0 * 3.14159265358979323846);
  const double q_side = (0.5 / sigma2) * (nu(0) * nu(0) +
                                          trace_q1 / (sigma2 * sigma2) +
                                          trace_q2) +
                        n_log_2pi + 0.5 / p.base.noise;
  const double k_side = (0.5 / sigma2) * (z_a(0) * z_a(0) +
                                          trace_q1 / (sigma2 * sigma2) +
                                          trace_q2) +
                        n_log_2pi + 0.5 / p.base.noise;
  CHECK(got == doctest::Approx(q_side + k_side).epsilon(1e-10));
}

TEST_CASE("sparse step is cheaper than the exact step at n = 128") {
  using Clock = std::chrono::steady_clock;
  Rng rng(61);
  const Index n = 128;
  const Matrix x = rng.gaussian_matrix(n, 8);
  CgpHeadParams exact_p;
  exact_p.branch_q = {rng.gaussian_matrix(4, 8), 1.0};
  exact_p.branch_k = {rng.gaussian_matrix(4, 8), 1.0};
  exact_p.w_value = rng.gaussian_matrix(4, 8);
  exact_p.w_latent = rng.gaussian_matrix(4, 8);
  exact_p.noise = 0.1;
  ScgpHeadParams sparse_p;
  sparse_p.base = exact_p;
  sparse_p.inducing.s_q = rng.gaussian_matrix(16, 4);
  sparse_p.inducing.s_k = rng.gaussian_matrix(16, 4);

  std::vector<double> exact_times, sparse_times;
  for (int r = 0; r < 20; ++r) {
    auto t0 = Clock::now();
    volatile double sink = attention_matrix_exact(x, exact_p).sum();
    auto t1 = Clock::now();
    volatile double sink2 = attention_matrix_sparse(x, sparse_p).sum();
    auto t2 = Clock::now();
    (void)sink;
    (void)sink2;
    exact_times.push_back(
        std::chrono::duration<double, std::micro>(t1 - t0).count());
    sparse_times.push_back(
        std::chrono::duration<double, std::micro>(t2 - t1).count());
  }
  std::sort(exact_times.begin(), exact_times.end());
  std::sort(sparse_times.begin(), sparse_times.end());
  CHECK(sparse_times[10] < exact_times[10]);
}

TEST_SUITE_END();
