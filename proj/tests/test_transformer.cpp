#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cgpattn/checkpoint.hpp"
#include "cgpattn/transformer.hpp"
#include "support/oracles.hpp"

using namespace cgpattn;

namespace {

double softplus(double x) { return std::log1p(std::exp(x)); }

ExampleSet micro_dataset(int per_class, int tokens, int dim, Rng& rng) {
  ExampleSet out;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Example ex;
      ex.tokens = 0.3 * rng.gaussian_matrix(tokens, dim);
      ex.tokens.array() += (c == 0 ? 1.0 : -1.0);
      ex.label = c;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

ModelConfig micro_config(AttentionKind kind, int layers = 2) {
  ModelConfig cfg;
  cfg.layers = layers;
  cfg.heads = 2;
  cfg.token_dim = 8;
  cfg.head_dim = 2;
  cfg.classes = 2;
  cfg.attention = kind;
  cfg.input_dim = 6;
  cfg.max_positions = 4;
  cfg.inducing_q = 3;
  cfg.inducing_k = 3;
  return cfg;
}

TrainConfig micro_train(int epochs, std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 8;
  tc.lr_initial = 5e-3;
  tc.lr_final = 1e-3;
  tc.seed = seed;
  tc.mc_samples = 4;
  return tc;
}

}  // namespace

TEST_SUITE_BEGIN("transformer");

TEST_CASE("softmax attention with zero queries averages the values") {
  Rng rng(81);
  const Matrix x = rng.gaussian_matrix(4, 3);
  const Matrix w_q = Matrix::Zero(2, 3);
  const Matrix w_k = rng.gaussian_matrix(2, 3);
  const Matrix w_v = rng.gaussian_matrix(2, 3);
  const Matrix out = softmax_attention(x, w_q, w_k, w_v);
  const Matrix v = x * w_v.transpose();
  const Matrix expected = v.colwise().mean().replicate(4, 1);
  CHECK((out - expected).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("softmax attention on a single token returns its value vector") {
  Rng rng(82);
  const Matrix x = rng.gaussian_matrix(1, 3);
  const Matrix w = rng.gaussian_matrix(2, 3);
  const Matrix out = softmax_attention(x, w, w, w);
  CHECK((out - x * w.transpose()).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("softmax attention matches a hand computation and rows normalize") {
  Rng rng(83);
  const Matrix x = rng.gaussian_matrix(2, 3);
  const Matrix w_q = rng.gaussian_matrix(2, 3);
  const Matrix w_k = rng.gaussian_matrix(2, 3);
  const Matrix w_v = rng.gaussian_matrix(2, 3);
  const Matrix got = softmax_attention(x, w_q, w_k, w_v);

  const Matrix q = x * w_q.transpose();
  const Matrix k = x * w_k.transpose();
  const Matrix logits = q * k.transpose() / std::sqrt(3.0);
  Matrix attn(2, 2);
  for (Index r = 0; r < 2; ++r) {
    double denom = 0.0;
    for (Index c = 0; c < 2; ++c) denom += std::exp(logits(r, c));
    for (Index c = 0; c < 2; ++c) attn(r, c) = std::exp(logits(r, c)) / denom;
    CHECK(attn.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
  }
  const Matrix expected = attn * (x * w_v.transpose());
  CHECK((got - expected).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("kernel attention gram is symmetric iff the projections are tied") {
  Rng rng(84);
  const Matrix x = rng.gaussian_matrix(4, 3);
  const Matrix w = rng.gaussian_matrix(2, 3);
  const KernelKind kind = KernelKind::unit(KernelFamily::ArdRbf, 2);
  const Matrix sym = kernel_attention_gram(x, kind, w, w);
  CHECK((sym - sym.transpose()).cwiseAbs().maxCoeff() <= 1e-10);

  bool asym_found = false;
  for (int i = 0; i < 10 && !asym_found; ++i) {
    const Matrix w_q = rng.gaussian_matrix(2, 3);
    const Matrix w_k = rng.gaussian_matrix(2, 3);
    const Matrix g = kernel_attention_gram(x, kind, w_q, w_k);
    asym_found = (g - g.transpose()).cwiseAbs().maxCoeff() > 1e-6;
  }
  CHECK(asym_found);
}

TEST_CASE("kernel attention with a zero value projection is zero") {
  Rng rng(85);
  const Matrix x = rng.gaussian_matrix(4, 3);
  const Matrix w = rng.gaussian_matrix(2, 3);
  const Matrix out = kernel_attention(x, KernelKind::unit(KernelFamily::ArdRbf, 2),
                                      w, w, Matrix::Zero(2, 3));
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mhsa identity and head permutation invariance") {
  Rng rng(86);
  const Matrix head = rng.gaussian_matrix(4, 3);
  CHECK((mhsa({head}, Matrix::Identity(3, 3)) - head).cwiseAbs().maxCoeff() <=
        1e-14);

  const Matrix h0 = rng.gaussian_matrix(4, 2);
  const Matrix h1 = rng.gaussian_matrix(4, 2);
  const Matrix w_o = rng.gaussian_matrix(3, 4);
  Matrix w_o_swapped(3, 4);
  w_o_swapped << w_o.middleCols(2, 2), w_o.middleCols(0, 2);
  const Matrix a = mhsa({h0, h1}, w_o);
  const Matrix b = mhsa({h1, h0}, w_o_swapped);
  CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(a.rows() == 4);
  CHECK(a.cols() == 3);
}

TEST_CASE("softmax models carry zero uncertainty and deterministic logits") {
  Rng rng(87);
  TransformerModel model(micro_config(AttentionKind::Softmax, 1));
  model.init_params(3);
  const ExampleSet batch = micro_dataset(2, 4, 6, rng);
  const auto out = model_forward(model, batch, true, 9, 4);
  CHECK(out.u_total == 0.0);
  CHECK(out.logits.rows() == 4);
  CHECK(out.logits.cols() == 2);
  const auto out2 = model_forward(model, batch, true, 9, 4);
  CHECK(out.logits == out2.logits);
}

TEST_CASE("total loss composes task and regularizer linearly") {
  Matrix logits(2, 3);
  logits << 1.0, 0.0, -1.0, 0.2, 0.4, 0.1;
  const std::vector<int> labels = {0, 2};

  const auto at0 = total_loss(logits, labels, 2.5, 0.0);
  CHECK(at0.total == at0.task);
  const auto at1 = total_loss(logits, labels, 2.5, 0.3);
  const auto at2 = total_loss(logits, labels, 2.5, 0.6);
  CHECK(at2.total - at2.task ==
        doctest::Approx(2.0 * (at1.total - at1.task)).epsilon(1e-14));

  double expected = 0.0;
  for (Index r = 0; r < 2; ++r) {
    double denom = 0.0;
    for (Index c = 0; c < 3; ++c) denom += std::exp(logits(r, c));
    expected -= std::log(std::exp(logits(r, labels[static_cast<std::size_t>(r)])) / denom);
  }
  expected /= 2.0;
  CHECK(at0.task == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("graph forward agrees with the plain attention modules") {
  Rng rng(88);
  ModelConfig cfg = micro_config(AttentionKind::CgpExact, 1);
  cfg.heads = 1;
  TransformerModel model(cfg);
  model.init_params(5);
  const Matrix tokens = 0.4 * rng.gaussian_matrix(4, 6);
  const std::uint64_t mc_seed = 17;
  const int mc_samples = 8;
  const auto got = model.forward_value(tokens, mc_seed, mc_samples);

  // Manual reconstruction of the block with the plain value-level modules.
  const ParamStore& ps = model.params();
  const Matrix x0 = tokens * ps.at("embed.weight").transpose() +
                    ps.at("embed.pos").topRows(4);
  Matrix ln(4, 8);
  for (Index r = 0; r < 4; ++r) {
    const double mu = x0.row(r).mean();
    const double var = (x0.row(r).array() - mu).square().mean();
    ln.row(r) = ((x0.row(r).array() - mu) / std::sqrt(var + 1e-5)).matrix();
  }
  ln = (ln.array().rowwise() * ps.at("layer0.ln1.gain").row(0).array()).matrix();
  ln.rowwise() += ps.at("layer0.ln1.bias").row(0);

  CgpHeadParams head;
  head.branch_q = {ps.at("layer0.head0.wq"),
                   softplus(ps.at("layer0.head0.sigma_q")(0, 0))};
  head.branch_k = {ps.at("layer0.head0.wk"),
                   softplus(ps.at("layer0.head0.sigma_k")(0, 0))};
  head.w_value = ps.at("layer0.head0.wv");
  head.w_latent = ps.at("layer0.head0.wlat");
  head.noise = softplus(ps.at("layer0.head0.noise")(0, 0));

  const std::uint64_t head_seed = Rng::derive(mc_seed, 0);
  const auto plain = forward_exact(ln, head, {mc_samples, head_seed});
  CHECK(std::abs(plain.uncertainty - got.uncertainty) <=
        1e-7 * std::max(1.0, std::abs(plain.uncertainty)));

  const Matrix after_attn = x0 + mhsa({plain.v_plus}, ps.at("layer0.wo"));
  // The block output recorded by the graph includes the FFN; compare through
  // the logits instead of re-deriving the FFN here.
  Matrix ln2(4, 8);
  for (Index r = 0; r < 4; ++r) {
    const double mu = after_attn.row(r).mean();
    const double var = (after_attn.row(r).array() - mu).square().mean();
    ln2.row(r) =
        ((after_attn.row(r).array() - mu) / std::sqrt(var + 1e-5)).matrix();
  }
  ln2 = (ln2.array().rowwise() * ps.at("layer0.ln2.gain").row(0).array()).matrix();
  ln2.rowwise() += ps.at("layer0.ln2.bias").row(0);
  Matrix ffn = ln2 * ps.at("layer0.ffn.w1").transpose();
  ffn.rowwise() += ps.at("layer0.ffn.b1").row(0);
  for (Index i = 0; i < ffn.size(); ++i) {
    const double z = ffn(i);
    const double u = 0.7978845608028653558798921198687 * (z + 0.044715 * z * z * z);
    ffn(i) = 0.5 * z * (1.0 + std::tanh(u));
  }
  Matrix block = after_attn + (ffn * ps.at("layer0.ffn.w2").transpose());
  block.rowwise() += ps.at("layer0.ffn.b2").row(0);
  const Eigen::RowVectorXd pooled = block.colwise().mean();
  Eigen::RowVectorXd logits =
      pooled * ps.at("head.weight").transpose() + ps.at("head.bias").row(0);
  CHECK((logits - got.logits).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("training is deterministic for a fixed seed") {
  Rng rng(89);
  const ExampleSet train_set = micro_dataset(10, 4, 6, rng);
  const ExampleSet val_set = micro_dataset(3, 4, 6, rng);

  const auto run_once = [&]() {
    TransformerModel model(micro_config(AttentionKind::CgpExact));
    model.init_params(11, &train_set);
    train(model, micro_train(3, 21), train_set, val_set);
    return model.params().flatten();
  };
  const Vector a = run_once();
  const Vector b = run_once();
  CHECK(a == b);
}

TEST_CASE("training results are invariant to the worker thread count") {
  Rng rng(98);
  const ExampleSet train_set = micro_dataset(10, 4, 6, rng);
  const auto run_with = [&](int threads) {
    TransformerModel model(micro_config(AttentionKind::CgpExact));
    model.init_params(43, &train_set);
    TrainConfig tc = micro_train(3, 47);
    tc.threads = threads;
    train(model, tc, train_set, {});
    return model.params().flatten();
  };
  CHECK(run_with(1) == run_with(3));
}

TEST_CASE("alpha zero trajectories match with the regularizer skipped") {
  Rng rng(90);
  const ExampleSet train_set = micro_dataset(8, 4, 6, rng);

  const auto run_once = [&](bool skip) {
    TransformerModel model(micro_config(AttentionKind::CgpExact));
    model.init_params(13, &train_set);
    TrainConfig tc = micro_train(3, 23);
    tc.alpha_fixed = true;
    tc.alpha_value = 0.0;
    tc.skip_regularizer = skip;
    const auto result = train(model, tc, train_set, {});
    std::vector<double> losses;
    for (const auto& e : result.history) losses.push_back(e.task_loss);
    return std::make_pair(losses, model.params().flatten());
  };
  const auto with_reg = run_once(false);
  const auto without = run_once(true);
  for (std::size_t i = 0; i < with_reg.first.size(); ++i)
    CHECK(with_reg.first[i] == without.first[i]);
  CHECK(with_reg.second == without.second);
}

TEST_CASE("task loss decreases for every attention kind") {
  Rng rng(91);
  const ExampleSet train_set = micro_dataset(10, 4, 6, rng);
  for (const auto kind :
       {AttentionKind::Softmax, AttentionKind::KernelSym,
        AttentionKind::KernelAsym, AttentionKind::CgpExact,
        AttentionKind::CgpSparse}) {
    CAPTURE(to_string(kind));
    TransformerModel model(micro_config(kind));
    model.init_params(17, &train_set);
    TrainConfig tc = micro_train(20, 29);
    tc.alpha_end = 0.2;
    const auto result = train(model, tc, train_set, {});
    std::vector<double> first, last;
    for (int e = 0; e < 5; ++e) first.push_back(result.history[e].task_loss);
    for (int e = 15; e < 20; ++e) last.push_back(result.history[e].task_loss);
    std::sort(first.begin(), first.end());
    std::sort(last.begin(), last.end());
    CHECK(last[2] < first[2]);
  }
}

TEST_CASE("a 2-layer CGP model learns the micro task") {
  Rng rng(92);
  const ExampleSet train_set = micro_dataset(20, 4, 6, rng);
  TransformerModel model(micro_config(AttentionKind::CgpExact));
  model.init_params(19, &train_set);
  TrainConfig tc = micro_train(40, 31);
  tc.alpha_end = 0.5;
  train(model, tc, train_set, {});
  const double train_acc = accuracy(model, train_set, 99, 4);
  CHECK(train_acc >= 0.9);
}

TEST_CASE("alpha schedule spans its endpoints") {
  TrainConfig tc;
  tc.epochs = 11;
  tc.alpha_start = 0.0;
  tc.alpha_end = 1.0;
  CHECK(tc.alpha_at(0) == 0.0);
  CHECK(tc.alpha_at(10) == 1.0);
  CHECK(tc.alpha_at(5) == doctest::Approx(0.5));
  tc.alpha_fixed = true;
  tc.alpha_value = 0.7;
  CHECK(tc.alpha_at(3) == 0.7);
}

TEST_CASE("gradcheck on a quadratic functional is essentially exact") {
  ParamStore params;
  Rng rng(93);
  params.add("x", rng.gaussian_matrix(3, 2));
  const LossFunctional f = [](const ParamStore& p, Vector* grad) {
    const Vector flat = p.flatten();
    if (grad != nullptr) *grad = 2.0 * flat;
    return flat.squaredNorm();
  };
  const auto report = gradcheck(params, f, 6, 1e-5, 1);
  CHECK(report.max_rel_error <= 1e-9);
}

TEST_CASE("sparse graph forward agrees with the plain sparse module") {
  Rng rng(99);
  ModelConfig cfg = micro_config(AttentionKind::CgpSparse, 1);
  cfg.heads = 1;
  TransformerModel model(cfg);
  ExampleSet sample;
  sample.push_back({0.4 * rng.gaussian_matrix(4, 6), 0});
  model.init_params(53, &sample);
  const Matrix tokens = 0.4 * rng.gaussian_matrix(4, 6);
  const auto got = model.forward_value(tokens, 11, 4);

  const ParamStore& ps = model.params();
  const Matrix x0 = tokens * ps.at("embed.weight").transpose() +
                    ps.at("embed.pos").topRows(4);
  Matrix ln(4, 8);
  for (Index r = 0; r < 4; ++r) {
    const double mu = x0.row(r).mean();
    const double var = (x0.row(r).array() - mu).square().mean();
    ln.row(r) = ((x0.row(r).array() - mu) / std::sqrt(var + 1e-5)).matrix();
  }
  ln = (ln.array().rowwise() * ps.at("layer0.ln1.gain").row(0).array()).matrix();
  ln.rowwise() += ps.at("layer0.ln1.bias").row(0);

  ScgpHeadParams head;
  head.base.branch_q = {ps.at("layer0.head0.wq"),
                        softplus(ps.at("layer0.head0.sigma_q")(0, 0))};
  head.base.branch_k = {ps.at("layer0.head0.wk"),
                        softplus(ps.at("layer0.head0.sigma_k")(0, 0))};
  head.base.w_value = ps.at("layer0.head0.wv");
  head.base.w_latent = ps.at("layer0.head0.wlat");
  head.base.noise = softplus(ps.at("layer0.head0.noise")(0, 0));
  head.inducing.s_q = ps.at("layer0.head0.inducing_q");
  head.inducing.s_k = ps.at("layer0.head0.inducing_k");

  const auto plain = forward_sparse(ln, head, {4, 0});
  CHECK(std::abs(plain.uncertainty - got.uncertainty) <=
        1e-7 * std::max(1.0, std::abs(plain.uncertainty)));

  double u_from_op = 0.0;
  const Matrix z = ln * head.base.w_value.transpose();
  for (Index a = 0; a < plain.v_plus.cols(); ++a)
    u_from_op +=
        regularizer_sparse(plain.v_plus.col(a), z.col(a), ln, head);
  CHECK(std::abs(u_from_op - got.uncertainty) <=
        1e-7 * std::max(1.0, std::abs(u_from_op)));
}

TEST_CASE("gradcheck reports the parameter carrying a non-finite gradient") {
  ParamStore params;
  params.add("alpha", Matrix::Ones(2, 2));
  params.add("beta", Matrix::Ones(1, 1));
  const LossFunctional f = [](const ParamStore& p, Vector* grad) {
    if (grad != nullptr) {
      grad->setZero(p.total_count());
      (*grad)(4) = std::numeric_limits<double>::quiet_NaN();  // inside "beta"
    }
    return 1.0;
  };
  try {
    gradcheck(params, f, 1, 1e-5, 1);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
}

TEST_CASE("gradcheck rejects an out-of-range step size") {
  ParamStore params;
  params.add("x", Matrix::Ones(1, 1));
  const LossFunctional f = [](const ParamStore& p, Vector* grad) {
    if (grad != nullptr) grad->setZero(1);
    return 0.0;
  };
  CHECK_THROWS_AS(gradcheck(params, f, 1, 1e-2, 1), ValueError);
}

TEST_CASE("full objective gradients match finite differences (exact head)") {
  // Token scale and seeds chosen so no coordinate sits in the
  // finite-difference noise floor at eps = 1e-5.
  Rng rng(207);
  ModelConfig cfg = micro_config(AttentionKind::CgpExact, 1);
  cfg.heads = 1;
  TransformerModel model(cfg);
  ExampleSet batch;
  for (int b = 0; b < 2; ++b)
    batch.push_back({0.6 * rng.gaussian_matrix(4, 6), b % 2});
  model.init_params(7);
  const auto objective = make_objective(model, batch, 0.5, 307, 4);
  const auto report = gradcheck(model.params(), objective, 40, 1e-5, 3);
  CHECK(report.max_rel_error <= 1e-4);
}

TEST_CASE("full objective gradients match finite differences (sparse head)") {
  Rng rng(204);
  ModelConfig cfg = micro_config(AttentionKind::CgpSparse, 1);
  cfg.heads = 1;
  cfg.init_noise = 0.5;
  TransformerModel model(cfg);
  ExampleSet batch;
  for (int b = 0; b < 2; ++b)
    batch.push_back({0.6 * rng.gaussian_matrix(4, 6), b % 2});
  model.init_params(4, &batch);
  const auto objective = make_objective(model, batch, 0.5, 304, 4);
  const auto report = gradcheck(model.params(), objective, 40, 1e-5, 5);
  CHECK(report.max_rel_error <= 1e-4);
}

TEST_CASE("inducing points receive gradient from the total loss") {
  Rng rng(96);
  ModelConfig cfg = micro_config(AttentionKind::CgpSparse, 1);
  cfg.init_noise = 0.5;
  TransformerModel model(cfg);
  const ExampleSet batch = micro_dataset(2, 4, 6, rng);
  model.init_params(31, &batch);
  const auto objective = make_objective(model, batch, 0.5, 81, 4);
  Vector grad;
  objective(model.params(), &grad);
  Index at = 0;
  for (std::size_t e = 0; e < model.params().size(); ++e) {
    const auto& entry = model.params().entry(e);
    if (entry.name.find("inducing") != std::string::npos) {
      for (Index i = 0; i < entry.value.size(); ++i)
        CHECK(grad(at + i) != 0.0);
    }
    at += entry.value.size();
  }
}

TEST_CASE("parameter store flattens and restores losslessly") {
  Rng rng(97);
  TransformerModel model(micro_config(AttentionKind::CgpSparse));
  model.init_params(37);
  ParamStore& ps = model.params();
  const Vector flat = ps.flatten();
  CHECK(flat.size() == ps.total_count());
  ParamStore copy = ps;
  Vector perturbed = flat;
  perturbed(3) += 1.25;
  copy.unflatten(perturbed);
  CHECK(copy.flatten() == perturbed);
  copy.unflatten(flat);
  CHECK(copy.flatten() == flat);
}

TEST_CASE("checkpoints round-trip and carry the documented header") {
  TransformerModel model(micro_config(AttentionKind::CgpExact, 1));
  model.init_params(41);
  const std::string path = "test_checkpoint.bin";
  save_checkpoint(path, model.params());
  const ParamStore restored = load_checkpoint(path);
  CHECK(restored.size() == model.params().size());
  for (std::size_t i = 0; i < restored.size(); ++i) {
    CHECK(restored.entry(i).name == model.params().entry(i).name);
    CHECK(restored.entry(i).value == model.params().entry(i).value);
  }

  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 8) == "CGPCKPT1");
  unsigned char version[8];
  in.read(reinterpret_cast<char*>(version), 8);
  CHECK(version[0] == 1);  // little-endian u64 = 1
  for (int i = 1; i < 8; ++i) CHECK(version[i] == 0);
  std::remove(path.c_str());
}

TEST_SUITE_END();
