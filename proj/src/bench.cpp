#include "cgpattn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "cgpattn/transformer.hpp"

namespace cgpattn {

namespace {

using Clock = std::chrono::steady_clock;

struct StepSetup {
  TransformerModel model;
  Matrix tokens;
};

StepSetup make_setup(bool sparse, int n, int inducing, std::uint64_t seed,
                     int token_dim, int head_dim) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.token_dim = token_dim;
  cfg.head_dim = head_dim;
  cfg.classes = 2;
  cfg.attention = sparse ? AttentionKind::CgpSparse : AttentionKind::CgpExact;
  cfg.input_dim = token_dim;
  cfg.max_positions = n;
  if (sparse) {
    cfg.inducing_q = inducing;
    cfg.inducing_k = inducing;
  }
  StepSetup setup{TransformerModel(cfg), Matrix()};
  setup.model.init_params(seed);
  Rng rng(Rng::derive(seed, 5));
  setup.tokens = 0.5 * rng.gaussian_matrix(n, token_dim);
  return setup;
}

struct StepResult {
  double us{0.0};
  std::size_t tape_bytes{0};
};

StepResult one_step(const StepSetup& setup, std::uint64_t mc_seed) {
  const auto start = Clock::now();
  ad::Tape tape;
  const auto leaves = setup.model.make_leaves(tape, true);
  const auto graph = setup.model.build_graph(tape, leaves, setup.tokens,
                                             mc_seed, /*mc_samples=*/8,
                                             /*warm_path=*/false,
                                             /*skip_regularizer=*/false);
  // A scalar pseudo-loss drives the backward pass through both the attention
  // output and the uncertainty term.
  const ad::Var loss = tape.add(tape.sum(graph.logits), graph.uncertainty);
  tape.backward(loss);
  const auto stop = Clock::now();
  StepResult out;
  out.us = std::chrono::duration<double, std::micro>(stop - start).count();
  out.tape_bytes = tape.value_bytes();
  return out;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double iqr_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto at = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return at(0.75) - at(0.25);
}

/// Single-precision forward-only attention matrix application; the
/// benchmark's 32-bit reference column.
template <typename Scalar>
double forward32_once(const StepSetup& setup, bool sparse, int inducing) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const auto& params = setup.model.params();
  const auto get = [&](const std::string& name) {
    return params.at("layer0.head0." + name).template cast<Scalar>().eval();
  };
  const Mat x = setup.tokens.cast<Scalar>();
  const Mat wq = get("wq"), wk = get("wk"), wv = get("wv"), wlat = get("wlat");
  const double raw_noise = params.at("layer0.head0.noise")(0, 0);
  const Scalar sigma = static_cast<Scalar>(std::log1p(std::exp(raw_noise)));
  const Scalar sigma2 = sigma * sigma;

  const auto gram = [](const Mat& a, const Mat& b) {
    Mat out(a.rows(), b.rows());
    for (Index i = 0; i < a.rows(); ++i)
      for (Index j = 0; j < b.rows(); ++j)
        out(i, j) = std::exp(Scalar(-0.5) * (a.row(i) - b.row(j)).squaredNorm());
    return out;
  };

  const auto start = Clock::now();
  const Mat uq = x * wq.transpose();
  const Mat uk = x * wk.transpose();
  const Mat xo = x * wlat.transpose();
  const Mat z = x * wv.transpose();
  Mat result;
  if (!sparse) {
    Mat ko = gram(xo, xo);
    Mat kk = gram(uk, uk);
    const Mat kqo = gram(uq, xo);
    const Mat kok = gram(xo, uk);
    ko.diagonal().array() += sigma2;
    kk.diagonal().array() += sigma2;
    const Mat zz = kk * z;
    result = kqo * ko.llt().solve(kok * kk.llt().solve(zz));
  } else {
    const Mat ind_q = params.at("layer0.head0.inducing_q").template cast<Scalar>();
    const Mat ind_k = params.at("layer0.head0.inducing_k").template cast<Scalar>();
    (void)inducing;
    const Mat kmm = gram(ind_q, ind_q);
    const Mat kqm = gram(uq, ind_q);
    const Mat kmo = gram(ind_q, xo);
    const Mat kll = gram(ind_k, ind_k);
    const Mat kol = gram(xo, ind_k);
    const Mat klk = gram(ind_k, uk);
    const Mat a = kmm + (Scalar(1) / sigma2) * (kmo * kmo.transpose());
    const Mat b = kll + (Scalar(1) / sigma2) * (klk * klk.transpose());
    Mat t = b.llt().solve(klk * z);
    t = (Scalar(1) / sigma2) * (kol * t);
    t = a.llt().solve(kmo * t);
    result = (Scalar(1) / sigma2) * (kqm * t);
  }
  volatile Scalar sink = result.sum();
  (void)sink;
  const auto stop = Clock::now();
  return std::chrono::duration<double, std::micro>(stop - start).count();
}

}  // namespace

double time_attention_step(bool sparse, int n, int inducing, int repeats,
                           std::uint64_t seed, int token_dim, int head_dim) {
  const StepSetup setup =
      make_setup(sparse, n, inducing, seed, token_dim, head_dim);
  std::vector<double> times;
  one_step(setup, Rng::derive(seed, 999));  // warmup
  for (int r = 0; r < repeats; ++r)
    times.push_back(one_step(setup, Rng::derive(seed, r)).us);
  return median_of(times);
}

BenchTable bench(const std::vector<int>& n_values,
                 const std::vector<int>& inducing_values, int repeats,
                 std::uint64_t seed, int token_dim, int head_dim) {
  if (repeats < 5) throw ValueError("bench requires repeats >= 5");
  BenchTable table;
  for (int n : n_values) {
    {
      const StepSetup setup =
          make_setup(false, n, 0, seed, token_dim, head_dim);
      one_step(setup, Rng::derive(seed, 999));
      std::vector<double> times, times32;
      std::size_t bytes = 0;
      for (int r = 0; r < repeats; ++r) {
        const auto res = one_step(setup, Rng::derive(seed, r));
        times.push_back(res.us);
        bytes = std::max(bytes, res.tape_bytes);
        times32.push_back(forward32_once<float>(setup, false, 0));
      }
      table.cells.push_back({"exact", n, 0, median_of(times), iqr_of(times),
                             bytes, median_of(times32)});
    }
    for (int m : inducing_values) {
      const StepSetup setup = make_setup(true, n, m, seed, token_dim, head_dim);
      one_step(setup, Rng::derive(seed, 999));
      std::vector<double> times, times32;
      std::size_t bytes = 0;
      for (int r = 0; r < repeats; ++r) {
        const auto res = one_step(setup, Rng::derive(seed, r));
        times.push_back(res.us);
        bytes = std::max(bytes, res.tape_bytes);
        times32.push_back(forward32_once<float>(setup, true, m));
      }
      table.cells.push_back({"sparse", n, m, median_of(times), iqr_of(times),
                             bytes, median_of(times32)});
    }
  }
  return table;
}

std::string BenchTable::to_csv() const {
  std::ostringstream out;
  out << "impl,n,m,median_us,iqr_us,tape_bytes,fwd32_median_us\n";
  for (const auto& c : cells) {
    out << c.impl << "," << c.n << ",";
    if (c.inducing > 0) out << c.inducing;
    out << "," << c.median_us << "," << c.iqr_us << "," << c.tape_bytes << ","
        << c.fwd32_median_us << "\n";
  }
  return out.str();
}

}  // namespace cgpattn
