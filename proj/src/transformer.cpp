#include "cgpattn/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace cgpattn {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

double softplus_inverse(double y) { return std::log(std::expm1(y)); }

std::string layer_prefix(int layer) { return "layer" + std::to_string(layer); }

std::string head_prefix(int layer, int head) {
  return layer_prefix(layer) + ".head" + std::to_string(head);
}

struct HeadLeafIds {
  ad::Var wq, wk, wv, wlat, raw_sq, raw_sk, raw_noise, ind_q, ind_k;
};

}  // namespace

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::Softmax: return "softmax";
    case AttentionKind::KernelSym: return "kernel_sym";
    case AttentionKind::KernelAsym: return "kernel_asym";
    case AttentionKind::CgpExact: return "cgp_exact";
    case AttentionKind::CgpSparse: return "cgp_sparse";
  }
  return "unknown";
}

AttentionKind attention_kind_from_string(const std::string& name) {
  if (name == "softmax") return AttentionKind::Softmax;
  if (name == "kernel_sym") return AttentionKind::KernelSym;
  if (name == "kernel_asym") return AttentionKind::KernelAsym;
  if (name == "cgp_exact") return AttentionKind::CgpExact;
  if (name == "cgp_sparse") return AttentionKind::CgpSparse;
  throw ValueError("unknown attention kind: " + name);
}

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || token_dim < 1 || head_dim < 1 || classes < 2)
    throw ValueError("model config: positive sizes required");
  if (input_dim < 1 || max_positions < 1 || ffn_multiplier < 1)
    throw ValueError("model config: positive sizes required");
  if (attention == AttentionKind::CgpSparse && (inducing_q < 1 || inducing_k < 1))
    throw ValueError("model config: inducing sizes must be >= 1");
  if (!(init_noise >= 0.0)) throw ValueError("model config: init_noise < 0");
}

double TrainConfig::alpha_at(int epoch) const {
  if (alpha_fixed) return alpha_value;
  // The schedule spans the CGP training phase; warm epochs run at alpha = 0
  // and the ramp starts at the switch.
  const int first = std::min(warm_epochs, epochs - 1);
  const int last = epochs - 1;
  if (epoch <= first || last <= first) return alpha_start;
  const double t = static_cast<double>(epoch - first) /
                   static_cast<double>(last - first);
  return alpha_start + (alpha_end - alpha_start) * t;
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw ValueError("train config: sizes");
  if (!(lr_initial > 0.0) || !(lr_final > 0.0))
    throw ValueError("train config: learning rate must be positive");
  if (alpha_start < 0.0 || alpha_end < 0.0 || alpha_value < 0.0)
    throw ValueError("train config: alpha must be nonnegative");
  if (mc_samples < 1) throw ValueError("train config: mc_samples >= 1");
  if (warm_epochs < 0) throw ValueError("train config: warm_epochs >= 0");
}

Matrix& ParamStore::add(const std::string& name, Matrix init) {
  if (index_.count(name)) throw ValueError("duplicate parameter " + name);
  index_[name] = static_cast<int>(entries_.size());
  entries_.push_back({name, std::move(init)});
  return entries_.back().value;
}

bool ParamStore::has(const std::string& name) const {
  return index_.count(name) > 0;
}

Matrix& ParamStore::at(const std::string& name) {
  return entries_[static_cast<std::size_t>(index_of(name))].value;
}

const Matrix& ParamStore::at(const std::string& name) const {
  return entries_[static_cast<std::size_t>(index_of(name))].value;
}

int ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter " + name);
  return it->second;
}

Index ParamStore::total_count() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

Vector ParamStore::flatten() const {
  Vector flat(total_count());
  Index at = 0;
  for (const auto& e : entries_) {
    for (Index c = 0; c < e.value.cols(); ++c)
      for (Index r = 0; r < e.value.rows(); ++r) flat(at++) = e.value(r, c);
  }
  return flat;
}

void ParamStore::unflatten(const Vector& flat) {
  if (flat.size() != total_count())
    throw DimensionError("unflatten: size mismatch");
  Index at = 0;
  for (auto& e : entries_) {
    for (Index c = 0; c < e.value.cols(); ++c)
      for (Index r = 0; r < e.value.rows(); ++r) e.value(r, c) = flat(at++);
  }
}

TransformerModel::TransformerModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
}

void TransformerModel::init_params(std::uint64_t seed,
                                   const ExampleSet* token_samples) {
  params_ = ParamStore();
  Rng rng(Rng::derive(seed, 0));
  const double d_std = 1.0 / std::sqrt(static_cast<double>(cfg_.token_dim));
  const auto normal = [&rng](Index r, Index c, double std) {
    Matrix m(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) m(i, j) = std * rng.gaussian();
    return m;
  };

  params_.add("embed.weight",
              normal(cfg_.token_dim, cfg_.input_dim,
                     1.0 / std::sqrt(static_cast<double>(cfg_.input_dim))));
  params_.add("embed.pos", normal(cfg_.max_positions, cfg_.token_dim, 0.01));

  const bool cgp = cfg_.attention == AttentionKind::CgpExact ||
                   cfg_.attention == AttentionKind::CgpSparse;
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string lp = layer_prefix(l);
    params_.add(lp + ".ln1.gain", Matrix::Ones(1, cfg_.token_dim));
    params_.add(lp + ".ln1.bias", Matrix::Zero(1, cfg_.token_dim));
    for (int h = 0; h < cfg_.heads; ++h) {
      const std::string hp = head_prefix(l, h);
      if (cfg_.attention == AttentionKind::KernelSym) {
        params_.add(hp + ".w", normal(cfg_.head_dim, cfg_.token_dim, d_std));
      } else {
        params_.add(hp + ".wq", normal(cfg_.head_dim, cfg_.token_dim, d_std));
        params_.add(hp + ".wk", normal(cfg_.head_dim, cfg_.token_dim, d_std));
      }
      params_.add(hp + ".wv", normal(cfg_.head_dim, cfg_.token_dim, d_std));
      if (cgp) {
        params_.add(hp + ".wlat", normal(cfg_.head_dim, cfg_.token_dim, d_std));
        params_.add(hp + ".sigma_q",
                    Matrix::Constant(1, 1, softplus_inverse(1.0)));
        params_.add(hp + ".sigma_k",
                    Matrix::Constant(1, 1, softplus_inverse(1.0)));
        params_.add(hp + ".noise",
                    Matrix::Constant(1, 1, softplus_inverse(cfg_.init_noise)));
      }
      if (cfg_.attention == AttentionKind::CgpSparse) {
        const Matrix& wlat = params_.at(hp + ".wlat");
        const Matrix& emb = params_.at("embed.weight");
        const auto draw_inducing = [&](int count) {
          Matrix pts(count, cfg_.head_dim);
          for (int i = 0; i < count; ++i) {
            Vector token = Vector::Zero(cfg_.token_dim);
            bool from_sample = false;
            if (token_samples != nullptr && !token_samples->empty()) {
              const auto& ex = (*token_samples)[rng.below(token_samples->size())];
              if (ex.tokens.rows() > 0) {
                const Index row =
                    static_cast<Index>(rng.below(ex.tokens.rows()));
                if (cfg_.token_ids) {
                  const int id = static_cast<int>(ex.tokens(row, 0));
                  token = emb.col(id);
                } else {
                  token = emb * ex.tokens.row(row).transpose();
                }
                from_sample = true;
              }
            }
            Vector point = from_sample
                               ? Vector(wlat * token)
                               : Vector(rng.gaussian_vector(cfg_.head_dim));
            for (Index c = 0; c < cfg_.head_dim; ++c)
              pts(i, c) = point(c) + 0.01 * rng.gaussian();
          }
          return pts;
        };
        params_.add(hp + ".inducing_q", draw_inducing(cfg_.inducing_q));
        params_.add(hp + ".inducing_k", draw_inducing(cfg_.inducing_k));
      }
    }
    params_.add(lp + ".wo",
                normal(cfg_.token_dim, cfg_.mhsa_width(),
                       1.0 / std::sqrt(static_cast<double>(cfg_.mhsa_width()))));
    params_.add(lp + ".ln2.gain", Matrix::Ones(1, cfg_.token_dim));
    params_.add(lp + ".ln2.bias", Matrix::Zero(1, cfg_.token_dim));
    const Index ffn = Index(cfg_.ffn_multiplier) * cfg_.token_dim;
    params_.add(lp + ".ffn.w1", normal(ffn, cfg_.token_dim, d_std));
    params_.add(lp + ".ffn.b1", Matrix::Zero(1, ffn));
    params_.add(lp + ".ffn.w2",
                normal(cfg_.token_dim, ffn,
                       1.0 / std::sqrt(static_cast<double>(ffn))));
    params_.add(lp + ".ffn.b2", Matrix::Zero(1, cfg_.token_dim));
  }
  params_.add("head.weight", normal(cfg_.classes, cfg_.token_dim, d_std));
  params_.add("head.bias", Matrix::Zero(1, cfg_.classes));
}

std::vector<ad::Var> TransformerModel::make_leaves(ad::Tape& tape,
                                                   bool requires_grad) const {
  std::vector<ad::Var> leaves;
  leaves.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i)
    leaves.push_back(tape.leaf(params_.entry(i).value, requires_grad));
  return leaves;
}

Matrix TransformerModel::one_hot_tokens(const Matrix& ids) const {
  Matrix out = Matrix::Zero(ids.rows(), cfg_.input_dim);
  for (Index r = 0; r < ids.rows(); ++r) {
    const int id = static_cast<int>(ids(r, 0));
    if (id < 0 || id >= cfg_.input_dim)
      throw ValueError("token id out of vocabulary range");
    out(r, id) = 1.0;
  }
  return out;
}

namespace {

struct GraphContext {
  ad::Tape& t;
  const ModelConfig& cfg;
  const ParamStore& params;
  const std::vector<ad::Var>& leaves;

  ad::Var leaf(const std::string& name) const {
    return leaves[static_cast<std::size_t>(params.index_of(name))];
  }
};

// Canonical-SE Gram of projected rows, optionally scaled by a scalar node.
ad::Var gram_node(ad::Tape& t, ad::Var rows_a, ad::Var rows_b, ad::Var scale) {
  ad::Var k = t.exp_elem(t.scale(t.sqdist(rows_a, rows_b), -0.5));
  if (scale.valid()) k = t.mul_scalar(k, scale);
  return k;
}

std::pair<ad::Var, ad::Var> cgp_exact_head(const GraphContext& g, ad::Var x,
                                           const std::string& hp,
                                           std::uint64_t mc_seed,
                                           int mc_samples,
                                           bool skip_regularizer) {
  ad::Tape& t = g.t;
  const Index n = t.val(x).rows();
  const ad::Var wq = g.leaf(hp + ".wq");
  const ad::Var wk = g.leaf(hp + ".wk");
  const ad::Var wv = g.leaf(hp + ".wv");
  const ad::Var wlat = g.leaf(hp + ".wlat");
  const ad::Var sig_q = t.softplus(g.leaf(hp + ".sigma_q"));
  const ad::Var sig_k = t.softplus(g.leaf(hp + ".sigma_k"));
  const ad::Var sig = t.softplus(g.leaf(hp + ".noise"));
  const ad::Var sigma2 = t.mul_scalar(sig, sig);

  const ad::Var u_q = t.matmul_nt(x, wq);
  const ad::Var u_k = t.matmul_nt(x, wk);
  const ad::Var x_o = t.matmul_nt(x, wlat);

  const ad::Var k_o = gram_node(t, x_o, x_o, ad::Var{});
  const ad::Var k_q = gram_node(t, u_q, u_q, t.mul_scalar(sig_q, sig_q));
  const ad::Var k_k = gram_node(t, u_k, u_k, t.mul_scalar(sig_k, sig_k));
  const ad::Var k_qo = gram_node(t, u_q, x_o, sig_q);
  const ad::Var k_ok = gram_node(t, x_o, u_k, sig_k);
  const ad::Var k_ko = t.transpose(k_ok);
  const ad::Var k_oq = t.transpose(k_qo);

  const ad::Var z = t.matmul(t.add_diag(k_k, sigma2), t.matmul_nt(x, wv));

  Matrix mc_draws;
  if (!skip_regularizer) {
    // Same draw layout as sample_mvn: one row of standard normals per sample.
    Rng rng(mc_seed);
    mc_draws = rng.gaussian_matrix(mc_samples, n).transpose();
  }
  const ad::Var rhs = t.concat_cols({k_ok, k_oq});
  ad::Var solved = t.psd_solve(k_o, sigma2, rhs);
  const ad::Var solved_ok = t.middle_cols(solved, 0, n);
  const ad::Var solved_oq = t.middle_cols(solved, n, n);

  const ad::Var left = t.matmul(k_qo, solved_ok);
  const ad::Var v_plus = t.matmul(left, t.psd_solve(k_k, sigma2, z));

  if (skip_regularizer) return {v_plus, t.scalar(0.0)};

  const Index s = t.val(v_plus).cols();
  const ad::Var sigma_big_q = t.sub(k_q, t.matmul(k_qo, solved_oq));
  const ad::Var sigma_big_k = t.sub(k_k, t.matmul(k_ko, solved_ok));

  const ad::Var chol_o = t.chol_lower(k_o);
  const ad::Var z_o = t.matmul(chol_o, t.constant(mc_draws));  // n x N
  const ad::Var solved_zo = t.psd_solve(k_o, sigma2, z_o);
  const ad::Var m_q = t.matmul(k_qo, solved_zo);
  const ad::Var m_k = t.matmul(k_ko, solved_zo);

  std::vector<ad::Var> res_q_parts, res_k_parts;
  for (Index a = 0; a < s; ++a) {
    res_q_parts.push_back(
        t.sub(t.replicate_col(t.col(v_plus, a), mc_samples), m_q));
    res_k_parts.push_back(
        t.sub(t.replicate_col(t.col(z, a), mc_samples), m_k));
  }
  const ad::Var res_q = t.concat_cols(res_q_parts);
  const ad::Var res_k = t.concat_cols(res_k_parts);
  const ad::Var quad_q = t.frob_inner(res_q, t.psd_solve(sigma_big_q, res_q));
  const ad::Var quad_k = t.frob_inner(res_k, t.psd_solve(sigma_big_k, res_k));

  const ad::Var zero = t.scalar(0.0);
  const ad::Var logdet_q = t.logdet_psd(sigma_big_q, zero);
  const ad::Var logdet_k = t.logdet_psd(sigma_big_k, zero);

  const double half_over_n = 0.5 / static_cast<double>(mc_samples);
  ad::Var u = t.add(t.scale(quad_q, half_over_n), t.scale(quad_k, half_over_n));
  u = t.add(u, t.scale(logdet_q, 0.5 * static_cast<double>(s)));
  u = t.add(u, t.scale(logdet_k, 0.5 * static_cast<double>(s)));
  u = t.add(u, t.scalar(static_cast<double>(s) * static_cast<double>(n) *
                        kLogTwoPi));
  return {v_plus, u};
}

std::pair<ad::Var, ad::Var> cgp_sparse_head(const GraphContext& g, ad::Var x,
                                            const std::string& hp,
                                            bool skip_regularizer) {
  ad::Tape& t = g.t;
  const Index n = t.val(x).rows();
  const ad::Var wq = g.leaf(hp + ".wq");
  const ad::Var wk = g.leaf(hp + ".wk");
  const ad::Var wv = g.leaf(hp + ".wv");
  const ad::Var wlat = g.leaf(hp + ".wlat");
  const ad::Var ind_q = g.leaf(hp + ".inducing_q");
  const ad::Var ind_k = g.leaf(hp + ".inducing_k");
  const ad::Var sig_q = t.softplus(g.leaf(hp + ".sigma_q"));
  const ad::Var sig_k = t.softplus(g.leaf(hp + ".sigma_k"));
  const ad::Var sig = t.softplus(g.leaf(hp + ".noise"));
  const ad::Var sigma2 = t.mul_scalar(sig, sig);
  const ad::Var inv_s2 = t.inv_scalar(sigma2);

  const ad::Var u_q = t.matmul_nt(x, wq);
  const ad::Var u_k = t.matmul_nt(x, wk);
  const ad::Var x_o = t.matmul_nt(x, wlat);

  const ad::Var k_oo = gram_node(t, x_o, x_o, ad::Var{});
  const ad::Var k_mm = gram_node(t, ind_q, ind_q, ad::Var{});
  const ad::Var k_qm = gram_node(t, u_q, ind_q, sig_q);
  const ad::Var k_mo = gram_node(t, ind_q, x_o, ad::Var{});
  const ad::Var k_ll = gram_node(t, ind_k, ind_k, ad::Var{});
  const ad::Var k_ol = gram_node(t, x_o, ind_k, ad::Var{});
  const ad::Var k_lk = gram_node(t, ind_k, u_k, sig_k);

  const ad::Var a_mat =
      t.add(k_mm, t.mul_scalar(t.matmul_nt(k_mo, k_mo), inv_s2));
  const ad::Var b_mat =
      t.add(k_ll, t.mul_scalar(t.matmul_nt(k_lk, k_lk), inv_s2));

  const ad::Var z = t.matmul_nt(x, wv);
  ad::Var stage = t.psd_solve(b_mat, t.matmul(k_lk, z));
  stage = t.mul_scalar(t.matmul(k_ol, stage), inv_s2);
  stage = t.psd_solve(a_mat, t.matmul(k_mo, stage));
  const ad::Var v_plus = t.mul_scalar(t.matmul(k_qm, stage), inv_s2);

  if (skip_regularizer) return {v_plus, t.scalar(0.0)};

  const Index s = t.val(v_plus).cols();
  const ad::Var k_lo = t.transpose(k_ol);
  const ad::Var b_o =
      t.add(k_ll, t.mul_scalar(t.matmul_nt(k_lo, k_lo), inv_s2));

  // Trace terms reassociated into kappa x kappa products so the step stays
  // O(kappa n^2).
  const ad::Var k_mq = t.transpose(k_qm);
  const ad::Var m1 = t.psd_solve(a_mat, k_mq);  // A^-1 K_mq
  const ad::Var w_q = t.matmul(t.matmul(k_mo, k_oo), t.transpose(k_mo));
  const ad::Var trace_q1 = t.frob_inner(t.matmul_nt(m1, m1), w_q);
  const ad::Var trace_q2 = t.frob_inner(k_qm, t.transpose(m1));
  const ad::Var n1 = t.psd_solve(b_o, k_lk);  // B_o^-1 K_lk
  const ad::Var w_k = t.matmul(t.matmul(k_lo, k_oo), k_ol);
  const ad::Var trace_k1 = t.frob_inner(t.matmul_nt(n1, n1), w_k);
  const ad::Var trace_k2 = t.frob_inner(k_lk, n1);

  const ad::Var inv_s4 = t.mul_scalar(inv_s2, inv_s2);
  const ad::Var quad_v = t.frob_inner(v_plus, v_plus);
  const ad::Var quad_z = t.frob_inner(z, z);
  ad::Var bracket = t.add(quad_v, quad_z);
  bracket = t.add(bracket, t.scale(t.mul_scalar(t.add(trace_q1, trace_k1),
                                                inv_s4),
                                   static_cast<double>(s)));
  bracket = t.add(bracket,
                  t.scale(t.add(trace_q2, trace_k2), static_cast<double>(s)));
  ad::Var u = t.scale(t.mul_scalar(bracket, inv_s2), 0.5);
  u = t.add(u, t.scalar(2.0 * static_cast<double>(s) *
                        static_cast<double>(n) * kLogTwoPi));
  u = t.add(u, t.scale(t.inv_scalar(sig), static_cast<double>(s)));
  return {v_plus, u};
}

ad::Var softmax_head(const GraphContext& g, ad::Var x, ad::Var wq, ad::Var wk,
                     ad::Var wv) {
  ad::Tape& t = g.t;
  const ad::Var q = t.matmul_nt(x, wq);
  const ad::Var k = t.matmul_nt(x, wk);
  const ad::Var v = t.matmul_nt(x, wv);
  const double inv_sqrt_d =
      1.0 / std::sqrt(static_cast<double>(g.cfg.token_dim));
  const ad::Var attn = t.row_softmax(t.scale(t.matmul_nt(q, k), inv_sqrt_d));
  return t.matmul(attn, v);
}

ad::Var kernel_head(const GraphContext& g, ad::Var x, ad::Var wq, ad::Var wk,
                    ad::Var wv) {
  ad::Tape& t = g.t;
  const ad::Var u_q = t.matmul_nt(x, wq);
  const ad::Var u_k = t.matmul_nt(x, wk);
  const double ls2 = g.cfg.baseline_lengthscale * g.cfg.baseline_lengthscale;
  ad::Var gram;
  if (g.cfg.baseline_kernel == KernelFamily::ExpDot) {
    gram = t.exp_elem(t.scale(t.matmul_nt(u_q, u_k), 1.0 / ls2));
  } else {
    gram = t.exp_elem(t.scale(t.sqdist(u_q, u_k), -0.5 / ls2));
  }
  if (g.cfg.baseline_output_variance != 1.0)
    gram = t.scale(gram, g.cfg.baseline_output_variance);
  return t.matmul(gram, t.matmul_nt(x, wv));
}

}  // namespace

TransformerModel::GraphOutput TransformerModel::build_graph(
    ad::Tape& tape, const std::vector<ad::Var>& leaves, const Matrix& tokens,
    std::uint64_t mc_seed, int mc_samples, bool warm_path,
    bool skip_regularizer) const {
  if (params_.size() == 0) throw ValueError("model parameters not initialized");
  const GraphContext g{tape, cfg_, params_, leaves};
  const Matrix raw = cfg_.token_ids ? one_hot_tokens(tokens) : tokens;
  if (raw.cols() != cfg_.input_dim)
    throw DimensionError("token width does not match model input_dim");
  const Index n = raw.rows();
  if (n > cfg_.max_positions)
    throw DimensionError("sequence longer than max_positions");

  ad::Var x = tape.matmul_nt(tape.constant(raw), g.leaf("embed.weight"));
  x = tape.add(x, tape.top_rows(g.leaf("embed.pos"), n));

  GraphOutput out;
  ad::Var u_total = tape.scalar(0.0);
  const bool cgp = cfg_.attention == AttentionKind::CgpExact ||
                   cfg_.attention == AttentionKind::CgpSparse;

  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string lp = layer_prefix(l);
    const ad::Var ln1 = tape.layer_norm(x, g.leaf(lp + ".ln1.gain"),
                                        g.leaf(lp + ".ln1.bias"));
    std::vector<ad::Var> head_outs;
    for (int h = 0; h < cfg_.heads; ++h) {
      const std::string hp = head_prefix(l, h);
      ad::Var head_out;
      switch (cfg_.attention) {
        case AttentionKind::Softmax:
          head_out = softmax_head(g, ln1, g.leaf(hp + ".wq"),
                                  g.leaf(hp + ".wk"), g.leaf(hp + ".wv"));
          break;
        case AttentionKind::KernelSym:
          head_out = kernel_head(g, ln1, g.leaf(hp + ".w"), g.leaf(hp + ".w"),
                                 g.leaf(hp + ".wv"));
          break;
        case AttentionKind::KernelAsym:
          head_out = kernel_head(g, ln1, g.leaf(hp + ".wq"),
                                 g.leaf(hp + ".wk"), g.leaf(hp + ".wv"));
          break;
        case AttentionKind::CgpExact:
        case AttentionKind::CgpSparse: {
          if (warm_path) {
            head_out = kernel_head(g, ln1, g.leaf(hp + ".wq"),
                                   g.leaf(hp + ".wk"), g.leaf(hp + ".wv"));
            break;
          }
          std::pair<ad::Var, ad::Var> res;
          if (cfg_.attention == AttentionKind::CgpExact) {
            const std::uint64_t head_seed = Rng::derive(
                mc_seed, static_cast<std::uint64_t>(l * cfg_.heads + h));
            res = cgp_exact_head(g, ln1, hp, head_seed, mc_samples,
                                 skip_regularizer);
          } else {
            res = cgp_sparse_head(g, ln1, hp, skip_regularizer);
          }
          head_out = res.first;
          u_total = tape.add(u_total, res.second);
          break;
        }
      }
      head_outs.push_back(head_out);
    }
    const ad::Var cat = tape.concat_cols(head_outs);
    x = tape.add(x, tape.matmul_nt(cat, g.leaf(lp + ".wo")));
    const ad::Var ln2 = tape.layer_norm(x, g.leaf(lp + ".ln2.gain"),
                                        g.leaf(lp + ".ln2.bias"));
    ad::Var ffn = tape.add_rowvec(tape.matmul_nt(ln2, g.leaf(lp + ".ffn.w1")),
                                  g.leaf(lp + ".ffn.b1"));
    ffn = tape.gelu(ffn);
    ffn = tape.add_rowvec(tape.matmul_nt(ffn, g.leaf(lp + ".ffn.w2")),
                          g.leaf(lp + ".ffn.b2"));
    x = tape.add(x, ffn);
    out.layer_tokens.push_back(tape.val(x));
  }

  const ad::Var pooled = tape.mean_rows(x);
  out.logits = tape.add_rowvec(tape.matmul_nt(pooled, g.leaf("head.weight")),
                               g.leaf("head.bias"));
  out.uncertainty = cgp && !warm_path ? u_total : tape.scalar(0.0);
  return out;
}

TransformerModel::ExampleOutput TransformerModel::forward_value(
    const Matrix& tokens, std::uint64_t mc_seed, int mc_samples,
    bool warm_path) const {
  ad::Tape tape;
  const auto leaves = make_leaves(tape, false);
  const auto g = build_graph(tape, leaves, tokens, mc_seed, mc_samples,
                             warm_path, /*skip_regularizer=*/false);
  ExampleOutput out;
  out.logits = tape.val(g.logits).row(0);
  out.uncertainty = tape.scalar_val(g.uncertainty);
  out.layer_tokens = g.layer_tokens;
  return out;
}

BatchForward model_forward(const TransformerModel& model,
                           const ExampleSet& batch, bool eval_mode,
                           std::uint64_t mc_seed, int mc_samples) {
  (void)eval_mode;  // both modes are deterministic given the seed
  BatchForward out;
  out.logits.resize(static_cast<Index>(batch.size()), model.config().classes);
  double u_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto res = model.forward_value(
        batch[i].tokens, Rng::derive(mc_seed, i), mc_samples);
    out.logits.row(static_cast<Index>(i)) = res.logits;
    u_sum += res.uncertainty;
    out.layer_tokens.push_back(res.layer_tokens);
  }
  out.u_total = batch.empty() ? 0.0 : u_sum / static_cast<double>(batch.size());
  return out;
}

Matrix softmax_attention(const Matrix& x, const Matrix& w_q, const Matrix& w_k,
                         const Matrix& w_v) {
  if (x.cols() != w_q.cols() || w_q.rows() != w_k.rows() ||
      w_k.cols() != x.cols() || w_v.cols() != x.cols())
    throw DimensionError("softmax_attention: shape mismatch");
  const Matrix q = x * w_q.transpose();
  const Matrix k = x * w_k.transpose();
  const Matrix v = x * w_v.transpose();
  Matrix logits = q * k.transpose() / std::sqrt(static_cast<double>(x.cols()));
  for (Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    Eigen::ArrayXd e = (logits.row(r).array() - mx).exp();
    logits.row(r) = (e / e.sum()).matrix();
  }
  return logits * v;
}

Matrix kernel_attention_gram(const Matrix& x, const KernelKind& kind,
                             const Matrix& w_q, const Matrix& w_k) {
  const Matrix u_q = x * w_q.transpose();
  const Matrix u_k = x * w_k.transpose();
  Matrix gram(u_q.rows(), u_k.rows());
  for (Index i = 0; i < u_q.rows(); ++i)
    for (Index j = 0; j < u_k.rows(); ++j)
      gram(i, j) = eval_baseline(u_q.row(i).transpose(),
                                 u_k.row(j).transpose(), kind);
  return gram;
}

Matrix kernel_attention(const Matrix& x, const KernelKind& kind,
                        const Matrix& w_q, const Matrix& w_k,
                        const Matrix& w_v) {
  return kernel_attention_gram(x, kind, w_q, w_k) * (x * w_v.transpose());
}

Matrix mhsa(const std::vector<Matrix>& head_outputs, const Matrix& w_o) {
  if (head_outputs.empty()) throw DimensionError("mhsa: no heads");
  Index cols = 0;
  for (const auto& h : head_outputs) {
    if (h.rows() != head_outputs[0].rows())
      throw DimensionError("mhsa: head row mismatch");
    cols += h.cols();
  }
  if (w_o.cols() != cols) throw DimensionError("mhsa: W_o width mismatch");
  Matrix cat(head_outputs[0].rows(), cols);
  Index at = 0;
  for (const auto& h : head_outputs) {
    cat.middleCols(at, h.cols()) = h;
    at += h.cols();
  }
  return cat * w_o.transpose();
}

LossBreakdown total_loss(const Matrix& logits, const std::vector<int>& labels,
                         double u_total, double alpha) {
  if (alpha < 0.0) throw ValueError("alpha must be nonnegative");
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw DimensionError("total_loss: one label per row required");
  double acc = 0.0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols())
      throw ValueError("total_loss: label out of range");
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    acc += lse - logits(r, y);
  }
  LossBreakdown out;
  out.task = acc / static_cast<double>(logits.rows());
  out.alpha = alpha;
  out.regularizer = u_total;
  out.total = out.task + alpha * u_total;
  return out;
}

int argmax_lowest(const Eigen::RowVectorXd& row) {
  int best = 0;
  for (Index c = 1; c < row.size(); ++c)
    if (row(c) > row(best)) best = static_cast<int>(c);
  return best;
}

double accuracy(const TransformerModel& model, const ExampleSet& data,
                std::uint64_t mc_seed, int mc_samples) {
  if (data.empty()) return 0.0;
  int correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto res = model.forward_value(data[i].tokens,
                                         Rng::derive(mc_seed, i), mc_samples);
    if (argmax_lowest(res.logits) == data[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

struct ExampleGrad {
  Vector grad;
  double task{0.0};
  double reg{0.0};
};

ExampleGrad example_step(const TransformerModel& model, const Example& ex,
                         double alpha, std::uint64_t mc_seed, int mc_samples,
                         bool warm_path, bool skip_regularizer) {
  ad::Tape tape;
  const auto leaves = model.make_leaves(tape, true);
  const auto g = model.build_graph(tape, leaves, ex.tokens, mc_seed,
                                   mc_samples, warm_path, skip_regularizer);
  const ad::Var ce = tape.cross_entropy(g.logits, {ex.label});
  const ad::Var loss = tape.add(ce, tape.scale(g.uncertainty, alpha));
  ExampleGrad out;
  out.task = tape.scalar_val(ce);
  out.reg = tape.scalar_val(g.uncertainty);
  tape.backward(loss);
  const ParamStore& params = model.params();
  out.grad.resize(params.total_count());
  Index at = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix g_i = tape.grad(leaves[i]);
    for (Index c = 0; c < g_i.cols(); ++c)
      for (Index r = 0; r < g_i.rows(); ++r) out.grad(at++) = g_i(r, c);
  }
  return out;
}

}  // namespace

TrainResult train(TransformerModel& model, const TrainConfig& cfg,
                  const ExampleSet& train_set, const ExampleSet& val_set) {
  cfg.validate();
  if (train_set.empty()) throw ValueError("train: empty dataset");

  Rng shuffle_rng(Rng::derive(cfg.seed, 1));
  const std::uint64_t mc_root = Rng::derive(cfg.seed, 2);
  const std::uint64_t eval_seed = Rng::derive(cfg.seed, 3);

  ParamStore& params = model.params();
  const Index p_count = params.total_count();
  Vector adam_m = Vector::Zero(p_count);
  Vector adam_v = Vector::Zero(p_count);
  long adam_t = 0;

  const long steps_per_epoch =
      (static_cast<long>(train_set.size()) + cfg.batch_size - 1) /
      cfg.batch_size;
  const long total_steps = steps_per_epoch * cfg.epochs;

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const int threads = cfg.threads > 0 ? cfg.threads : worker_thread_count();
  long global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool warm = epoch < cfg.warm_epochs;
    const double alpha = warm ? 0.0 : cfg.alpha_at(epoch);
    // Fisher-Yates on the stable index array.
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = shuffle_rng.below(i);
      std::swap(order[i - 1], order[j]);
    }

    double epoch_task = 0.0;
    double epoch_reg = 0.0;
    long epoch_examples = 0;
    double lr_last = cfg.lr_initial;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const long batch_n = static_cast<long>(stop - start);
      const double lr =
          total_steps <= 1
              ? cfg.lr_initial
              : cfg.lr_initial + (cfg.lr_final - cfg.lr_initial) *
                                     (static_cast<double>(global_step) /
                                      static_cast<double>(total_steps - 1));
      lr_last = lr;

      std::vector<ExampleGrad> grads(static_cast<std::size_t>(batch_n));
      const auto run_range = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
          const std::size_t idx = order[start + b];
          const std::uint64_t ex_seed = Rng::derive(
              mc_root, (static_cast<std::uint64_t>(epoch) << 32) |
                           static_cast<std::uint64_t>(idx));
          grads[b] = example_step(model, train_set[idx], alpha, ex_seed,
                                  cfg.mc_samples, warm,
                                  cfg.skip_regularizer || warm);
        }
      };
      if (threads <= 1 || batch_n <= 1) {
        run_range(0, static_cast<std::size_t>(batch_n));
      } else {
        std::vector<std::thread> pool;
        const std::size_t chunk =
            (static_cast<std::size_t>(batch_n) + threads - 1) /
            static_cast<std::size_t>(threads);
        for (int w = 0; w < threads; ++w) {
          const std::size_t lo = std::min<std::size_t>(
              static_cast<std::size_t>(w) * chunk, batch_n);
          const std::size_t hi =
              std::min<std::size_t>(lo + chunk, batch_n);
          if (lo < hi) pool.emplace_back(run_range, lo, hi);
        }
        for (auto& th : pool) th.join();
      }

      // Fixed-order reduction over batch elements.
      Vector grad = Vector::Zero(p_count);
      double batch_task = 0.0;
      double batch_reg = 0.0;
      for (const auto& eg : grads) {
        grad += eg.grad;
        batch_task += eg.task;
        batch_reg += eg.reg;
      }
      grad /= static_cast<double>(batch_n);
      batch_task /= static_cast<double>(batch_n);
      batch_reg /= static_cast<double>(batch_n);
      if (!std::isfinite(batch_task + alpha * batch_reg) || !grad.allFinite())
        throw TrainingDiverged("non-finite loss at step " +
                                   std::to_string(global_step),
                               global_step);

      ++adam_t;
      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, adam_t);
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, adam_t);
      Vector flat = params.flatten();
      for (Index i = 0; i < p_count; ++i) {
        adam_m(i) = cfg.adam_beta1 * adam_m(i) + (1.0 - cfg.adam_beta1) * grad(i);
        adam_v(i) =
            cfg.adam_beta2 * adam_v(i) + (1.0 - cfg.adam_beta2) * grad(i) * grad(i);
        flat(i) -= lr * (adam_m(i) / bc1) /
                   (std::sqrt(adam_v(i) / bc2) + cfg.adam_eps);
      }
      params.unflatten(flat);

      epoch_task += batch_task * static_cast<double>(batch_n);
      epoch_reg += batch_reg * static_cast<double>(batch_n);
      epoch_examples += batch_n;
      ++global_step;
    }

    EpochStats stats;
    stats.task_loss = epoch_task / static_cast<double>(epoch_examples);
    stats.regularizer = epoch_reg / static_cast<double>(epoch_examples);
    stats.alpha = alpha;
    stats.lr = lr_last;
    stats.val_accuracy =
        val_set.empty() ? 0.0 : accuracy(model, val_set, eval_seed, cfg.mc_samples);
    result.history.push_back(stats);
  }
  return result;
}

LossFunctional make_objective(const TransformerModel& model,
                              const ExampleSet& batch, double alpha,
                              std::uint64_t mc_seed, int mc_samples) {
  const ModelConfig cfg = model.config();
  return [cfg, batch, alpha, mc_seed, mc_samples](const ParamStore& params,
                                                  Vector* grad_out) {
    TransformerModel probe(cfg);
    probe.params() = params;
    double loss = 0.0;
    if (grad_out != nullptr) grad_out->setZero(params.total_count());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::uint64_t ex_seed = Rng::derive(mc_seed, i);
      if (grad_out == nullptr) {
        const auto res =
            probe.forward_value(batch[i].tokens, ex_seed, mc_samples);
        const LossBreakdown lb = total_loss(Matrix(res.logits),
                                            {batch[i].label}, res.uncertainty,
                                            alpha);
        loss += lb.total;
      } else {
        const auto eg = example_step(probe, batch[i], alpha, ex_seed,
                                     mc_samples, false, false);
        loss += eg.task + alpha * eg.reg;
        *grad_out += eg.grad;
      }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    if (grad_out != nullptr) *grad_out *= inv;
    return loss * inv;
  };
}

GradCheckReport gradcheck(const ParamStore& params, const LossFunctional& f,
                          int probe_count, double eps, std::uint64_t seed) {
  if (!(eps >= 1e-6 && eps <= 1e-3))
    throw ValueError("gradcheck: eps must lie in [1e-6, 1e-3]");
  if (probe_count < 1) throw ValueError("gradcheck: probe_count >= 1");

  Vector analytic;
  f(params, &analytic);
  if (!analytic.allFinite()) {
    Index bad = 0;
    for (Index i = 0; i < analytic.size(); ++i)
      if (!std::isfinite(analytic(i))) {
        bad = i;
        break;
      }
    Index at = 0;
    for (std::size_t e = 0; e < params.size(); ++e) {
      const Index sz = params.entry(e).value.size();
      if (bad < at + sz)
        throw ValueError("non-finite gradient in parameter " +
                         params.entry(e).name);
      at += sz;
    }
    throw ValueError("non-finite gradient");
  }

  const Index total = params.total_count();
  Rng rng(seed);
  GradCheckReport report;
  report.probes = probe_count;

  // Map a flat coordinate back to its parameter entry.
  std::vector<Index> offsets(params.size() + 1, 0);
  for (std::size_t e = 0; e < params.size(); ++e)
    offsets[e + 1] = offsets[e] + params.entry(e).value.size();

  for (int p = 0; p < probe_count; ++p) {
    const Index coord = static_cast<Index>(rng.below(total));
    ParamStore probe = params;
    Vector flat = probe.flatten();

    flat(coord) += eps;
    probe.unflatten(flat);
    const double up = f(probe, nullptr);
    flat(coord) -= 2.0 * eps;
    probe.unflatten(flat);
    const double down = f(probe, nullptr);
    flat(coord) += eps;

    const double fd = (up - down) / (2.0 * eps);
    const double ga = analytic(coord);
    const double rel =
        std::abs(ga - fd) / std::max(1e-8, std::abs(ga) + std::abs(fd));
    report.max_rel_error = std::max(report.max_rel_error, rel);

    std::size_t entry = 0;
    while (entry + 1 < offsets.size() && offsets[entry + 1] <= coord) ++entry;
    if (params.entry(entry).name.find("inducing") != std::string::npos &&
        ga == 0.0)
      report.all_inducing_nonzero = false;
  }
  return report;
}

}  // namespace cgpattn
