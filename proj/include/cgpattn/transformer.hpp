#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cgpattn/autodiff.hpp"
#include "cgpattn/scgp_attention.hpp"

namespace cgpattn {

enum class AttentionKind { Softmax, KernelSym, KernelAsym, CgpExact, CgpSparse };

std::string to_string(AttentionKind kind);
AttentionKind attention_kind_from_string(const std::string& name);

struct ModelConfig {
  int layers{2};
  int heads{2};
  int token_dim{32};  // d
  int head_dim{8};    // s
  int classes{4};
  AttentionKind attention{AttentionKind::CgpExact};
  KernelFamily baseline_kernel{KernelFamily::ArdRbf};
  double baseline_output_variance{1.0};
  double baseline_lengthscale{1.0};
  int input_dim{4};       // patch width for images, vocab size for token ids
  bool token_ids{false};  // inputs are symbol ids rather than raw vectors
  int max_positions{16};
  int ffn_multiplier{2};
  int inducing_q{16};  // m
  int inducing_k{16};  // l
  double init_noise{0.1};

  Index mhsa_width() const { return Index(heads) * Index(head_dim); }
  void validate() const;
};

/// Named learnable tensors with a lossless flat-vector view. Entry order is
/// the model build order and is deterministic for a given config.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix value;
  };

  Matrix& add(const std::string& name, Matrix init);
  bool has(const std::string& name) const;
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  int index_of(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  Entry& entry(std::size_t i) { return entries_[i]; }

  Index total_count() const;
  Vector flatten() const;
  void unflatten(const Vector& flat);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

struct Example {
  Matrix tokens;  // n x input_dim, or n x 1 of symbol ids
  int label{0};
};
using ExampleSet = std::vector<Example>;

struct TrainConfig {
  int epochs{50};
  int batch_size{32};
  double lr_initial{5e-3};
  double lr_final{1e-4};
  double adam_beta1{0.9};
  double adam_beta2{0.999};
  double adam_eps{1e-8};
  double alpha_start{0.0};
  double alpha_end{1.0};
  bool alpha_fixed{false};
  double alpha_value{0.0};
  int warm_epochs{0};  // kernel-attention warm start before the CGP objective
  std::uint64_t seed{0};
  int mc_samples{8};
  bool skip_regularizer{false};
  int threads{0};  // 0: take CGP_ATTN_THREADS; results are thread-invariant

  double alpha_at(int epoch) const;
  void validate() const;
};

/// Thrown when a training step produces a non-finite loss.
struct TrainingDiverged : std::runtime_error {
  long step;
  TrainingDiverged(const std::string& what, long step_index)
      : std::runtime_error(what), step(step_index) {}
};

class TransformerModel {
 public:
  explicit TransformerModel(ModelConfig cfg);

  /// Random initialization. For CgpSparse, inducing points are seeded from a
  /// random subset of `token_samples` projected through each head's latent
  /// map (plus 0.01-scale jitter); without samples they fall back to
  /// standard-normal canonical points.
  void init_params(std::uint64_t seed,
                   const ExampleSet* token_samples = nullptr);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  struct GraphOutput {
    ad::Var logits;        // 1 x C
    ad::Var uncertainty;   // 1 x 1
    std::vector<Matrix> layer_tokens;
  };

  /// Registers every parameter as a tape leaf, in store order.
  std::vector<ad::Var> make_leaves(ad::Tape& tape, bool requires_grad) const;

  /// Builds the forward graph of one example. `warm_path` switches CGP heads
  /// to plain asymmetric kernel attention (the warm-start objective).
  GraphOutput build_graph(ad::Tape& tape, const std::vector<ad::Var>& leaves,
                          const Matrix& tokens, std::uint64_t mc_seed,
                          int mc_samples, bool warm_path,
                          bool skip_regularizer) const;

  struct ExampleOutput {
    Eigen::RowVectorXd logits;
    double uncertainty{0.0};
    std::vector<Matrix> layer_tokens;
  };

  /// Gradient-free forward of one example (eval path; fixed MC seed).
  ExampleOutput forward_value(const Matrix& tokens, std::uint64_t mc_seed,
                              int mc_samples, bool warm_path = false) const;

  Matrix one_hot_tokens(const Matrix& ids) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

/// Batched forward: logits per example, uncertainty averaged over the batch,
/// and per-example per-layer token matrices for the oversmoothing probe.
struct BatchForward {
  Matrix logits;  // B x C
  double u_total{0.0};
  std::vector<std::vector<Matrix>> layer_tokens;  // [example][layer]
};
BatchForward model_forward(const TransformerModel& model,
                           const ExampleSet& batch, bool eval_mode,
                           std::uint64_t mc_seed, int mc_samples);

/// Row-softmax attention: softmax(Q K^T / sqrt(d)) X W_v^T.
Matrix softmax_attention(const Matrix& x, const Matrix& w_q, const Matrix& w_k,
                         const Matrix& w_v);

/// Kernel attention without row normalization: the Gram of the baseline
/// kernel on projected features times X W_v^T.
Matrix kernel_attention(const Matrix& x, const KernelKind& kind,
                        const Matrix& w_q, const Matrix& w_k,
                        const Matrix& w_v);

/// Baseline-kernel Gram on projected features (the attention operator of
/// kernel_attention).
Matrix kernel_attention_gram(const Matrix& x, const KernelKind& kind,
                             const Matrix& w_q, const Matrix& w_k);

/// Concatenates per-head outputs left-to-right and applies W_o^T.
Matrix mhsa(const std::vector<Matrix>& head_outputs, const Matrix& w_o);

struct LossBreakdown {
  double task{0.0};
  double regularizer{0.0};
  double total{0.0};
  double alpha{0.0};
};
LossBreakdown total_loss(const Matrix& logits, const std::vector<int>& labels,
                         double u_total, double alpha);

struct EpochStats {
  double task_loss{0.0};
  double regularizer{0.0};
  double alpha{0.0};
  double lr{0.0};
  double val_accuracy{0.0};
};

struct TrainResult {
  std::vector<EpochStats> history;
};

TrainResult train(TransformerModel& model, const TrainConfig& cfg,
                  const ExampleSet& train_set, const ExampleSet& val_set);

/// Classification accuracy with lowest-index tie breaking.
double accuracy(const TransformerModel& model, const ExampleSet& data,
                std::uint64_t mc_seed, int mc_samples);

int argmax_lowest(const Eigen::RowVectorXd& row);

/// Loss functional for gradient checking: evaluates the objective at the
/// given parameters and optionally fills the analytic flat gradient.
using LossFunctional =
    std::function<double(const ParamStore&, Vector* grad_out)>;

/// Builds the full training objective (task + alpha * regularizer) of a fixed
/// batch with frozen MC seeds.
LossFunctional make_objective(const TransformerModel& model,
                              const ExampleSet& batch, double alpha,
                              std::uint64_t mc_seed, int mc_samples);

struct GradCheckReport {
  double max_rel_error{0.0};
  int probes{0};
  bool all_inducing_nonzero{true};
};

/// Central finite differences against the analytic gradient on randomly
/// probed coordinates. Requires eps in [1e-6, 1e-3].
GradCheckReport gradcheck(const ParamStore& params, const LossFunctional& f,
                          int probe_count, double eps, std::uint64_t seed);

}  // namespace cgpattn
