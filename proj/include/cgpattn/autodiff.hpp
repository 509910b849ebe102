#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cgpattn/common.hpp"

namespace cgpattn::ad {

/// Handle into a Tape. Scalars are 1x1 matrices.
struct Var {
  int id{-1};
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over dense matrices. A tape is built per forward pass;
/// backward() walks the nodes in reverse creation order. All ops are
/// deterministic; gradients accumulate in creation order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad);
  Var constant(Matrix value) { return leaf(std::move(value), false); }
  Var scalar(double v, bool requires_grad = false);

  const Matrix& val(Var v) const { return nodes_[check(v)].value; }
  double scalar_val(Var v) const;
  /// Gradient of the last backward() root w.r.t. `v`; zero matrix when the
  /// node was not reached.
  Matrix grad(Var v) const;

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var mul_scalar(Var a, Var s);
  Var add_diag(Var a, Var s);
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var transpose(Var a);
  Var hadamard(Var a, Var b);
  Var exp_elem(Var a);
  Var sum(Var a);
  Var trace(Var a);
  Var frob_inner(Var a, Var b);
  Var sqdist(Var a, Var b);
  Var col(Var a, Index j);
  Var middle_cols(Var a, Index start, Index count);
  Var top_rows(Var a, Index n);
  Var concat_cols(const std::vector<Var>& parts);
  Var replicate_col(Var a, Index count);
  Var add_rowvec(Var a, Var row);
  Var row_softmax(Var a);
  Var cross_entropy(Var logits, const std::vector<int>& labels);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var gelu(Var x);
  Var mean_rows(Var x);
  Var softplus(Var s);
  Var inv_scalar(Var s);
  /// X with (K + sigma2*I + jitter*I) X = B; sigma2 is a scalar node.
  Var psd_solve(Var k, Var sigma2, Var b);
  Var psd_solve(Var k, Var b);  // sigma2 = 0
  Var logdet_psd(Var k, Var sigma2);
  Var chol_lower(Var k);

  /// Seeds `root` (must be 1x1) with 1 and propagates. May be called once per
  /// tape.
  void backward(Var root);

  Index node_count() const { return static_cast<Index>(nodes_.size()); }
  /// Bytes held in node values and gradients; the benchmark's memory metric.
  std::size_t value_bytes() const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad{false};
    bool needs_grad{false};
    std::function<void(Tape&)> backward;
  };

  int check(Var v) const;
  Var make(Matrix value, bool needs_grad, std::function<void(Tape&)> fn);
  void accum(int id, const Matrix& g);
  bool wants(int id) const { return nodes_[id].needs_grad; }

  std::vector<Node> nodes_;
  bool ran_backward_{false};
};

}  // namespace cgpattn::ad
