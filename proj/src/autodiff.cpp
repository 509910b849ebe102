#include "cgpattn/autodiff.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <string>

#include "cgpattn/gp_core.hpp"

namespace cgpattn::ad {

namespace {

Matrix phi_lower(const Matrix& m) {
  Matrix out = m.triangularView<Eigen::Lower>();
  out.diagonal() *= 0.5;
  return out;
}

}  // namespace

int Tape::check(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw ValueError("invalid tape handle");
  return v.id;
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  if (!value.allFinite()) throw ValueError("tape leaf has non-finite entries");
  Node n;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::scalar(double v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return leaf(std::move(m), requires_grad);
}

double Tape::scalar_val(Var v) const {
  const Matrix& m = val(v);
  if (m.rows() != 1 || m.cols() != 1)
    throw DimensionError("scalar_val on a non 1x1 node");
  return m(0, 0);
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[check(v)];
  if (n.has_grad) return n.grad;
  return Matrix::Zero(n.value.rows(), n.value.cols());
}

Var Tape::make(Matrix value, bool needs_grad, std::function<void(Tape&)> fn) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::accum(int id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  const int r = check(root);
  if (ran_backward_) throw ValueError("backward may run once per tape");
  ran_backward_ = true;
  const Node& rn = nodes_[r];
  if (rn.value.rows() != 1 || rn.value.cols() != 1)
    throw DimensionError("backward root must be scalar");
  accum(r, Matrix::Ones(1, 1));
  for (int id = r; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(*this);
  }
}

std::size_t Tape::value_bytes() const {
  std::size_t bytes = 0;
  for (const auto& n : nodes_) {
    bytes += sizeof(double) * static_cast<std::size_t>(n.value.size());
    if (n.has_grad)
      bytes += sizeof(double) * static_cast<std::size_t>(n.grad.size());
  }
  return bytes;
}

Var Tape::add(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
    throw DimensionError("add: shape mismatch");
  const bool ng = wants(ia) || wants(ib);
  Var out = make(val(a) + val(b), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, ib, io](Tape& t) {
      t.accum(ia, t.nodes_[io].grad);
      t.accum(ib, t.nodes_[io].grad);
    };
  return out;
}

Var Tape::sub(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  const bool ng = wants(ia) || wants(ib);
  Var out = make(val(a) - val(b), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, ib, io](Tape& t) {
      t.accum(ia, t.nodes_[io].grad);
      t.accum(ib, -t.nodes_[io].grad);
    };
  return out;
}

Var Tape::scale(Var a, double c) {
  const int ia = check(a);
  const bool ng = wants(ia);
  Var out = make(c * val(a), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io, c](Tape& t) {
      t.accum(ia, c * t.nodes_[io].grad);
    };
  return out;
}

Var Tape::mul_scalar(Var a, Var s) {
  const int ia = check(a), is = check(s);
  const double sv = scalar_val(s);
  const bool ng = wants(ia) || wants(is);
  Var out = make(sv * val(a), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, is, io, sv](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      t.accum(ia, sv * g);
      Matrix gs(1, 1);
      gs(0, 0) = (g.array() * t.nodes_[ia].value.array()).sum();
      t.accum(is, gs);
    };
  return out;
}

Var Tape::add_diag(Var a, Var s) {
  const int ia = check(a), is = check(s);
  if (val(a).rows() != val(a).cols())
    throw DimensionError("add_diag needs a square matrix");
  Matrix v = val(a);
  v.diagonal().array() += scalar_val(s);
  const bool ng = wants(ia) || wants(is);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, is, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      t.accum(ia, g);
      Matrix gs(1, 1);
      gs(0, 0) = g.trace();
      t.accum(is, gs);
    };
  return out;
}

Var Tape::matmul(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  if (val(a).cols() != val(b).rows())
    throw DimensionError("matmul: inner dimension mismatch");
  const bool ng = wants(ia) || wants(ib);
  Var out = make(val(a) * val(b), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, ib, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      t.accum(ia, g * t.nodes_[ib].value.transpose());
      t.accum(ib, t.nodes_[ia].value.transpose() * g);
    };
  return out;
}

Var Tape::matmul_nt(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  if (val(a).cols() != val(b).cols())
    throw DimensionError("matmul_nt: inner dimension mismatch");
  const bool ng = wants(ia) || wants(ib);
  Var out = make(val(a) * val(b).transpose(), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, ib, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      t.accum(ia, g * t.nodes_[ib].value);
      t.accum(ib, g.transpose() * t.nodes_[ia].value);
    };
  return out;
}

Var Tape::transpose(Var a) {
  const int ia = check(a);
  const bool ng = wants(ia);
  Var out = make(val(a).transpose(), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io](Tape& t) {
      t.accum(ia, t.nodes_[io].grad.transpose());
    };
  return out;
}

Var Tape::hadamard(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
    throw DimensionError("hadamard: shape mismatch");
  const bool ng = wants(ia) || wants(ib);
  Var out = make(val(a).cwiseProduct(val(b)), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, ib, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      t.accum(ia, g.cwiseProduct(t.nodes_[ib].value));
      t.accum(ib, g.cwiseProduct(t.nodes_[ia].value));
    };
  return out;
}

Var Tape::exp_elem(Var a) {
  const int ia = check(a);
  const bool ng = wants(ia);
  Var out = make(val(a).array().exp().matrix(), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io](Tape& t) {
      t.accum(ia, t.nodes_[io].grad.cwiseProduct(t.nodes_[io].value));
    };
  return out;
}

Var Tape::sum(Var a) {
  const int ia = check(a);
  const bool ng = wants(ia);
  Matrix v(1, 1);
  v(0, 0) = val(a).sum();
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io](Tape& t) {
      const double g = t.nodes_[io].grad(0, 0);
      const Matrix& av = t.nodes_[ia].value;
      t.accum(ia, Matrix::Constant(av.rows(), av.cols(), g));
    };
  return out;
}

Var Tape::trace(Var a) {
  const int ia = check(a);
  if (val(a).rows() != val(a).cols())
    throw DimensionError("trace needs a square matrix");
  const bool ng = wants(ia);
  Matrix v(1, 1);
  v(0, 0) = val(a).trace();
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io](Tape& t) {
      const double g = t.nodes_[io].grad(0, 0);
      const Index n = t.nodes_[ia].value.rows();
      t.accum(ia, g * Matrix::Identity(n, n));
    };
  return out;
}

Var Tape::frob_inner(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
    throw DimensionError("frob_inner: shape mismatch");
  const bool ng = wants(ia) || wants(ib);
  Matrix v(1, 1);
  v(0, 0) = (val(a).array() * val(b).array()).sum();
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, ib, io](Tape& t) {
      const double g = t.nodes_[io].grad(0, 0);
      t.accum(ia, g * t.nodes_[ib].value);
      t.accum(ib, g * t.nodes_[ia].value);
    };
  return out;
}

Var Tape::sqdist(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  const Matrix& av = val(a);
  const Matrix& bv = val(b);
  if (av.cols() != bv.cols()) throw DimensionError("sqdist: column mismatch");
  Matrix d(av.rows(), bv.rows());
  for (Index i = 0; i < av.rows(); ++i)
    for (Index j = 0; j < bv.rows(); ++j) {
      double sq = 0.0;
      for (Index c = 0; c < av.cols(); ++c) {
        const double diff = av(i, c) - bv(j, c);
        sq += diff * diff;
      }
      d(i, j) = sq;
    }
  const bool ng = wants(ia) || wants(ib);
  Var out = make(std::move(d), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, ib, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      const Matrix& u = t.nodes_[ia].value;
      const Matrix& v = t.nodes_[ib].value;
      const Vector row_sums = g.rowwise().sum();
      const Vector col_sums = g.colwise().sum();
      t.accum(ia, 2.0 * (row_sums.asDiagonal() * u - g * v));
      t.accum(ib, 2.0 * (col_sums.asDiagonal() * v - g.transpose() * u));
    };
  return out;
}

Var Tape::col(Var a, Index j) {
  const int ia = check(a);
  if (j < 0 || j >= val(a).cols()) throw DimensionError("col out of range");
  const bool ng = wants(ia);
  Var out = make(val(a).col(j), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io, j](Tape& t) {
      const Matrix& av = t.nodes_[ia].value;
      Matrix g = Matrix::Zero(av.rows(), av.cols());
      g.col(j) = t.nodes_[io].grad;
      t.accum(ia, g);
    };
  return out;
}

Var Tape::middle_cols(Var a, Index start, Index count) {
  const int ia = check(a);
  if (start < 0 || count < 1 || start + count > val(a).cols())
    throw DimensionError("middle_cols out of range");
  const bool ng = wants(ia);
  Var out = make(val(a).middleCols(start, count), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io, start, count](Tape& t) {
      const Matrix& av = t.nodes_[ia].value;
      Matrix g = Matrix::Zero(av.rows(), av.cols());
      g.middleCols(start, count) = t.nodes_[io].grad;
      t.accum(ia, g);
    };
  return out;
}

Var Tape::top_rows(Var a, Index n) {
  const int ia = check(a);
  if (n < 1 || n > val(a).rows()) throw DimensionError("top_rows out of range");
  const bool ng = wants(ia);
  Var out = make(val(a).topRows(n), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io, n](Tape& t) {
      const Matrix& av = t.nodes_[ia].value;
      Matrix g = Matrix::Zero(av.rows(), av.cols());
      g.topRows(n) = t.nodes_[io].grad;
      t.accum(ia, g);
    };
  return out;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  std::vector<int> ids;
  Index rows = val(parts[0]).rows();
  Index cols = 0;
  bool ng = false;
  for (Var p : parts) {
    const int ip = check(p);
    if (val(p).rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += val(p).cols();
    ng = ng || wants(ip);
    ids.push_back(ip);
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (Var p : parts) {
    v.middleCols(at, val(p).cols()) = val(p);
    at += val(p).cols();
  }
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ids, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      Index at = 0;
      for (int id : ids) {
        const Index w = t.nodes_[id].value.cols();
        t.accum(id, g.middleCols(at, w));
        at += w;
      }
    };
  return out;
}

Var Tape::replicate_col(Var a, Index count) {
  const int ia = check(a);
  if (val(a).cols() != 1) throw DimensionError("replicate_col needs a column");
  const bool ng = wants(ia);
  Var out = make(val(a).replicate(1, count), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io](Tape& t) {
      t.accum(ia, t.nodes_[io].grad.rowwise().sum());
    };
  return out;
}

Var Tape::add_rowvec(Var a, Var row) {
  const int ia = check(a), ir = check(row);
  if (val(row).rows() != 1 || val(row).cols() != val(a).cols())
    throw DimensionError("add_rowvec: shape mismatch");
  const bool ng = wants(ia) || wants(ir);
  Matrix v = val(a);
  v.rowwise() += val(row).row(0);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, ir, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      t.accum(ia, g);
      t.accum(ir, g.colwise().sum());
    };
  return out;
}

Var Tape::row_softmax(Var a) {
  const int ia = check(a);
  const Matrix& av = val(a);
  Matrix v(av.rows(), av.cols());
  for (Index r = 0; r < av.rows(); ++r) {
    const double mx = av.row(r).maxCoeff();
    Eigen::ArrayXd e = (av.row(r).array() - mx).exp();
    v.row(r) = (e / e.sum()).matrix();
  }
  const bool ng = wants(ia);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ia, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      const Matrix& s = t.nodes_[io].value;
      Matrix dx(s.rows(), s.cols());
      for (Index r = 0; r < s.rows(); ++r) {
        const double dot = g.row(r).dot(s.row(r));
        dx.row(r) =
            (s.row(r).array() * (g.row(r).array() - dot)).matrix();
      }
      t.accum(ia, dx);
    };
  return out;
}

Var Tape::cross_entropy(Var logits, const std::vector<int>& labels) {
  const int il = check(logits);
  const Matrix& lv = val(logits);
  if (static_cast<Index>(labels.size()) != lv.rows())
    throw DimensionError("cross_entropy: one label per row required");
  for (int y : labels)
    if (y < 0 || y >= lv.cols())
      throw ValueError("cross_entropy: label out of range");
  double acc = 0.0;
  for (Index r = 0; r < lv.rows(); ++r) {
    const double mx = lv.row(r).maxCoeff();
    const double lse = mx + std::log((lv.row(r).array() - mx).exp().sum());
    acc += lse - lv(r, labels[static_cast<std::size_t>(r)]);
  }
  Matrix v(1, 1);
  v(0, 0) = acc / static_cast<double>(lv.rows());
  const bool ng = wants(il);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [il, io, labels](Tape& t) {
      const double g = t.nodes_[io].grad(0, 0);
      const Matrix& lv = t.nodes_[il].value;
      Matrix dx(lv.rows(), lv.cols());
      for (Index r = 0; r < lv.rows(); ++r) {
        const double mx = lv.row(r).maxCoeff();
        Eigen::ArrayXd e = (lv.row(r).array() - mx).exp();
        dx.row(r) = (e / e.sum()).matrix();
        dx(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
      }
      t.accum(il, (g / static_cast<double>(lv.rows())) * dx);
    };
  return out;
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const int ix = check(x), ig = check(gain), ib = check(bias);
  const Matrix& xv = val(x);
  const Index d = xv.cols();
  if (val(gain).rows() != 1 || val(gain).cols() != d || val(bias).rows() != 1 ||
      val(bias).cols() != d)
    throw DimensionError("layer_norm: gain/bias must be 1 x d");
  Matrix xhat(xv.rows(), d);
  Vector inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = ((xv.row(r).array() - mu) * inv_std(r)).matrix();
  }
  Matrix v = xhat.array().rowwise() * val(gain).row(0).array();
  v.rowwise() += val(bias).row(0);
  const bool ng = wants(ix) || wants(ig) || wants(ib);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng) {
    auto xhat_p = std::make_shared<Matrix>(std::move(xhat));
    auto istd_p = std::make_shared<Vector>(std::move(inv_std));
    nodes_[io].backward = [ix, ig, ib, io, xhat_p, istd_p](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      const Matrix& gamma = t.nodes_[ig].value;
      const Index d = g.cols();
      Matrix dx(g.rows(), d);
      for (Index r = 0; r < g.rows(); ++r) {
        const Eigen::ArrayXd dxhat =
            g.row(r).array() * gamma.row(0).array();
        const Eigen::ArrayXd xh = xhat_p->row(r).array();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * xh).mean();
        dx.row(r) = ((*istd_p)(r) * (dxhat - m1 - xh * m2)).matrix();
      }
      t.accum(ix, dx);
      t.accum(ig, (g.array() * xhat_p->array()).colwise().sum().matrix());
      t.accum(ib, g.colwise().sum());
    };
  }
  return out;
}

Var Tape::gelu(Var x) {
  const int ix = check(x);
  constexpr double c = 0.7978845608028653558798921198687;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  const Matrix& xv = val(x);
  Matrix v(xv.rows(), xv.cols());
  for (Index i = 0; i < xv.size(); ++i) {
    const double t = xv(i);
    v(i) = 0.5 * t * (1.0 + std::tanh(c * (t + a * t * t * t)));
  }
  const bool ng = wants(ix);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ix, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      const Matrix& xv = t.nodes_[ix].value;
      Matrix dx(xv.rows(), xv.cols());
      for (Index i = 0; i < xv.size(); ++i) {
        const double z = xv(i);
        const double u = c * (z + a * z * z * z);
        const double th = std::tanh(u);
        const double sech2 = 1.0 - th * th;
        dx(i) = g(i) * (0.5 * (1.0 + th) +
                        0.5 * z * sech2 * c * (1.0 + 3.0 * a * z * z));
      }
      t.accum(ix, dx);
    };
  return out;
}

Var Tape::mean_rows(Var x) {
  const int ix = check(x);
  const bool ng = wants(ix);
  Var out = make(val(x).colwise().mean(), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ix, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      const Index n = t.nodes_[ix].value.rows();
      t.accum(ix, g.replicate(n, 1) / static_cast<double>(n));
    };
  return out;
}

Var Tape::softplus(Var s) {
  const int is = check(s);
  const Matrix& sv = val(s);
  Matrix v(sv.rows(), sv.cols());
  for (Index i = 0; i < sv.size(); ++i) {
    const double x = sv(i);
    v(i) = x > 30.0 ? x : std::log1p(std::exp(x));
  }
  const bool ng = wants(is);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [is, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      const Matrix& sv = t.nodes_[is].value;
      Matrix dx(sv.rows(), sv.cols());
      for (Index i = 0; i < sv.size(); ++i)
        dx(i) = g(i) / (1.0 + std::exp(-sv(i)));
      t.accum(is, dx);
    };
  return out;
}

Var Tape::inv_scalar(Var s) {
  const int is = check(s);
  const double sv = scalar_val(s);
  if (sv == 0.0) throw ValueError("inv_scalar: division by zero");
  Matrix v(1, 1);
  v(0, 0) = 1.0 / sv;
  const bool ng = wants(is);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [is, io, sv](Tape& t) {
      Matrix gs(1, 1);
      gs(0, 0) = -t.nodes_[io].grad(0, 0) / (sv * sv);
      t.accum(is, gs);
    };
  return out;
}

Var Tape::psd_solve(Var k, Var sigma2, Var b) {
  const int ik = check(k), is = check(sigma2), ib = check(b);
  const double s2 = scalar_val(sigma2);
  Matrix s = val(k);
  if (s.rows() != s.cols()) throw DimensionError("psd_solve: square K needed");
  if (val(b).rows() != s.rows())
    throw DimensionError("psd_solve: right-hand side mismatch");
  s.diagonal().array() += s2;
  auto ctx = std::make_shared<PsdSolveContext>(
      PsdSolveContext::factorize(s, 0.0, /*check_symmetry=*/false));
  const bool ng = wants(ik) || wants(is) || wants(ib);
  Var out = make(ctx->solve(val(b)), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ik, is, ib, io, ctx](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      const Matrix gb = ctx->solve(g);
      t.accum(ib, gb);
      const Matrix gk = -gb * t.nodes_[io].value.transpose();
      t.accum(ik, gk);
      Matrix gs(1, 1);
      gs(0, 0) = gk.trace();
      t.accum(is, gs);
    };
  return out;
}

Var Tape::psd_solve(Var k, Var b) { return psd_solve(k, scalar(0.0), b); }

Var Tape::logdet_psd(Var k, Var sigma2) {
  const int ik = check(k), is = check(sigma2);
  Matrix s = val(k);
  if (s.rows() != s.cols()) throw DimensionError("logdet_psd: square K needed");
  s.diagonal().array() += scalar_val(sigma2);
  auto ctx = std::make_shared<PsdSolveContext>(
      PsdSolveContext::factorize(s, 0.0, /*check_symmetry=*/false));
  Matrix v(1, 1);
  v(0, 0) = ctx->log_det();
  const bool ng = wants(ik) || wants(is);
  Var out = make(std::move(v), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ik, is, io, ctx](Tape& t) {
      const double g = t.nodes_[io].grad(0, 0);
      const Index n = t.nodes_[ik].value.rows();
      const Matrix inv = ctx->solve(Matrix(Matrix::Identity(n, n)));
      t.accum(ik, g * inv);
      Matrix gs(1, 1);
      gs(0, 0) = g * inv.trace();
      t.accum(is, gs);
    };
  return out;
}

Var Tape::chol_lower(Var k) {
  const int ik = check(k);
  const auto ctx =
      PsdSolveContext::factorize(val(k), 0.0, /*check_symmetry=*/false);
  Matrix l = ctx.chol_lower();
  const bool ng = wants(ik);
  Var out = make(std::move(l), ng, nullptr);
  const int io = out.id;
  if (ng)
    nodes_[io].backward = [ik, io](Tape& t) {
      const Matrix& g = t.nodes_[io].grad;
      const Matrix& l = t.nodes_[io].value;
      const Matrix p = phi_lower(l.transpose() * g);
      // S = L^-T P L^-1 satisfies <S, dA> = <G, dL> for symmetric dA.
      const auto lt = l.triangularView<Eigen::Lower>();
      Matrix y = lt.transpose().solve(p);
      Matrix s = lt.transpose().solve(Matrix(y.transpose())).transpose();
      t.accum(ik, 0.5 * (s + s.transpose()));
    };
  return out;
}

}  // namespace cgpattn::ad
