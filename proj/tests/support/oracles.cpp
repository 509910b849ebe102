#include "support/oracles.hpp"

#include <cmath>
#include <stdexcept>

namespace oracle {

Matrix gj_inverse(Matrix a) {
  const Index n = a.rows();
  if (a.cols() != n) throw std::invalid_argument("gj_inverse: square only");
  Matrix inv = Matrix::Identity(n, n);
  for (Index col = 0; col < n; ++col) {
    Index pivot = col;
    for (Index r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    if (a(pivot, col) == 0.0) throw std::runtime_error("gj_inverse: singular");
    if (pivot != col) {
      a.row(pivot).swap(a.row(col));
      inv.row(pivot).swap(inv.row(col));
    }
    const double scale = a(col, col);
    a.row(col) /= scale;
    inv.row(col) /= scale;
    for (Index r = 0; r < n; ++r) {
      if (r == col) continue;
      const double factor = a(r, col);
      if (factor == 0.0) continue;
      a.row(r) -= factor * a.row(col);
      inv.row(r) -= factor * inv.row(col);
    }
  }
  return inv;
}

Matrix naive_cholesky(Matrix a, double jitter) {
  const Index n = a.rows();
  a.diagonal().array() += jitter;
  Matrix l = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j <= i; ++j) {
      double acc = a(i, j);
      for (Index k = 0; k < j; ++k) acc -= l(i, k) * l(j, k);
      if (i == j) {
        if (acc <= 0.0)
          throw std::runtime_error("naive_cholesky: not positive definite");
        l(i, i) = std::sqrt(acc);
      } else {
        l(i, j) = acc / l(j, j);
      }
    }
  }
  return l;
}

double gaussian_logpdf(const Vector& x, const Vector& mean, const Matrix& cov,
                       double jitter) {
  const Index n = x.size();
  const Matrix l = naive_cholesky(cov, jitter);
  // Forward substitution for L y = (x - mean).
  Vector y = x - mean;
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < i; ++k) y(i) -= l(i, k) * y(k);
    y(i) /= l(i, i);
  }
  double logdet = 0.0;
  for (Index i = 0; i < n; ++i) logdet += std::log(l(i, i));
  constexpr double kLogTwoPi = 1.8378770664093454835606594728112;
  return -0.5 * y.squaredNorm() - logdet - 0.5 * static_cast<double>(n) * kLogTwoPi;
}

Vector gaussian_draw(const Vector& mean, const Matrix& chol, Rng& rng) {
  Vector u(mean.size());
  for (Index i = 0; i < u.size(); ++i) u(i) = rng.gaussian();
  return mean + chol * u;
}

MeanSe mean_se(const std::vector<double>& xs) {
  MeanSe out;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) out.mean += x;
  out.mean /= n;
  double var = 0.0;
  for (double x : xs) var += (x - out.mean) * (x - out.mean);
  var /= (n - 1.0);
  out.se = std::sqrt(var / n);
  return out;
}

LogMeanExp log_mean_exp(const std::vector<double>& log_values) {
  double mx = log_values[0];
  for (double v : log_values) mx = std::max(mx, v);
  const double n = static_cast<double>(log_values.size());
  double sum = 0.0;
  for (double v : log_values) sum += std::exp(v - mx);
  const double mean_w = sum / n;
  double var_w = 0.0;
  for (double v : log_values) {
    const double w = std::exp(v - mx);
    var_w += (w - mean_w) * (w - mean_w);
  }
  var_w /= (n - 1.0);
  LogMeanExp out;
  out.value = mx + std::log(mean_w);
  out.se = std::sqrt(var_w / n) / mean_w;
  return out;
}

MatrixAccumulator::MatrixAccumulator(Index rows, Index cols, int batches)
    : batches_(batches),
      sum_(Matrix::Zero(rows, cols)),
      batch_sums_(static_cast<std::size_t>(batches), Matrix::Zero(rows, cols)),
      batch_counts_(static_cast<std::size_t>(batches), 0) {}

void MatrixAccumulator::push(const Matrix& sample) {
  sum_ += sample;
  const std::size_t b = static_cast<std::size_t>(count_ % batches_);
  batch_sums_[b] += sample;
  batch_counts_[b] += 1;
  ++count_;
}

Matrix MatrixAccumulator::mean() const {
  return sum_ / static_cast<double>(count_);
}

Matrix MatrixAccumulator::se() const {
  const Matrix overall = mean();
  Matrix var = Matrix::Zero(overall.rows(), overall.cols());
  for (std::size_t b = 0; b < batch_sums_.size(); ++b) {
    const Matrix bm = batch_sums_[b] / static_cast<double>(batch_counts_[b]);
    var += (bm - overall).cwiseProduct(bm - overall);
  }
  var /= static_cast<double>(batches_ - 1);
  // Standard error of the overall mean from the spread of batch means.
  return (var / static_cast<double>(batches_)).cwiseSqrt();
}

double canon_kernel(const Vector& a, const Vector& b) {
  double sq = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = a(i) - b(i);
    sq += d * d;
  }
  return std::exp(-0.5 * sq);
}

Matrix canon_gram(const Matrix& rows_a, const Matrix& rows_b) {
  Matrix out(rows_a.rows(), rows_b.rows());
  for (Index i = 0; i < rows_a.rows(); ++i)
    for (Index j = 0; j < rows_b.rows(); ++j)
      out(i, j) = canon_kernel(rows_a.row(i).transpose(),
                               rows_b.row(j).transpose());
  return out;
}

}  // namespace oracle
