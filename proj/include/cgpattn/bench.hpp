#pragma once

#include <string>
#include <vector>

#include "cgpattn/common.hpp"

namespace cgpattn {

struct BenchCell {
  std::string impl;  // "exact" or "sparse"
  int n{0};
  int inducing{0};  // 0 for exact
  double median_us{0.0};
  double iqr_us{0.0};
  std::size_t tape_bytes{0};
  double fwd32_median_us{0.0};  // single-precision forward-only reference
};

struct BenchTable {
  std::vector<BenchCell> cells;
  std::string to_csv() const;
};

/// Times a single attention-block step (forward + backward of the attention
/// output plus its uncertainty term) for the exact and sparse paths.
/// `repeats` must be >= 5; medians and interquartile ranges are reported.
BenchTable bench(const std::vector<int>& n_values,
                 const std::vector<int>& inducing_values, int repeats,
                 std::uint64_t seed = 7, int token_dim = 32, int head_dim = 8);

/// Median wall time (microseconds) of one forward+backward attention step.
double time_attention_step(bool sparse, int n, int inducing, int repeats,
                           std::uint64_t seed, int token_dim, int head_dim);

}  // namespace cgpattn
