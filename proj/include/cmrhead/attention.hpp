#pragma once

// Per-head behavioural metrics: induction matching score, copying score and
// the lag profile of attention scores on a repeated prompt.

#include "cmrhead/common.hpp"
#include "cmrhead/lag_profile.hpp"

#include <Eigen/Eigenvalues>

#include <cstdint>
#include <vector>

namespace cmrhead {

struct TokenSequence {
  std::vector<std::int64_t> tokens;

  std::size_t size() const { return tokens.size(); }
  std::int64_t operator[](std::size_t i) const { return tokens[i]; }
};

enum class AttentionKind { scores, pattern };

/// Causal destination x source matrix. Cells with source > destination are
/// masked and never read.
struct AttentionMatrix {
  Matrix values;
  AttentionKind kind = AttentionKind::pattern;
  int layer = 0;
  int head = 0;

  Eigen::Index size() const { return values.rows(); }
};

/// Checks shape and, for patterns, that causal rows are nonnegative and sum to 1.
inline void validate(const AttentionMatrix& a, double tol = 1e-6) {
  require(a.values.rows() == a.values.cols(), "attention matrix must be square");
  for (Eigen::Index d = 0; d < a.size(); ++d) {
    double row = 0.0;
    for (Eigen::Index s = 0; s <= d; ++s) {
      const double v = a.values(d, s);
      require(std::isfinite(v), "non-finite attention value in causal region");
      if (a.kind == AttentionKind::pattern) {
        require(v >= -tol, "negative attention probability");
        row += v;
      }
    }
    if (a.kind == AttentionKind::pattern)
      require(std::abs(row - 1.0) <= tol, "attention pattern row does not sum to 1");
  }
}

/// Reduced copy circuit W_V W_E W_U W_O (d_head x d_head); it shares the nonzero
/// spectrum of the vocab x vocab circuit W_U W_O W_V W_E.
struct CopyKernel {
  Matrix matrix;
  int layer = 0;
  int head = 0;
};

/// 0/1 prefix-matching target: 1 where x_{s-1} == x_d and s < d.
inline AttentionMatrix target_pattern(const TokenSequence& seq) {
  const auto n = static_cast<Eigen::Index>(seq.size());
  AttentionMatrix t{Matrix::Zero(n, n), AttentionKind::pattern, 0, 0};
  for (Eigen::Index d = 0; d < n; ++d)
    for (Eigen::Index s = 1; s < d; ++s)
      if (seq.tokens[static_cast<std::size_t>(s - 1)] == seq.tokens[static_cast<std::size_t>(d)])
        t.values(d, s) = 1.0;
  return t;
}

/// Fraction of attention mass on prefix-matching cells.
///
/// Sums run over destination rows that contain at least one target cell; rows
/// where no earlier occurrence exists cannot express prefix matching.
inline double matching_score(const AttentionMatrix& pattern, const AttentionMatrix& target) {
  require(pattern.kind == AttentionKind::pattern, "matching_score needs a post-softmax pattern");
  require(pattern.values.rows() == target.values.rows() &&
              pattern.values.cols() == target.values.cols(),
          "pattern and target shapes differ");
  double on_target = 0.0;
  double total = 0.0;
  for (Eigen::Index d = 0; d < pattern.size(); ++d) {
    bool has_target = false;
    for (Eigen::Index s = 0; s <= d; ++s) has_target |= target.values(d, s) != 0.0;
    if (!has_target) continue;
    for (Eigen::Index s = 0; s <= d; ++s) {
      total += pattern.values(d, s);
      on_target += pattern.values(d, s) * target.values(d, s);
    }
  }
  if (!(total > 0.0)) throw precondition_error("matching_score: zero total attention");
  return on_target / total;
}

/// sum(lambda) / sum(|lambda|) over the kernel eigenvalues. The numerator is
/// the trace: imaginary parts of conjugate pairs cancel. All-zero spectrum
/// gives 0.
inline double copying_score(const CopyKernel& kernel) {
  const Matrix& W = kernel.matrix;
  require(W.rows() == W.cols() && W.size() > 0, "copy kernel must be square and nonempty");
  require(W.allFinite(), "copy kernel has non-finite entries");
  Eigen::EigenSolver<Matrix> es(W, /*computeEigenvectors=*/false);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigen decomposition failed");
  const double denom = es.eigenvalues().cwiseAbs().sum();
  if (denom == 0.0) return 0.0;
  return W.trace() / denom;
}

/// Mean pre-softmax score by lag between the second and first repeat of a
/// prompt [BOS, x_1..x_N, x_1..x_N]:
/// alpha_lag = mean over |lag| < s <= N - |lag| of score[s + N, s + lag].
/// variance is the population variance of the summed terms.
inline LagProfile attention_crp(const AttentionMatrix& scores, std::size_t n_repeat,
                                int lag_range = 5) {
  require(scores.kind == AttentionKind::scores, "attention_crp needs pre-softmax scores");
  require(lag_range >= 0, "lag_range must be nonnegative");
  const auto N = static_cast<long>(n_repeat);
  if (N <= 2L * lag_range)
    throw precondition_error("attention_crp: N must exceed 2 * lag_range");
  require(scores.size() >= 2 * N + 1, "score matrix shorter than 2N + 1");

  LagProfile prof(lag_range);
  for (int lag = -lag_range; lag <= lag_range; ++lag) {
    const long a = std::abs(lag);
    double sum = 0.0, sumsq = 0.0;
    for (long s = a + 1; s <= N - a; ++s) {
      const double v = scores.values(s + N, s + lag);
      sum += v;
      sumsq += v * v;
    }
    const auto cnt = static_cast<double>(N - 2 * a);
    const double mean = sum / cnt;
    prof.mean[prof.index(lag)] = mean;
    prof.variance[prof.index(lag)] = std::max(0.0, sumsq / cnt - mean * mean);
    prof.count[prof.index(lag)] = static_cast<std::size_t>(N - 2 * a);
  }
  return prof;
}

}  // namespace cmrhead
