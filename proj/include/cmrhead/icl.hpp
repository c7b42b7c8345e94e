#pragma once

// In-context learning score: loss of a late token minus loss of an early one.

#include "cmrhead/parallel.hpp"
#include "cmrhead/toy_model.hpp"

#include <algorithm>
#include <numeric>

namespace cmrhead {

struct IclReport {
  std::size_t early = 0;
  std::size_t late = 0;
  std::vector<double> loss_early;
  std::vector<double> loss_late;
  /// Index into the input list of every sequence that was scored.
  std::vector<std::size_t> used;
  std::size_t skipped = 0;

  std::vector<double> differences() const {
    std::vector<double> d(loss_late.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = loss_late[i] - loss_early[i];
    return d;
  }
  double score() const {
    const auto d = differences();
    if (d.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  }
  /// Standard error of the mean difference (sample standard deviation).
  double sem() const {
    const auto d = differences();
    if (d.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const double m = score();
    double ss = 0.0;
    for (double x : d) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(d.size() - 1) / static_cast<double>(d.size()));
  }
};

/// Cross-entropy of token `index`, predicted from the logits one position earlier.
inline double token_loss(const Matrix& logits, const TokenSequence& seq, std::size_t index) {
  require(index >= 1 && index < seq.size(), "token_loss index out of range");
  const Eigen::RowVectorXd row = logits.row(static_cast<Eigen::Index>(index - 1));
  const double m = row.maxCoeff();
  const double lse = m + std::log((row.array() - m).exp().sum());
  return lse - row(seq[index]);
}

/// (loss at early, loss at late) for one sequence, or nullopt if it is too short.
inline std::optional<std::pair<double, double>> sequence_icl(const ToyModel& model,
                                                            const TokenSequence& seq,
                                                            std::size_t early, std::size_t late) {
  if (seq.size() <= late) return std::nullopt;
  const auto fr = forward(model, seq);
  return std::pair{token_loss(fr.logits, seq, early), token_loss(fr.logits, seq, late)};
}

/// Scores each sequence with the model returned by model_for(i). Sequences too
/// short for `late` are skipped and counted.
template <class ModelFor>
IclReport icl_score_with(ModelFor&& model_for, std::span<const TokenSequence> seqs,
                         std::size_t early, std::size_t late, std::size_t workers = 1) {
  require(early >= 1 && early < late, "need 1 <= early < late");
  std::vector<std::optional<std::pair<double, double>>> res(seqs.size());
  parallel_for(seqs.size(), workers,
               [&](std::size_t i) { res[i] = sequence_icl(model_for(i), seqs[i], early, late); });
  IclReport rep;
  rep.early = early;
  rep.late = late;
  for (std::size_t i = 0; i < res.size(); ++i) {
    if (!res[i]) {
      ++rep.skipped;
      continue;
    }
    rep.loss_early.push_back(res[i]->first);
    rep.loss_late.push_back(res[i]->second);
    rep.used.push_back(i);
  }
  return rep;
}

inline IclReport icl_score(const ToyModel& model, std::span<const TokenSequence> seqs,
                           std::size_t early, std::size_t late, std::size_t workers = 1) {
  return icl_score_with([&](std::size_t) -> const ToyModel& { return model; }, seqs, early, late,
                        workers);
}

struct SignTest {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t ties = 0;
  double p_value = 1.0;
};

/// Exact two-sided sign test on paired differences b - a; ties are dropped.
inline SignTest sign_test(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "sign test needs paired samples");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] > a[i]) ++t.positive;
    else if (b[i] < a[i]) ++t.negative;
    else ++t.ties;
  }
  const std::size_t n = t.positive + t.negative;
  if (n == 0) return t;
  const std::size_t k = std::min(t.positive, t.negative);
  const double nd = static_cast<double>(n);
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    const double id = static_cast<double>(i);
    tail += std::exp(std::lgamma(nd + 1) - std::lgamma(id + 1) - std::lgamma(nd - id + 1) -
                     nd * std::log(2.0));
  }
  t.p_value = std::min(1.0, 2.0 * tail);
  return t;
}

/// [BOS] followed by a random set of `period` distinct tokens from 1..vocab-1,
/// repeated until `length`. Sequence i depends only on (seed, i).
inline std::vector<TokenSequence> repeated_sequences(std::size_t n_seqs, std::size_t length,
                                                     std::size_t period, std::size_t vocab,
                                                     std::uint64_t seed, std::int64_t bos = 0) {
  require(period >= 1 && period < vocab, "period must be in [1, vocab - 1]");
  require(length >= 2, "sequences need at least two tokens");
  std::vector<std::int64_t> pool;
  for (std::int64_t t = 0; t < static_cast<std::int64_t>(vocab); ++t)
    if (t != bos) pool.push_back(t);
  std::vector<TokenSequence> out(n_seqs);
  for (std::size_t i = 0; i < n_seqs; ++i) {
    std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(ss);
    auto p = pool;
    std::shuffle(p.begin(), p.end(), rng);
    out[i].tokens.push_back(bos);
    for (std::size_t k = 0; out[i].size() < length; ++k) out[i].tokens.push_back(p[k % period]);
  }
  return out;
}

}  // namespace cmrhead
