#pragma once

#include "cmrhead/attention.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <span>

namespace cmrhead {

struct PromptSpec {
  std::size_t n_unique = 100;
  std::uint64_t seed = 0;
  /// Candidate token ids, best first.
  std::vector<std::int64_t> vocab_ranking;
  std::int64_t bos_token = 0;
};

/// Token ids ordered by descending unembedding bias; ties go to the smaller id.
inline std::vector<std::int64_t> rank_vocab_by_bias(std::span<const double> bias) {
  std::vector<std::int64_t> ids(bias.size());
  std::iota(ids.begin(), ids.end(), std::int64_t{0});
  std::stable_sort(ids.begin(), ids.end(), [&](std::int64_t a, std::int64_t b) {
    return bias[static_cast<std::size_t>(a)] > bias[static_cast<std::size_t>(b)];
  });
  return ids;
}

/// [BOS] + permutation of the top n_unique tokens + the same permutation.
inline TokenSequence gen_prompt(const PromptSpec& spec) {
  require(spec.n_unique >= 1, "n_unique must be positive");
  if (spec.vocab_ranking.size() < spec.n_unique)
    throw precondition_error("vocabulary ranking shorter than n_unique");
  std::vector<std::int64_t> perm(spec.vocab_ranking.begin(),
                                 spec.vocab_ranking.begin() +
                                     static_cast<std::ptrdiff_t>(spec.n_unique));
  std::mt19937_64 rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  TokenSequence seq;
  seq.tokens.reserve(2 * spec.n_unique + 1);
  seq.tokens.push_back(spec.bos_token);
  seq.tokens.insert(seq.tokens.end(), perm.begin(), perm.end());
  seq.tokens.insert(seq.tokens.end(), perm.begin(), perm.end());
  return seq;
}

}  // namespace cmrhead
