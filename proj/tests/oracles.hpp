#pragma once

// Independent double-loop oracles shared by the unit tests and the acceptance run.

#include "cmrhead/attention.hpp"
#include "cmrhead/circuits.hpp"
#include "cmrhead/lag_profile.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

using namespace cmrhead;

/// Matching score by explicit loop over (destination, source); targets are
/// recomputed from tokens.
inline double matching(const AttentionMatrix& p, const TokenSequence& seq) {
  double on = 0, total = 0;
  const std::size_t T = seq.size();
  for (std::size_t d = 0; d < T; ++d) {
    bool any = false;
    for (std::size_t s = 1; s < d; ++s) any |= seq[s - 1] == seq[d];
    if (!any) continue;
    for (std::size_t s = 0; s <= d; ++s) {
      const double v = p.values(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(s));
      total += v;
      if (s >= 1 && s < d && seq[s - 1] == seq[d]) on += v;
    }
  }
  return on / total;
}

struct LagStats {
  double mean = 0, variance = 0;
  std::size_t count = 0;
};

/// Scores s[N + pos, pos + lag] over the positions where both pos - |lag| and
/// pos + |lag| lie in the first repeat; population variance.
inline LagStats attention_lag(const AttentionMatrix& s, std::size_t N, int lag) {
  std::vector<double> xs;
  for (std::size_t pos = 1; pos <= N; ++pos) {
    const long p = static_cast<long>(pos);
    if (p <= std::abs(lag) || p > static_cast<long>(N) - std::abs(lag)) continue;
    xs.push_back(s.values(static_cast<Eigen::Index>(pos + N), p + lag));
  }
  LagStats st;
  st.count = xs.size();
  for (double x : xs) st.mean += x;
  st.mean /= static_cast<double>(xs.size());
  for (double x : xs) st.variance += (x - st.mean) * (x - st.mean);
  st.variance /= static_cast<double>(xs.size());
  return st;
}

/// Fit objective with the variance floor and lag count recomputed inline.
inline double objective(const std::vector<double>& q, const LagProfile& p) {
  double n = 0;
  for (auto c : p.count) n += c > 0 ? 1 : 0;
  double d = 0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    if (p.count[k] == 0) continue;
    const double var = std::max(p.variance[k], 1e-8 * std::max(1.0, p.mean[k] * p.mean[k]));
    d += (q[k] - p.mean[k]) * (q[k] - p.mean[k]) / (var * n);
  }
  return d;
}

/// Copying score of the full V x V circuit from its eigenvalues.
inline double full_copying(const Matrix& full) {
  Eigen::EigenSolver<Matrix> es(full, false);
  const auto ev = es.eigenvalues();
  double num = 0, den = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    num += ev[i].real();
    den += std::abs(ev[i]);
  }
  return num / den;
}

struct CmrComparison {
  double max_diff = 0.0;
  std::size_t steps = 0;
};

/// Study the items in `order`, cue recall, then recall `recalls`; compare the
/// model's distribution at every recall step with the recall equations.
inline CmrComparison compare_cmr(const CmrParams& params, std::size_t n, const std::vector<std::size_t>& order,
                          const std::vector<std::size_t>& recalls) {
  const CmrTokens tok{n};
  TokenSequence seq{{tok.bos()}};
  for (auto i : order) seq.tokens.push_back(tok.study(i));
  seq.tokens.push_back(tok.cue());
  for (auto r : recalls) seq.tokens.push_back(tok.recall(r));
  const auto model = build_cmr_attention(params, n, seq.size());
  const auto fr = forward(model, seq);

  std::vector<ItemEmbedding> items;
  for (auto i : order) items.emplace_back(i, n + 1);
  const auto enc = encode_list(items, params);
  std::vector<ItemEmbedding> all;
  for (std::size_t i = 0; i < n; ++i) all.emplace_back(i, n + 1);

  CmrComparison out;
  TemporalContext t = enc.state.context;
  const auto cue_pos = static_cast<Eigen::Index>(order.size() + 1);
  for (std::size_t k = 0; k <= recalls.size(); ++k) {
    if (k > 0) {
      const ItemEmbedding f(recalls[k - 1], n + 1);
      t = update_context(t, retrieval_input(f, enc.state, params.gamma_ft()), params.beta_rec());
    }
    const Vector want = recall_distribution(enc.state, t, params.inv_temp(), all);
    const Vector got = cmr_recall_probs(fr.logits, cue_pos + static_cast<Eigen::Index>(k), n);
    out.max_diff = std::max(out.max_diff, (want - got).cwiseAbs().maxCoeff());
    ++out.steps;
  }
  return out;
}

}  // namespace oracle
