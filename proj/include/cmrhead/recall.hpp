#pragma once

// Sampled multi-step free recall and the availability-corrected lag-CRP.

#include "cmrhead/cmr.hpp"

#include <cstdint>
#include <random>

namespace cmrhead {

/// One sampled recall sequence. Positions are 1-based study positions.
struct RecallTrace {
  std::vector<std::size_t> recalled_positions;
  /// Filled only when RecallOptions::record_distributions is set; entry k is
  /// the distribution the k-th recall was sampled from (over items 1..N).
  std::vector<Vector> step_distributions;
  /// True when the last entry of recalled_positions repeats an earlier one.
  bool ended_on_repeat = false;
  std::uint64_t seed = 0;
};

enum class RecallCue {
  start_of_list,  ///< first recall cued by the initial context t_0
  end_of_list,    ///< first recall cued by the final study context t_N
};

struct RecallOptions {
  /// 0 means list_len.
  std::size_t max_recalls = 0;
  bool stop_on_repeat = true;
  RecallCue cue = RecallCue::start_of_list;
  /// Force the first recall. Its retrieval update then starts from the study
  /// context t_{i-1}, the same conditioning used by analytic_crp.
  std::optional<std::size_t> first_recall;
  bool record_distributions = false;
};

/// Samples `n_trials` recall sequences. Deterministic given `seed`.
inline std::vector<RecallTrace> simulate_recall(const CmrParams& params, std::size_t list_len,
                                                std::size_t n_trials, std::uint64_t seed,
                                                const RecallOptions& opts = {}) {
  require(n_trials >= 1, "n_trials must be at least 1");
  require(list_len >= 1, "list_len must be at least 1");
  if (opts.first_recall)
    require(*opts.first_recall >= 1 && *opts.first_recall <= list_len,
            "first_recall outside the study list");

  const auto items = make_study_list(list_len);
  const auto enc = encode_list(items, params);
  const std::size_t max_recalls = opts.max_recalls == 0 ? list_len : opts.max_recalls;
  const TemporalContext cue =
      opts.cue == RecallCue::start_of_list ? enc.contexts.front() : enc.contexts.back();

  std::mt19937_64 rng(seed);
  std::vector<RecallTrace> traces;
  traces.reserve(n_trials);
  for (std::size_t trial = 0; trial < n_trials; ++trial) {
    RecallTrace tr;
    tr.seed = seed;
    std::vector<bool> recalled(list_len, false);
    TemporalContext t = cue;

    auto accept = [&](std::size_t pos) {
      tr.recalled_positions.push_back(pos);
      if (recalled[pos - 1]) {
        tr.ended_on_repeat = true;
        return !opts.stop_on_repeat;
      }
      recalled[pos - 1] = true;
      return true;
    };
    auto reinstate = [&](std::size_t pos) {
      const auto& f = items[pos - 1];
      t = update_context(t, retrieval_input(f, enc.state, params.gamma_ft()), params.beta_rec());
    };

    bool go = true;
    if (opts.first_recall) {
      const std::size_t pos = *opts.first_recall;
      if (opts.record_distributions) {
        Vector forced = Vector::Zero(static_cast<Eigen::Index>(list_len));
        forced[static_cast<Eigen::Index>(pos - 1)] = 1.0;
        tr.step_distributions.push_back(std::move(forced));
      }
      t = enc.contexts[pos - 1];
      go = accept(pos);
      reinstate(pos);
    }
    while (go && tr.recalled_positions.size() < max_recalls) {
      const Vector p = recall_distribution(enc.state, t, params.inv_temp(), items);
      std::discrete_distribution<std::size_t> pick(p.data(), p.data() + p.size());
      const std::size_t pos = pick(rng) + 1;
      if (opts.record_distributions) tr.step_distributions.push_back(p);
      go = accept(pos);
      if (go) reinstate(pos);
    }
    traces.push_back(std::move(tr));
  }
  return traces;
}

/// Lag-CRP with availability correction over lags in [-L, L].
///
/// count holds the per-lag denominator (number of opportunities); lags with no
/// opportunity are reported missing. variance is the Bernoulli variance
/// mean * (1 - mean) of a single opportunity.
inline LagProfile empirical_crp(std::span<const RecallTrace> traces, std::size_t list_len,
                                int lag_range) {
  require(!traces.empty(), "empirical_crp needs at least one trace");
  LagProfile prof(lag_range);
  std::vector<double> num(prof.size(), 0.0);
  for (const auto& tr : traces) {
    std::vector<bool> recalled(list_len + 1, false);
    const auto& seq = tr.recalled_positions;
    for (std::size_t k = 0; k < seq.size(); ++k) {
      const std::size_t from = seq[k];
      require(from >= 1 && from <= list_len, "recalled position outside the list");
      if (recalled[from]) break;  // a repeat ends the analysable sequence
      recalled[from] = true;
      if (k + 1 >= seq.size()) break;
      const std::size_t to = seq[k + 1];
      require(to >= 1 && to <= list_len, "recalled position outside the list");
      if (recalled[to]) continue;  // transition into a repeat carries no CRP information
      for (int lag = -lag_range; lag <= lag_range; ++lag) {
        if (lag == 0) continue;
        const long cand = static_cast<long>(from) + lag;
        if (cand < 1 || cand > static_cast<long>(list_len)) continue;
        if (recalled[static_cast<std::size_t>(cand)]) continue;
        ++prof.count[prof.index(lag)];
      }
      const long lag = static_cast<long>(to) - static_cast<long>(from);
      if (lag >= -lag_range && lag <= lag_range) num[prof.index(static_cast<int>(lag))] += 1.0;
    }
  }
  for (std::size_t k = 0; k < prof.size(); ++k) {
    if (prof.count[k] == 0) continue;
    prof.mean[k] = num[k] / static_cast<double>(prof.count[k]);
    prof.variance[k] = prof.mean[k] * (1.0 - prof.mean[k]);
  }
  return prof;
}

/// Monte-Carlo counterpart of analytic_crp: at every conditioning position the
/// first recall is forced and the next recall sampled `trials_per_position`
/// times. mean is the transition frequency averaged over positions; variance
/// and count follow analytic_crp (across positions). Lag 0 counts repeats.
inline LagProfile first_transition_crp(const CmrParams& params, std::size_t list_len,
                                       int lag_range, std::size_t trials_per_position,
                                       std::uint64_t seed) {
  const auto window = conditioning_window(list_len, lag_range);
  LagProfile prof(lag_range);
  std::vector<double> sum(prof.size(), 0.0), sumsq(prof.size(), 0.0);
  RecallOptions opts;
  opts.max_recalls = 2;
  for (std::size_t pos = window.first; pos <= window.last; ++pos) {
    opts.first_recall = pos;
    const auto traces = simulate_recall(params, list_len, trials_per_position, seed + pos, opts);
    std::vector<double> hits(prof.size(), 0.0);
    for (const auto& tr : traces) {
      const long lag = static_cast<long>(tr.recalled_positions[1]) - static_cast<long>(pos);
      if (lag >= -lag_range && lag <= lag_range) hits[prof.index(static_cast<int>(lag))] += 1.0;
    }
    for (std::size_t k = 0; k < prof.size(); ++k) {
      const double f = hits[k] / static_cast<double>(trials_per_position);
      sum[k] += f;
      sumsq[k] += f * f;
    }
  }
  const double m = static_cast<double>(window.size());
  for (std::size_t k = 0; k < prof.size(); ++k) {
    prof.mean[k] = sum[k] / m;
    prof.variance[k] = std::max(0.0, sumsq[k] / m - prof.mean[k] * prof.mean[k]);
    prof.count[k] = window.size();
  }
  return prof;
}

}  // namespace cmrhead
