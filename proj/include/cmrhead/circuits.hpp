#pragma once

// Analytically constructed two-layer circuits on one-hot token (TE) and
// position (PE) bases.
//
// K/Q-composition residual layout: [TE: V | PE: P | AUX | OUT: V]. AUX holds
// the layer-1 write (previous token for K-composition, duplicate position for
// Q-composition); the unembedding reads OUT only.

#include "cmrhead/toy_model.hpp"

namespace cmrhead {

/// Score gain at a matched source after the 1/sqrt(d_head) scale.
inline constexpr double kSaturationGain = 30.0;
/// Logit gain of the induction head's write into OUT.
inline constexpr double kOutputGain = 10.0;

struct CircuitLayout {
  Eigen::Index vocab = 0, max_len = 0;
  Eigen::Index te = 0, pe = 0, aux = 0, out = 0;
  Eigen::Index aux_size = 0;

  Eigen::Index d_model() const { return out + vocab; }

  static CircuitLayout make(std::size_t V, std::size_t P, std::size_t aux_size) {
    CircuitLayout l;
    l.vocab = static_cast<Eigen::Index>(V);
    l.max_len = static_cast<Eigen::Index>(P);
    l.aux_size = static_cast<Eigen::Index>(aux_size);
    l.te = 0;
    l.pe = l.vocab;
    l.aux = l.pe + l.max_len;
    l.out = l.aux + l.aux_size;
    return l;
  }
};

/// Smallest config that fits the K-composition circuit.
inline ToyConfig k_composition_config(std::size_t V, std::size_t P, std::size_t n_heads = 1) {
  return {V, P, 3 * V + P, std::max(V + 1, P), n_heads, 2};
}

/// Smallest config that fits the Q-composition circuit.
inline ToyConfig q_composition_config(std::size_t V, std::size_t P, std::size_t n_heads = 1) {
  return {V, P, 2 * V + 2 * P, V + P, n_heads, 2};
}

namespace detail {

inline ToyModel one_hot_base(const ToyConfig& c, const CircuitLayout& lay) {
  ToyModel m = ToyModel::zeros(c);
  for (Eigen::Index t = 0; t < lay.vocab; ++t) {
    m.token_embed(lay.te + t, t) = 1.0;
    m.unembed(t, lay.out + t) = 1.0;
  }
  for (Eigen::Index p = 0; p < lay.max_len; ++p) m.pos_embed(lay.pe + p, p) = 1.0;
  return m;
}

inline double query_gain(const ToyConfig& c, double gain) {
  return gain * std::sqrt(static_cast<double>(c.d_head));
}

/// Previous-token head: query PE_i, key PE_j shifted to j+1, value TE into AUX.
inline void previous_token_head(HeadWeights& h, const ToyConfig& c, const CircuitLayout& lay,
                                double write_scale) {
  const double g = query_gain(c, kSaturationGain);
  for (Eigen::Index p = 0; p < lay.max_len; ++p) {
    h.w_q(p, lay.pe + p) = g;
    if (p + 1 < lay.max_len) h.w_k(p + 1, lay.pe + p) = 1.0;
  }
  for (Eigen::Index t = 0; t < lay.vocab; ++t) {
    h.w_v(t, lay.te + t) = 1.0;
    h.w_o(lay.aux + t, t) = write_scale;
  }
}

/// Induction head reading the previous-token subspace: query TE_d, key AUX.
/// Position 0 has no predecessor, so its key is pushed down through query
/// coordinate V, which every one-hot token sets to the same value.
inline void k_induction_head(HeadWeights& h, const ToyConfig& c, const CircuitLayout& lay,
                             double score_gain, double out_gain) {
  const double g = query_gain(c, score_gain);
  h.w_k(lay.vocab, lay.pe) = -1.0;
  for (Eigen::Index t = 0; t < lay.vocab; ++t) {
    h.w_q(t, lay.te + t) = g;
    h.w_q(lay.vocab, lay.te + t) = g;
    h.w_k(t, lay.aux + t) = 1.0;
    h.w_v(t, lay.te + t) = 1.0;
    h.w_o(lay.out + t, t) = out_gain;
  }
}

inline void check_fits(const ToyConfig& c, const ToyConfig& need) {
  c.validate();
  if (c.d_model < need.d_model || c.d_head < need.d_head)
    throw precondition_error("toy config too small for the circuit: need d_model >= " +
                             std::to_string(need.d_model) + " and d_head >= " +
                             std::to_string(need.d_head));
  if (c.n_layers != 2) throw precondition_error("constructed circuits use exactly two layers");
}

}  // namespace detail

/// Previous-token head (layer 0, head 0) feeding an induction head (layer 1,
/// head 0) through the key. Other heads, if any, stay zero.
inline ToyModel build_k_composition(const ToyConfig& c) {
  detail::check_fits(c, k_composition_config(c.vocab_size, c.max_len));
  const auto lay = CircuitLayout::make(c.vocab_size, c.max_len, c.vocab_size);
  ToyModel m = detail::one_hot_base(c, lay);
  detail::previous_token_head(m.layers[0][0], c, lay, 1.0);
  detail::k_induction_head(m.layers[1][0], c, lay, kSaturationGain, kOutputGain);
  return m;
}

/// Duplicate-token head (layer 0) feeding an induction head (layer 1) through
/// the query. The +1 position shift lives in the layer-1 W_Q.
inline ToyModel build_q_composition(const ToyConfig& c) {
  detail::check_fits(c, q_composition_config(c.vocab_size, c.max_len));
  const auto lay = CircuitLayout::make(c.vocab_size, c.max_len, c.max_len);
  ToyModel m = detail::one_hot_base(c, lay);
  const double g = detail::query_gain(c, kSaturationGain);

  // Score g*[TE_j == TE_k] - g*[j == k]: the earlier copy of the current token.
  HeadWeights& dup = m.layers[0][0];
  for (Eigen::Index t = 0; t < lay.vocab; ++t) {
    dup.w_q(t, lay.te + t) = g;
    dup.w_k(t, lay.te + t) = 1.0;
  }
  for (Eigen::Index p = 0; p < lay.max_len; ++p) {
    dup.w_q(lay.vocab + p, lay.pe + p) = -g;
    dup.w_k(lay.vocab + p, lay.pe + p) = 1.0;
    dup.w_v(p, lay.pe + p) = 1.0;
    dup.w_o(lay.aux + p, p) = 1.0;
  }

  HeadWeights& ind = m.layers[1][0];
  for (Eigen::Index p = 0; p < lay.max_len; ++p) {
    if (p + 1 < lay.max_len) ind.w_q(p + 1, lay.aux + p) = g;
    ind.w_k(p, lay.pe + p) = 1.0;
  }
  for (Eigen::Index t = 0; t < lay.vocab; ++t) {
    ind.w_v(t, lay.te + t) = 1.0;
    ind.w_o(lay.out + t, t) = kOutputGain;
  }
  return m;
}

/// K-composition with redundant heads, for ablation experiments.
///
/// Layer 0 has n_heads previous-token heads, each writing 1/n_heads of the
/// previous token. Layer 1 has one strong induction head (head 0) and
/// n_heads - 1 weak ones with lower score and output gains, so removing any
/// single head changes the late-context loss.
inline ToyModel build_induction_ensemble(std::size_t V, std::size_t P, std::size_t n_heads = 5,
                                         double weak_score_gain = 4.0, double weak_out_gain = 2.0) {
  require(n_heads >= 1, "ensemble needs at least one head per layer");
  const ToyConfig c = k_composition_config(V, P, n_heads);
  const auto lay = CircuitLayout::make(V, P, V);
  ToyModel m = detail::one_hot_base(c, lay);
  for (auto& h : m.layers[0])
    detail::previous_token_head(h, c, lay, 1.0 / static_cast<double>(n_heads));
  detail::k_induction_head(m.layers[1][0], c, lay, kSaturationGain, kOutputGain);
  for (std::size_t h = 1; h < n_heads; ++h)
    detail::k_induction_head(m.layers[1][h], c, lay, weak_score_gain, weak_out_gain);
  return m;
}

// ---------------------------------------------------------------------------
// CMR as linear attention.
//
// Vocabulary: 0 = BOS, 1..n study tokens, n+1..2n recall tokens, 2n+1 a recall
// cue that carries no item. Residual layout with D = n + 1:
//   [F_cur: D | F_study: D | PHASE: 1 | T_prev: D | T_exp: D | T_cur: D | F_in: D]

struct CmrTokens {
  std::size_t n_items = 0;

  std::int64_t bos() const { return 0; }
  std::int64_t study(std::size_t item) const { return static_cast<std::int64_t>(1 + item); }
  std::int64_t recall(std::size_t item) const {
    return static_cast<std::int64_t>(1 + n_items + item);
  }
  std::int64_t cue() const { return static_cast<std::int64_t>(1 + 2 * n_items); }
  std::size_t vocab_size() const { return 2 * n_items + 2; }
};

struct CmrLayout {
  Eigen::Index dim = 0;
  Eigen::Index f_cur = 0, f_study = 0, phase = 0, t_prev = 0, t_exp = 0, t_cur = 0, f_in = 0;

  static CmrLayout make(std::size_t n_items) {
    CmrLayout l;
    l.dim = static_cast<Eigen::Index>(n_items + 1);
    l.f_cur = 0;
    l.f_study = l.dim;
    l.phase = 2 * l.dim;
    l.t_prev = l.phase + 1;
    l.t_exp = l.t_prev + l.dim;
    l.t_cur = l.t_exp + l.dim;
    l.f_in = l.t_cur + l.dim;
    return l;
  }
  Eigen::Index d_model() const { return f_in + dim; }
};

inline ToyConfig cmr_attention_config(std::size_t n_items, std::size_t max_len) {
  const auto lay = CmrLayout::make(n_items);
  return {CmrTokens{n_items}.vocab_size(), max_len, static_cast<std::size_t>(lay.d_model()),
          static_cast<std::size_t>(lay.dim), 1, 2};
}

/// Layer-0 linear head retrieves M_FT_exp f; the context recurrence mixes in
/// M_FT_pre f; the layer-1 linear head retrieves M_TF t. Logits at recall
/// token ids are inv_temp * <f_j, M_TF t>; other logits are zero.
inline ToyModel build_cmr_attention(const CmrParams& params, std::size_t n_items,
                                    std::size_t max_len,
                                    std::optional<Matrix> m_ft_pre = std::nullopt) {
  require(n_items >= 1, "CMR attention needs at least one item");
  const ToyConfig c = cmr_attention_config(n_items, max_len);
  const auto lay = CmrLayout::make(n_items);
  const CmrTokens tok{n_items};
  const Eigen::Index D = lay.dim;
  ToyModel m = ToyModel::zeros(c);
  for (auto& layer : m.layers) layer[0].kind = HeadKind::linear;

  for (std::size_t i = 0; i < n_items; ++i) {
    const auto f = static_cast<Eigen::Index>(i);
    const auto s = tok.study(i), r = tok.recall(i);
    m.token_embed(lay.f_cur + f, s) = 1.0;
    m.token_embed(lay.f_study + f, s) = 1.0;
    m.token_embed(lay.phase, s) = 1.0;
    m.token_embed(lay.f_cur + f, r) = 1.0;
    m.unembed(r, lay.f_in + f) = params.inv_temp();
  }

  HeadWeights& exp = m.layers[0][0];
  HeadWeights& tf = m.layers[1][0];
  for (Eigen::Index k = 0; k < D; ++k) {
    exp.w_q(k, lay.f_cur + k) = 1.0;
    exp.w_k(k, lay.f_study + k) = 1.0;
    exp.w_v(k, lay.t_prev + k) = 1.0;
    exp.w_o(lay.t_exp + k, k) = 1.0;
    tf.w_q(k, lay.t_cur + k) = 1.0;
    tf.w_k(k, lay.t_prev + k) = 1.0;
    tf.w_v(k, lay.f_study + k) = 1.0;
    tf.w_o(lay.f_in + k, k) = 1.0;
  }

  ContextRecurrence rec;
  rec.dim = D;
  rec.f_cur = lay.f_cur;
  rec.phase = lay.phase;
  rec.t_prev = lay.t_prev;
  rec.t_exp = lay.t_exp;
  rec.t_cur = lay.t_cur;
  rec.beta_enc = params.beta_enc();
  rec.beta_rec = params.beta_rec();
  rec.gamma_ft = params.gamma_ft();
  rec.m_ft_pre = m_ft_pre ? std::move(*m_ft_pre) : Matrix::Identity(D, D);
  require(rec.m_ft_pre.rows() == D && rec.m_ft_pre.cols() == D, "m_ft_pre must be D x D");
  rec.initial = TemporalContext::initial(static_cast<std::size_t>(D)).vector();
  m.recurrence = std::move(rec);
  return m;
}

/// Recall distribution over the n items from one logits row of a CMR model.
inline Vector cmr_recall_probs(const Matrix& logits, Eigen::Index position, std::size_t n_items) {
  const CmrTokens tok{n_items};
  return softmax(Vector(logits.row(position).segment(tok.recall(0), static_cast<Eigen::Index>(n_items)).transpose()));
}

}  // namespace cmrhead
