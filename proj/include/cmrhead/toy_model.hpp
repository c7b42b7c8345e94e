#pragma once

// Attention-only transformer with an explicit residual stream. Heads are
// either softmax heads (scaled dot-product, causal including self) or causal
// linear heads (raw bilinear weights over strictly earlier positions).

#include "cmrhead/attention.hpp"
#include "cmrhead/cmr.hpp"

#include <map>
#include <random>
#include <set>

namespace cmrhead {

enum class HeadKind { softmax, linear };
enum class AblationMode { zero, mean };

struct ToyConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = 0;
  std::size_t d_model = 0;
  std::size_t d_head = 0;
  std::size_t n_heads = 1;
  std::size_t n_layers = 2;

  void validate() const {
    require(vocab_size > 0 && max_len > 0 && d_model > 0 && d_head > 0, "empty toy dimensions");
    require(n_heads > 0 && n_layers > 0, "toy model needs heads and layers");
  }
};

struct HeadWeights {
  Matrix w_q;  ///< d_head x d_model
  Matrix w_k;  ///< d_head x d_model
  Matrix w_v;  ///< d_head x d_model
  Matrix w_o;  ///< d_model x d_head
  HeadKind kind = HeadKind::softmax;

  static HeadWeights zeros(const ToyConfig& c, HeadKind kind = HeadKind::softmax) {
    const auto dh = static_cast<Eigen::Index>(c.d_head), dm = static_cast<Eigen::Index>(c.d_model);
    return {Matrix::Zero(dh, dm), Matrix::Zero(dh, dm), Matrix::Zero(dh, dm),
            Matrix::Zero(dm, dh), kind};
  }
};

struct HeadId {
  int layer = 0;
  int head = 0;
  friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

/// CMR context recurrence applied to every position after layer 0.
///
/// Before layer 0 it writes the carried context t_{i-1} into the t_prev block;
/// after layer 0 it forms the input context from the current item (and, at
/// recall positions, the layer-0 retrieval written to t_exp), applies the
/// drift update and writes t_i into the t_cur block.
struct ContextRecurrence {
  Eigen::Index dim = 0;
  Eigen::Index f_cur = 0;
  Eigen::Index phase = 0;
  Eigen::Index t_prev = 0;
  Eigen::Index t_exp = 0;
  Eigen::Index t_cur = 0;
  double beta_enc = 1.0;
  double beta_rec = 1.0;
  double gamma_ft = 0.0;
  Matrix m_ft_pre;
  Vector initial;

  Vector carry_in(const Vector& carried, Eigen::Index d_model) const {
    Vector w = Vector::Zero(d_model);
    w.segment(t_prev, dim) = carried;
    return w;
  }

  /// Returns the residual write and updates `carried` to t_i.
  Vector step(const Vector& z, Vector& carried) const {
    const Vector f = z.segment(f_cur, dim);
    Vector next = carried;
    if (f.squaredNorm() > 0.0) {
      const bool one_hot = (f.array() == 0.0 || f.array() == 1.0).all() && f.sum() == 1.0;
      if (!one_hot) throw precondition_error("context recurrence needs one-hot item inputs");
      const bool study = z[phase] > 0.5;
      const Vector pre = m_ft_pre * f;
      const Vector t_in = study ? pre : Vector((1.0 - gamma_ft) * pre + gamma_ft * z.segment(t_exp, dim));
      next = update_context(TemporalContext(carried), t_in, study ? beta_enc : beta_rec).vector();
    }
    Vector w = Vector::Zero(z.size());
    w.segment(t_cur, dim) = next;
    carried = next;
    return w;
  }
};

struct ToyModel {
  ToyConfig config;
  Matrix token_embed;  ///< d_model x vocab (W_E)
  Matrix pos_embed;    ///< d_model x max_len
  std::vector<std::vector<HeadWeights>> layers;
  Matrix unembed;  ///< vocab x d_model (W_U)
  std::optional<ContextRecurrence> recurrence;
  /// Ablated heads and the constant vector each contributes instead.
  std::map<HeadId, Vector> ablated;

  std::vector<HeadId> head_ids() const {
    std::vector<HeadId> ids;
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (std::size_t h = 0; h < layers[l].size(); ++h)
        ids.push_back({static_cast<int>(l), static_cast<int>(h)});
    return ids;
  }

  bool has_head(HeadId id) const {
    return id.layer >= 0 && static_cast<std::size_t>(id.layer) < layers.size() && id.head >= 0 &&
           static_cast<std::size_t>(id.head) < layers[static_cast<std::size_t>(id.layer)].size();
  }

  const HeadWeights& head(HeadId id) const {
    require(has_head(id), "unknown head id");
    return layers[static_cast<std::size_t>(id.layer)][static_cast<std::size_t>(id.head)];
  }

  /// Empty model with zero weights shaped by `c`.
  static ToyModel zeros(const ToyConfig& c) {
    c.validate();
    const auto dm = static_cast<Eigen::Index>(c.d_model), V = static_cast<Eigen::Index>(c.vocab_size),
               P = static_cast<Eigen::Index>(c.max_len);
    ToyModel m{c, Matrix::Zero(dm, V), Matrix::Zero(dm, P), {}, Matrix::Zero(V, dm), std::nullopt, {}};
    m.layers.assign(c.n_layers, std::vector<HeadWeights>(c.n_heads, HeadWeights::zeros(c)));
    return m;
  }
};

/// Per-head record of one forward pass.
struct HeadTrace {
  HeadId id;
  AttentionMatrix scores;                 ///< pre-activation (softmax input, or linear weights)
  std::optional<AttentionMatrix> pattern;  ///< post-softmax; absent for linear heads
  Matrix output;                           ///< d_model x T contribution to the stream
};

struct ForwardResult {
  Matrix logits;      ///< T x vocab
  Matrix embeddings;  ///< d_model x T
  Matrix recurrence_writes;  ///< d_model x T (zero without a recurrence)
  Matrix final_stream;       ///< d_model x T
  std::vector<HeadTrace> heads;

  const HeadTrace& trace(HeadId id) const {
    for (const auto& h : heads)
      if (h.id == id) return h;
    throw precondition_error("no trace for the requested head");
  }
};

inline ForwardResult forward(const ToyModel& model, const TokenSequence& seq) {
  const auto& cfg = model.config;
  require(!seq.tokens.empty(), "empty token sequence");
  if (seq.size() > cfg.max_len) throw precondition_error("sequence longer than max_len");
  const auto T = static_cast<Eigen::Index>(seq.size());
  const auto dm = static_cast<Eigen::Index>(cfg.d_model);
  for (auto tok : seq.tokens)
    require(tok >= 0 && static_cast<std::size_t>(tok) < cfg.vocab_size, "token id out of range");

  ForwardResult out;
  out.embeddings = Matrix(dm, T);
  for (Eigen::Index i = 0; i < T; ++i)
    out.embeddings.col(i) = model.token_embed.col(seq.tokens[static_cast<std::size_t>(i)]) +
                            model.pos_embed.col(i);
  out.recurrence_writes = Matrix::Zero(dm, T);
  out.final_stream = Matrix(dm, T);

  const std::size_t L = model.layers.size();
  // Cached projections per layer and head: keys and values for positions seen so far.
  std::vector<std::vector<Matrix>> keys(L), values(L);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < model.layers[l].size(); ++h) {
      const auto dh = model.layers[l][h].w_k.rows();
      keys[l].emplace_back(dh, T);
      values[l].emplace_back(model.layers[l][h].w_v.rows(), T);
      HeadTrace tr;
      tr.id = {static_cast<int>(l), static_cast<int>(h)};
      tr.scores = {Matrix::Zero(T, T), AttentionKind::scores, tr.id.layer, tr.id.head};
      if (model.layers[l][h].kind == HeadKind::softmax)
        tr.pattern = AttentionMatrix{Matrix::Zero(T, T), AttentionKind::pattern, tr.id.layer, tr.id.head};
      tr.output = Matrix::Zero(dm, T);
      out.heads.push_back(std::move(tr));
    }
  }

  // Positions are processed in blocks: the whole sequence at once, or one at a
  // time when a context recurrence carries state between positions.
  const Eigen::Index block = model.recurrence ? 1 : T;
  Vector carried = model.recurrence ? model.recurrence->initial : Vector();
  for (Eigen::Index a = 0; a < T; a += block) {
    const Eigen::Index n = std::min(block, T - a);
    Matrix Z = out.embeddings.middleCols(a, n);
    if (model.recurrence) {
      const Vector w = model.recurrence->carry_in(carried, dm);
      out.recurrence_writes.col(a) += w;
      Z.col(0) += w;
    }
    std::size_t trace_idx = 0;
    for (std::size_t l = 0; l < L; ++l) {
      Matrix layer_out = Matrix::Zero(dm, n);
      for (std::size_t h = 0; h < model.layers[l].size(); ++h, ++trace_idx) {
        const HeadWeights& hw = model.layers[l][h];
        HeadTrace& tr = out.heads[trace_idx];
        keys[l][h].middleCols(a, n).noalias() = hw.w_k * Z;
        values[l][h].middleCols(a, n).noalias() = hw.w_v * Z;
        const Matrix Q = hw.w_q * Z;
        // Raw scores of destinations a..a+n-1 against sources 0..a+n-1.
        Matrix S = Q.transpose() * keys[l][h].leftCols(a + n);
        Matrix weights = Matrix::Zero(n, a + n);
        if (hw.kind == HeadKind::softmax) {
          S *= 1.0 / std::sqrt(static_cast<double>(hw.w_q.rows()));
          for (Eigen::Index r = 0; r < n; ++r) {
            const Eigen::Index d = a + r;
            const Vector p = softmax(Vector(S.row(r).head(d + 1).transpose()));
            tr.scores.values.row(d).head(d + 1) = S.row(r).head(d + 1);
            tr.pattern->values.row(d).head(d + 1) = p.transpose();
            weights.row(r).head(d + 1) = p.transpose();
          }
        } else {
          for (Eigen::Index r = 0; r < n; ++r) {
            const Eigen::Index d = a + r;
            tr.scores.values.row(d).head(d) = S.row(r).head(d);
            weights.row(r).head(d) = S.row(r).head(d);
          }
        }
        const auto ab = model.ablated.find(tr.id);
        if (ab != model.ablated.end()) {
          tr.output.middleCols(a, n) = ab->second.replicate(1, n);
        } else {
          const Matrix mixed = values[l][h].leftCols(a + n) * weights.transpose();
          tr.output.middleCols(a, n).noalias() = hw.w_o * mixed;
        }
        layer_out += tr.output.middleCols(a, n);
      }
      Z += layer_out;
      if (l == 0 && model.recurrence) {
        const Vector w = model.recurrence->step(Z.col(0), carried);
        out.recurrence_writes.col(a) += w;
        Z.col(0) += w;
      }
    }
    out.final_stream.middleCols(a, n) = Z;
  }
  out.logits = (model.unembed * out.final_stream).transpose();
  return out;
}

/// Copy of `model` whose listed heads contribute a constant vector: zero, or
/// (mean mode) their average output over every position of `reference`.
inline ToyModel ablate(const ToyModel& model, const std::set<HeadId>& heads,
                       AblationMode mode = AblationMode::zero,
                       std::span<const TokenSequence> reference = {}) {
  for (const auto& id : heads)
    if (!model.has_head(id)) throw precondition_error("ablate: unknown head id");
  ToyModel out = model;
  const auto dm = static_cast<Eigen::Index>(model.config.d_model);
  if (mode == AblationMode::zero) {
    for (const auto& id : heads) out.ablated[id] = Vector::Zero(dm);
    return out;
  }
  require(!reference.empty(), "mean ablation needs reference sequences");
  std::map<HeadId, Vector> sums;
  double n = 0.0;
  for (const auto& seq : reference) {
    const auto fr = forward(model, seq);
    for (const auto& id : heads) {
      auto [it, _] = sums.try_emplace(id, Vector::Zero(dm));
      it->second += fr.trace(id).output.rowwise().sum();
    }
    n += static_cast<double>(seq.size());
  }
  for (auto& [id, s] : sums) out.ablated[id] = s / n;
  return out;
}

/// Reduced copy circuit W_V W_E W_U W_O of one head (d_head x d_head).
inline CopyKernel copy_kernel(const ToyModel& model, HeadId id) {
  const HeadWeights& hw = model.head(id);
  return {hw.w_v * model.token_embed * model.unembed * hw.w_o, id.layer, id.head};
}

/// Full vocab x vocab circuit W_U W_O W_V W_E of one head.
inline Matrix full_copy_circuit(const ToyModel& model, HeadId id) {
  const HeadWeights& hw = model.head(id);
  return model.unembed * hw.w_o * hw.w_v * model.token_embed;
}

/// Gaussian random weights with standard deviation `scale`.
inline ToyModel random_toy_model(const ToyConfig& c, std::uint64_t seed, double scale = 0.3) {
  ToyModel m = ToyModel::zeros(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  auto fill = [&](Matrix& M) {
    for (Eigen::Index i = 0; i < M.size(); ++i) M.data()[i] = nd(rng);
  };
  fill(m.token_embed);
  fill(m.pos_embed);
  fill(m.unembed);
  for (auto& layer : m.layers)
    for (auto& hw : layer) {
      fill(hw.w_q);
      fill(hw.w_k);
      fill(hw.w_v);
      fill(hw.w_o);
    }
  return m;
}

}  // namespace cmrhead
