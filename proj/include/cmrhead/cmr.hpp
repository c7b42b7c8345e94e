#pragma once

// Context maintenance and retrieval (CMR) model: temporal context drift,
// outer-product associative memories, and single-transition recall CRPs.

#include "cmrhead/common.hpp"
#include "cmrhead/lag_profile.hpp"

#include <algorithm>
#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

namespace cmrhead {

/// The four free parameters of CMR.
class CmrParams {
 public:
  CmrParams(double beta_enc, double beta_rec, double gamma_ft, double inv_temp)
      : beta_enc_(beta_enc), beta_rec_(beta_rec), gamma_ft_(gamma_ft), inv_temp_(inv_temp) {
    require(std::isfinite(beta_enc) && beta_enc > 0.0 && beta_enc <= 1.0,
            "beta_enc must lie in (0, 1]");
    require(std::isfinite(beta_rec) && beta_rec >= 0.0 && beta_rec <= 1.0,
            "beta_rec must lie in [0, 1]");
    require(std::isfinite(gamma_ft) && gamma_ft >= 0.0 && gamma_ft <= 1.0,
            "gamma_ft must lie in [0, 1]");
    require(std::isfinite(inv_temp) && inv_temp >= 0.0, "inv_temp must be finite and >= 0");
  }

  double beta_enc() const { return beta_enc_; }
  double beta_rec() const { return beta_rec_; }
  double gamma_ft() const { return gamma_ft_; }
  double inv_temp() const { return inv_temp_; }

  auto as_tuple() const { return std::tuple{beta_enc_, beta_rec_, gamma_ft_, inv_temp_}; }
  friend bool operator==(const CmrParams& a, const CmrParams& b) {
    return a.as_tuple() == b.as_tuple();
  }
  friend auto operator<=>(const CmrParams& a, const CmrParams& b) {
    return a.as_tuple() <=> b.as_tuple();
  }

 private:
  double beta_enc_;
  double beta_rec_;
  double gamma_ft_;
  double inv_temp_;
};

/// One-hot item vector. The last coordinate (dim - 1) is the dummy unit that
/// carries the initial context and never denotes an item.
class ItemEmbedding {
 public:
  ItemEmbedding(std::size_t index, std::size_t dim) : index_(index), dim_(dim) {
    require(dim >= 2, "embedding dimension must be at least 2");
    require(index + 1 < dim, "item index collides with the dummy unit");
  }

  std::size_t index() const { return index_; }
  std::size_t dim() const { return dim_; }
  Vector vector() const { return Vector::Unit(static_cast<Eigen::Index>(dim_), idx()); }
  Eigen::Index idx() const { return static_cast<Eigen::Index>(index_); }

  friend bool operator==(const ItemEmbedding&, const ItemEmbedding&) = default;

 private:
  std::size_t index_;
  std::size_t dim_;
};

/// Items 1..n of a study list as one-hot embeddings of dimension n + 1.
inline std::vector<ItemEmbedding> make_study_list(std::size_t n_items) {
  std::vector<ItemEmbedding> items;
  items.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) items.emplace_back(i, n_items + 1);
  return items;
}

inline constexpr double kUnitNormTol = 1e-9;

/// Unit-norm temporal context vector.
class TemporalContext {
 public:
  explicit TemporalContext(Vector v) : v_(std::move(v)) {
    require(v_.size() > 0 && std::abs(v_.norm() - 1.0) <= kUnitNormTol,
            "temporal context must have unit norm");
  }

  /// The initial context t_0: all weight on the dummy unit.
  static TemporalContext initial(std::size_t dim) {
    return TemporalContext(Vector::Unit(static_cast<Eigen::Index>(dim),
                                        static_cast<Eigen::Index>(dim) - 1));
  }

  const Vector& vector() const { return v_; }
  Eigen::Index dim() const { return v_.size(); }

 private:
  Vector v_;
};

/// Associative memories plus the current context.
///
/// m_tf is kept equal to the transpose of m_ft_exp.
struct MemoryState {
  Matrix m_ft_pre;
  Matrix m_ft_exp;
  Matrix m_tf;
  TemporalContext context;
  std::size_t step = 0;

  static MemoryState initial(std::size_t dim, std::optional<Matrix> m_ft_pre = std::nullopt) {
    const auto d = static_cast<Eigen::Index>(dim);
    Matrix pre = m_ft_pre ? std::move(*m_ft_pre) : Matrix::Identity(d, d);
    require(pre.rows() == d && pre.cols() == d, "m_ft_pre must be dim x dim");
    return MemoryState{std::move(pre), Matrix::Zero(d, d), Matrix::Zero(d, d),
                       TemporalContext::initial(dim), 0};
  }

  Eigen::Index dim() const { return m_ft_exp.rows(); }
};

/// Carry-over coefficient rho >= 0 such that ||rho * t_prev + beta * t_in|| = 1.
inline double compute_rho(const Vector& t_prev, const Vector& t_in_unit, double beta) {
  require(t_prev.size() == t_in_unit.size(), "context dimension mismatch");
  require(std::abs(t_prev.norm() - 1.0) <= kUnitNormTol, "t_prev must have unit norm");
  require(std::abs(t_in_unit.norm() - 1.0) <= kUnitNormTol, "t_in must have unit norm");
  require(beta >= 0.0 && beta <= 1.0, "beta must lie in [0, 1]");
  const double c = t_prev.dot(t_in_unit);
  const double disc = 1.0 + beta * beta * (c * c - 1.0);
  if (disc < 0.0) throw std::logic_error("negative discriminant in compute_rho");
  return std::sqrt(disc) - beta * c;
}

/// t <- rho * t_prev + beta * t_in / ||t_in||.
inline TemporalContext update_context(const TemporalContext& t_prev, const Vector& t_in,
                                      double beta) {
  require(t_in.size() == t_prev.dim(), "input context dimension mismatch");
  const double n = t_in.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw degenerate_input_error("input context is zero");
  const Vector unit = t_in / n;
  const double rho = compute_rho(t_prev.vector(), unit, beta);
  Vector next = rho * t_prev.vector() + beta * unit;
  // Renormalize away accumulated rounding; the analytic norm is exactly 1.
  next /= next.norm();
  return TemporalContext(std::move(next));
}

struct EncodedList {
  MemoryState state;
  /// Encoding contexts t_0 .. t_n.
  std::vector<TemporalContext> contexts;
  std::vector<ItemEmbedding> items;
};

/// Present `items` in order with drift beta_enc, learning t_{i-1} f_i^T.
inline EncodedList encode_list(std::span<const ItemEmbedding> items, const CmrParams& params,
                               std::optional<Matrix> m_ft_pre = std::nullopt) {
  require(!items.empty(), "cannot encode an empty list");
  const std::size_t dim = items.front().dim();
  std::vector<bool> seen(dim, false);
  for (const auto& f : items) {
    require(f.dim() == dim, "item dimension mismatch");
    require(!seen[f.index()], "duplicate item in study list");
    seen[f.index()] = true;
  }

  EncodedList out{MemoryState::initial(dim, std::move(m_ft_pre)), {}, {items.begin(), items.end()}};
  auto& st = out.state;
  out.contexts.reserve(items.size() + 1);
  out.contexts.push_back(st.context);
  for (const auto& f : items) {
    const Vector& prev = st.context.vector();
    st.m_ft_exp.col(f.idx()) += prev;
    st.m_tf.row(f.idx()) += prev.transpose();
    const Vector t_in = st.m_ft_pre.col(f.idx());
    st.context = update_context(st.context, t_in, params.beta_enc());
    ++st.step;
    out.contexts.push_back(st.context);
  }
  return out;
}

/// Retrieved input context ((1 - gamma) M_pre + gamma M_exp) f.
inline Vector retrieval_input(const ItemEmbedding& f, const MemoryState& state, double gamma_ft) {
  require(static_cast<Eigen::Index>(f.dim()) == state.dim(), "item dimension mismatch");
  require(gamma_ft >= 0.0 && gamma_ft <= 1.0, "gamma_ft must lie in [0, 1]");
  return (1.0 - gamma_ft) * state.m_ft_pre.col(f.idx()) + gamma_ft * state.m_ft_exp.col(f.idx());
}

/// Numerically stable softmax of inv_temp * x.
inline Vector softmax(const Vector& x, double inv_temp = 1.0) {
  Vector z = inv_temp * x;
  const double m = z.maxCoeff();
  Vector e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

/// Recall probabilities over `studied` (in that order): softmax of
/// inv_temp * <f_j, M_TF t>.
inline Vector recall_distribution(const MemoryState& state, const TemporalContext& t,
                                  double inv_temp, std::span<const ItemEmbedding> studied) {
  require(!studied.empty(), "recall needs at least one studied item");
  require(t.dim() == state.dim(), "context dimension mismatch");
  const Vector f_in = state.m_tf * t.vector();
  Vector strength(static_cast<Eigen::Index>(studied.size()));
  for (std::size_t j = 0; j < studied.size(); ++j)
    strength[static_cast<Eigen::Index>(j)] = f_in[studied[j].idx()];
  return softmax(strength, inv_temp);
}

/// 1-based study positions used as conditioning points for a lag window L:
/// every position i with L < i <= N - L, so each lag in [-L, L] is in range.
struct ConditioningWindow {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t size() const { return last - first + 1; }
};

inline ConditioningWindow conditioning_window(std::size_t list_len, int lag_range) {
  require(lag_range >= 0, "lag_range must be nonnegative");
  const auto L = static_cast<std::size_t>(lag_range);
  if (list_len <= 2 * L)
    throw precondition_error("list too short for the lag window (need list_len > 2 * lag_range)");
  return {L + 1, list_len - L};
}

/// Retrieval strengths after recalling each conditioning item.
///
/// Row r corresponds to conditioning position window.first + r; the recall of
/// item i starts from its study context t_{i-1} and applies one retrieval
/// update with beta_rec. Columns are items 1..N.
inline Matrix transition_strengths(const EncodedList& enc, double beta_rec, double gamma_ft,
                                   const ConditioningWindow& window) {
  const auto n = static_cast<Eigen::Index>(enc.items.size());
  Matrix S(static_cast<Eigen::Index>(window.size()), n);
  for (std::size_t r = 0; r < window.size(); ++r) {
    const std::size_t pos = window.first + r;
    const ItemEmbedding& f = enc.items[pos - 1];
    const TemporalContext t =
        update_context(enc.contexts[pos - 1], retrieval_input(f, enc.state, gamma_ft), beta_rec);
    const Vector f_in = enc.state.m_tf * t.vector();
    for (Eigen::Index j = 0; j < n; ++j)
      S(static_cast<Eigen::Index>(r), j) = f_in[enc.items[static_cast<std::size_t>(j)].idx()];
  }
  return S;
}

/// Averages the per-position recall distributions into a lag profile.
/// Mass at lags outside [-L, L] is dropped.
inline LagProfile crp_from_strengths(const Matrix& strengths, const ConditioningWindow& window,
                                     double inv_temp, int lag_range) {
  LagProfile prof(lag_range);
  const auto rows = strengths.rows();
  const auto n = strengths.cols();
  std::vector<double> sum(prof.size(), 0.0), sumsq(prof.size(), 0.0);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Vector p = softmax(strengths.row(r).transpose(), inv_temp);
    const auto pos0 = static_cast<Eigen::Index>(window.first) - 1 + r;  // 0-based
    for (int lag = -lag_range; lag <= lag_range; ++lag) {
      const Eigen::Index j = pos0 + lag;
      const double v = (j >= 0 && j < n) ? p[j] : 0.0;
      sum[prof.index(lag)] += v;
      sumsq[prof.index(lag)] += v * v;
    }
  }
  const double m = static_cast<double>(rows);
  for (std::size_t k = 0; k < prof.size(); ++k) {
    prof.mean[k] = sum[k] / m;
    prof.variance[k] = std::max(0.0, sumsq[k] / m - prof.mean[k] * prof.mean[k]);
    prof.count[k] = static_cast<std::size_t>(rows);
  }
  return prof;
}

/// Expected single-transition CRP of CMR, averaged over conditioning positions.
inline LagProfile analytic_crp(const CmrParams& params, std::size_t list_len, int lag_range) {
  const auto window = conditioning_window(list_len, lag_range);
  const auto items = make_study_list(list_len);
  const auto enc = encode_list(items, params);
  const Matrix S = transition_strengths(enc, params.beta_rec(), params.gamma_ft(), window);
  return crp_from_strengths(S, window, params.inv_temp(), lag_range);
}

}  // namespace cmrhead
