#pragma once

// Fitting CMR and the Gaussian baseline to a lag profile under the
// variance-normalized squared-error objective.

#include "cmrhead/cmr.hpp"
#include "cmrhead/parallel.hpp"

#include <array>
#include <cstdint>
#include <limits>

namespace cmrhead {

/// Parameter grid. The CRP table is the Cartesian product, enumerated with
/// beta_enc outermost and inv_temp innermost.
struct FitGrid {
  std::vector<double> beta_enc;
  std::vector<double> beta_rec;
  std::vector<double> gamma_ft;
  std::vector<double> inv_temp;

  /// beta_enc 0.05..1 (20), beta_rec 0..1 (21), gamma_ft 0..1 (11), and 25
  /// log-spaced inverse temperatures from 0.1 to 100.
  static FitGrid full() {
    FitGrid g;
    for (int i = 1; i <= 20; ++i) g.beta_enc.push_back(i / 20.0);
    for (int i = 0; i <= 20; ++i) g.beta_rec.push_back(i / 20.0);
    for (int i = 0; i <= 10; ++i) g.gamma_ft.push_back(i / 10.0);
    g.inv_temp = log_spaced(0.1, 100.0, 25);
    return g;
  }

  /// Small grid for quick runs and tests.
  static FitGrid coarse() {
    FitGrid g;
    g.beta_enc = {0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
    g.beta_rec = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    g.gamma_ft = {0.0, 0.5, 1.0};
    g.inv_temp = log_spaced(0.1, 100.0, 7);
    return g;
  }

  static std::vector<double> log_spaced(double lo, double hi, int n) {
    std::vector<double> v;
    const double a = std::log10(lo), b = std::log10(hi);
    for (int k = 0; k < n; ++k)
      v.push_back(n == 1 ? lo : std::pow(10.0, a + (b - a) * k / (n - 1)));
    return v;
  }

  std::size_t size() const {
    return beta_enc.size() * beta_rec.size() * gamma_ft.size() * inv_temp.size();
  }

  void validate() const {
    auto check = [](const std::vector<double>& axis, const char* name, double lo, double hi,
                    bool open_lo) {
      if (axis.empty()) throw precondition_error(std::string(name) + " grid is empty");
      for (std::size_t i = 0; i < axis.size(); ++i) {
        const double v = axis[i];
        const bool in = std::isfinite(v) && (open_lo ? v > lo : v >= lo) && v <= hi;
        if (!in) throw precondition_error(std::string(name) + " grid value out of range");
        if (i > 0 && !(axis[i - 1] < v))
          throw precondition_error(std::string(name) + " grid must be strictly ascending");
      }
    };
    check(beta_enc, "beta_enc", 0.0, 1.0, true);
    check(beta_rec, "beta_rec", 0.0, 1.0, false);
    check(gamma_ft, "gamma_ft", 0.0, 1.0, false);
    check(inv_temp, "inv_temp", 0.0, std::numeric_limits<double>::max(), false);
  }

  friend bool operator==(const FitGrid&, const FitGrid&) = default;
};

/// Precomputed CMR lag profiles q over a FitGrid.
struct CRPTable {
  static constexpr std::uint32_t kFormatVersion = 1;

  FitGrid grid;
  int lag_range = 5;
  std::size_t list_len = 100;
  std::uint32_t format_version = kFormatVersion;
  /// entries() blocks of 2L + 1 values, in grid enumeration order.
  std::vector<double> q;

  std::size_t width() const { return static_cast<std::size_t>(2 * lag_range + 1); }
  std::size_t entries() const { return grid.size(); }

  std::span<const double> at(std::size_t flat) const {
    return {q.data() + flat * width(), width()};
  }

  std::size_t flat_index(std::size_t ie, std::size_t ir, std::size_t ig, std::size_t it) const {
    return ((ie * grid.beta_rec.size() + ir) * grid.gamma_ft.size() + ig) * grid.inv_temp.size() +
           it;
  }

  CmrParams params_at(std::size_t flat) const {
    const std::size_t nt = grid.inv_temp.size(), ng = grid.gamma_ft.size(),
                      nr = grid.beta_rec.size();
    const std::size_t it = flat % nt;
    flat /= nt;
    const std::size_t ig = flat % ng;
    flat /= ng;
    const std::size_t ir = flat % nr;
    const std::size_t ie = flat / nr;
    return {grid.beta_enc[ie], grid.beta_rec[ir], grid.gamma_ft[ig], grid.inv_temp[it]};
  }
};

/// Evaluates analytic_crp at every grid point. Encodings are shared across
/// beta_rec / gamma_ft and retrieval strengths across inv_temp.
inline CRPTable build_crp_table(const FitGrid& grid, std::size_t list_len, int lag_range,
                                std::size_t workers = 1) {
  grid.validate();
  const auto window = conditioning_window(list_len, lag_range);
  CRPTable table{grid, lag_range, list_len, CRPTable::kFormatVersion, {}};
  table.q.assign(table.entries() * table.width(), 0.0);

  const auto items = make_study_list(list_len);
  std::vector<EncodedList> encodings;
  encodings.reserve(grid.beta_enc.size());
  for (double be : grid.beta_enc) encodings.push_back(encode_list(items, CmrParams(be, 0, 0, 0)));

  const std::size_t nr = grid.beta_rec.size();
  parallel_for(grid.beta_enc.size() * nr, workers, [&](std::size_t task) {
    const std::size_t ie = task / nr, ir = task % nr;
    for (std::size_t ig = 0; ig < grid.gamma_ft.size(); ++ig) {
      const Matrix S =
          transition_strengths(encodings[ie], grid.beta_rec[ir], grid.gamma_ft[ig], window);
      for (std::size_t it = 0; it < grid.inv_temp.size(); ++it) {
        const LagProfile p = crp_from_strengths(S, window, grid.inv_temp[it], lag_range);
        std::copy(p.mean.begin(), p.mean.end(),
                  table.q.begin() +
                      static_cast<std::ptrdiff_t>(table.flat_index(ie, ir, ig, it) * table.width()));
      }
    }
  });
  return table;
}

inline double floored_variance(double variance, double mean) {
  return std::max(variance, 1e-8 * std::max(1.0, mean * mean));
}

/// Per-lag weights 1 / (Var * N_lag); zero for missing lags.
inline std::vector<double> objective_weights(const LagProfile& profile) {
  std::size_t n_lag = 0;
  for (auto c : profile.count) n_lag += c > 0;
  if (n_lag == 0) throw precondition_error("profile has no defined lags");
  std::vector<double> w(profile.size(), 0.0);
  for (std::size_t k = 0; k < profile.size(); ++k)
    if (profile.count[k] > 0)
      w[k] = 1.0 / (floored_variance(profile.variance[k], profile.mean[k]) *
                    static_cast<double>(n_lag));
  return w;
}

/// sum over lags of (q - alpha)^2 / Var(alpha) / N_lag.
inline double fit_objective(std::span<const double> q, const LagProfile& profile) {
  require(q.size() == profile.size(), "candidate and profile lag ranges differ");
  const auto w = objective_weights(profile);
  double d = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double r = q[k] - profile.mean[k];
    d += w[k] * r * r;
  }
  return d;
}

struct FitResult {
  CmrParams best_params{1.0, 0.0, 0.0, 0.0};
  double distance = 0.0;
  std::vector<double> per_lag_residuals;
  /// Grid points whose distance equals the minimum within 1e-12 (saturation
  /// aliasing); always contains best_params.
  std::vector<CmrParams> ties;
};

inline bool distance_tied(double a, double b) {
  return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b));
}

/// Exhaustive table minimum. Equal distances resolve to the lexicographically
/// smallest (beta_enc, beta_rec, gamma_ft, inv_temp).
inline FitResult fit_cmr(const LagProfile& profile, const CRPTable& table) {
  if (table.entries() == 0 || table.q.empty()) throw precondition_error("empty CRP table");
  require(profile.lag_range == table.lag_range, "profile and table lag ranges differ");
  const auto w = objective_weights(profile);

  std::vector<double> dist(table.entries());
  for (std::size_t e = 0; e < table.entries(); ++e) {
    const auto q = table.at(e);
    double d = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
      const double r = q[k] - profile.mean[k];
      d += w[k] * r * r;
    }
    dist[e] = d;
  }
  std::size_t best = 0;
  for (std::size_t e = 1; e < dist.size(); ++e) {
    if (dist[e] < dist[best] ||
        (dist[e] == dist[best] && table.params_at(e) < table.params_at(best)))
      best = e;
  }

  FitResult r;
  r.best_params = table.params_at(best);
  r.distance = dist[best];
  const auto q = table.at(best);
  for (std::size_t k = 0; k < q.size(); ++k)
    r.per_lag_residuals.push_back(profile.count[k] > 0 ? q[k] - profile.mean[k] : 0.0);
  for (std::size_t e = 0; e < dist.size(); ++e)
    if (distance_tied(dist[e], r.distance)) r.ties.push_back(table.params_at(e));
  return r;
}

struct GaussianFit {
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 1.0;
  double c4 = 0.0;
  double distance = 0.0;
  bool converged = false;

  double operator()(double lag) const {
    const double z = (lag - c2) / c3;
    return c1 * std::exp(-0.5 * z * z) + c4;
  }
};

namespace detail {

inline constexpr double kMinWidth = 1e-2;
inline constexpr double kMaxWidth = 1e3;

/// Weighted least squares for (c1, c4) with the Gaussian shape fixed.
inline GaussianFit solve_amplitudes(const LagProfile& p, const std::vector<double>& w, double c2,
                                    double c3) {
  GaussianFit g;
  g.c2 = c2;
  g.c3 = c3;
  double sw = 0, sp = 0, spp = 0, sa = 0, spa = 0;
  std::vector<double> phi(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double z = (p.lag_at(k) - c2) / c3;
    phi[k] = std::exp(-0.5 * z * z);
    sw += w[k];
    sp += w[k] * phi[k];
    spp += w[k] * phi[k] * phi[k];
    sa += w[k] * p.mean[k];
    spa += w[k] * phi[k] * p.mean[k];
  }
  const double det = spp * sw - sp * sp;
  if (det > 1e-12 * spp * sw) {
    g.c1 = (spa * sw - sp * sa) / det;
    g.c4 = (spp * sa - sp * spa) / det;
  } else {
    g.c1 = 0.0;
    g.c4 = sa / sw;
  }
  double d = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double r = g.c1 * phi[k] + g.c4 - p.mean[k];
    d += w[k] * r * r;
  }
  g.distance = d;
  return g;
}

}  // namespace detail

/// Multi-start fit of c1 exp(-(lag - c2)^2 / (2 c3^2)) + c4 under the same
/// objective as fit_cmr. Each start solves (c1, c4) in closed form and refines
/// (c2, log c3) by compass search.
inline GaussianFit fit_gaussian(const LagProfile& profile) {
  require(profile.valid(), "malformed lag profile");
  const auto w = objective_weights(profile);
  constexpr std::array<double, 4> c2_starts{-2.0, 0.0, 2.0, 4.0};
  constexpr std::array<double, 4> c3_starts{0.5, 1.0, 2.0, 4.0};
  constexpr double kMinStep = 1e-12;
  constexpr int kMaxEvals = 200000;
  constexpr std::array<std::pair<double, double>, 8> kDirections{
      {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {-1, -1}, {1, -1}, {-1, 1}}};

  auto eval = [&](double c2, double log_c3) {
    const double c3 = std::clamp(std::exp(log_c3), detail::kMinWidth, detail::kMaxWidth);
    return detail::solve_amplitudes(profile, w, c2, c3);
  };

  GaussianFit best;
  best.distance = std::numeric_limits<double>::infinity();
  for (double c2s : c2_starts) {
    for (double c3s : c3_starts) {
      double x = c2s, y = std::log(c3s);
      GaussianFit cur = eval(x, y);
      double step = 0.5;
      int evals = 1;
      while (step > kMinStep && evals < kMaxEvals) {
        bool moved = false;
        for (auto [dx, dy] : kDirections) {
          const double nx = x + dx * step, ny = y + dy * step;
          GaussianFit cand = eval(nx, ny);
          ++evals;
          if (cand.distance < cur.distance) {
            cur = cand;
            x = nx;
            y = ny;
            moved = true;
            break;
          }
        }
        if (!moved) step *= 0.5;
      }
      cur.converged = step <= kMinStep;
      if (cur.distance < best.distance) best = cur;
    }
  }
  return best;
}

}  // namespace cmrhead
