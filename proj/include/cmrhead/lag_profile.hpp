#pragma once

#include "cmrhead/common.hpp"

#include <cstddef>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

namespace cmrhead {

/// Per-lag mean / variance / count over lags in [-L, L].
///
/// A lag with count 0 is missing: its mean is stored as 0 and written as an
/// empty CSV field.
struct LagProfile {
  int lag_range = 0;
  std::vector<double> mean;
  std::vector<double> variance;
  std::vector<std::size_t> count;

  LagProfile() = default;
  explicit LagProfile(int L)
      : lag_range(L),
        mean(static_cast<std::size_t>(2 * L + 1), 0.0),
        variance(static_cast<std::size_t>(2 * L + 1), 0.0),
        count(static_cast<std::size_t>(2 * L + 1), 0) {
    require(L >= 0, "lag_range must be nonnegative");
  }

  std::size_t size() const { return mean.size(); }
  std::size_t index(int lag) const {
    require(lag >= -lag_range && lag <= lag_range, "lag outside profile range");
    return static_cast<std::size_t>(lag + lag_range);
  }
  int lag_at(std::size_t idx) const { return static_cast<int>(idx) - lag_range; }

  double mean_at(int lag) const { return mean[index(lag)]; }
  double variance_at(int lag) const { return variance[index(lag)]; }
  std::size_t count_at(int lag) const { return count[index(lag)]; }
  bool has(int lag) const { return count_at(lag) > 0; }

  bool valid() const {
    const auto n = static_cast<std::size_t>(2 * lag_range + 1);
    if (mean.size() != n || variance.size() != n || count.size() != n) return false;
    for (double v : variance)
      if (!(v >= 0.0)) return false;
    return true;
  }
};

inline void write_csv(std::ostream& os, const LagProfile& p) {
  os << "lag,mean,variance,count\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    os << p.lag_at(i) << ',';
    if (p.count[i] > 0) os << format_real(p.mean[i]);
    os << ',' << format_real(p.variance[i]) << ',' << p.count[i] << '\n';
  }
}

inline void write_csv(const std::string& path, const LagProfile& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("cannot open " + path + " for writing");
  write_csv(os, p);
}

}  // namespace cmrhead
