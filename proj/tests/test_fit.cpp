#include "cmrhead/crp_table_io.hpp"
#include "cmrhead/fit.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace cmrhead;

namespace {

FitGrid tiny_grid() {
  FitGrid g;
  g.beta_enc = {0.3, 0.7, 1.0};
  g.beta_rec = {0.0, 0.5, 1.0};
  g.gamma_ft = {0.0, 0.6};
  g.inv_temp = {0.5, 5.0, 50.0};
  return g;
}

LagProfile random_profile(int L, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  LagProfile p(L);
  for (std::size_t k = 0; k < p.size(); ++k) {
    p.mean[k] = u(rng) * 0.5;
    p.variance[k] = u(rng) < 0.2 ? 0.0 : u(rng) * 0.1;  // some zero variances hit the floor
    p.count[k] = 1 + rng() % 50;
  }
  return p;
}

LagProfile unit_variance_profile(std::span<const double> q, int L) {
  LagProfile p(L);
  for (std::size_t k = 0; k < p.size(); ++k) {
    p.mean[k] = q[k];
    p.variance[k] = 1.0;
    p.count[k] = 10;
  }
  return p;
}

}  // namespace

TEST(FitObjective, AgreesWithBruteForceOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int L = 1 + static_cast<int>(rng() % 5);
    auto p = random_profile(L, rng);
    if (trial % 3 == 0) p.count[0] = 0;  // missing lag is excluded
    std::vector<double> q(p.size());
    for (auto& x : q) x = u(rng);
    EXPECT_NEAR(fit_objective(q, p), oracle::objective(q, p), 1e-10 * std::max(1.0, oracle::objective(q, p)));
  }
}

TEST(FitObjective, ZeroAtProfileAndRejectsMismatch) {
  std::mt19937_64 rng(2);
  const auto p = random_profile(3, rng);
  EXPECT_EQ(fit_objective(p.mean, p), 0.0);
  EXPECT_THROW(fit_objective(std::vector<double>(5, 0.0), p), precondition_error);
  LagProfile empty(2);
  EXPECT_THROW(fit_objective(empty.mean, empty), precondition_error);
}

TEST(CrpTable, EntriesMatchAnalyticCrp) {
  const auto g = tiny_grid();
  const auto t = build_crp_table(g, 15, 3, 1);
  ASSERT_EQ(t.entries(), 54u);
  for (std::size_t e = 0; e < t.entries(); ++e) {
    const auto want = analytic_crp(t.params_at(e), 15, 3);
    const auto got = t.at(e);
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want.mean[k], 1e-12);
  }
  // beta_enc outermost, inv_temp innermost.
  EXPECT_EQ(t.params_at(1), CmrParams(0.3, 0.0, 0.0, 5.0));
  EXPECT_EQ(t.params_at(3), CmrParams(0.3, 0.0, 0.6, 0.5));
  EXPECT_EQ(t.flat_index(2, 1, 1, 2), 53u - 6u);
}

TEST(CrpTable, ParallelBuildIsIdentical) {
  const auto g = tiny_grid();
  EXPECT_EQ(build_crp_table(g, 15, 3, 1).q, build_crp_table(g, 15, 3, 4).q);
}

TEST(FitCmr, AgreesWithBruteForceOracle) {
  const auto g = tiny_grid();
  const auto table = build_crp_table(g, 15, 3);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_profile(3, rng);
    double best = std::numeric_limits<double>::infinity();
    std::optional<CmrParams> arg;
    for (double be : g.beta_enc)
      for (double br : g.beta_rec)
        for (double gm : g.gamma_ft)
          for (double tau : g.inv_temp) {
            const CmrParams cand(be, br, gm, tau);
            const double d = oracle::objective(analytic_crp(cand, 15, 3).mean, p);
            if (!arg || d < best - 1e-12 * std::max(1.0, best)) {
              best = d;
              arg = cand;
            }
          }
    const auto fit = fit_cmr(p, table);
    EXPECT_NEAR(fit.distance, best, 1e-10 * std::max(1.0, best));
    ASSERT_TRUE(arg.has_value());
    EXPECT_TRUE(std::find(fit.ties.begin(), fit.ties.end(), *arg) != fit.ties.end());
  }
}

TEST(FitCmr, RecoversGridPointsWithUnitVariance) {
  const auto table = build_crp_table(FitGrid::coarse(), 30, 5);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t e = rng() % table.entries();
    const auto fit = fit_cmr(unit_variance_profile(table.at(e), 5), table);
    EXPECT_EQ(fit.distance, 0.0);
    EXPECT_TRUE(std::find(fit.ties.begin(), fit.ties.end(), table.params_at(e)) != fit.ties.end());
    EXPECT_LE(fit.best_params, table.params_at(e));  // lexicographically smallest tie
  }
}

TEST(FitCmr, NoisyProfileStaysBelowNoiseFloor) {
  const auto table = build_crp_table(FitGrid::coarse(), 30, 5);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> noise(0.0, 0.01);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t e = rng() % table.entries();
    auto p = unit_variance_profile(table.at(e), 5);
    for (auto& m : p.mean) m += noise(rng);
    const auto q = table.at(e);
    const double floor = oracle::objective({q.begin(), q.end()}, p);
    EXPECT_LE(fit_cmr(p, table).distance, floor + 1e-15);
    EXPECT_LT(floor, 10 * 0.01 * 0.01);
  }
}

TEST(FitCmr, InvariantToEnumerationOrder) {
  const auto table = build_crp_table(tiny_grid(), 15, 3);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_profile(3, rng);
    std::vector<std::size_t> order(table.entries());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double best = std::numeric_limits<double>::infinity();
    for (auto e : order) {
      const auto q = table.at(e);
      best = std::min(best, fit_objective(q, p));
    }
    EXPECT_EQ(fit_cmr(p, table).distance, best);
  }
}

TEST(FitCmr, AddingGridPointsNeverIncreasesDistance) {
  const auto small = tiny_grid();
  auto big = small;
  big.beta_enc = {0.2, 0.3, 0.5, 0.7, 1.0};
  big.inv_temp = {0.5, 2.0, 5.0, 50.0};
  const auto ts = build_crp_table(small, 15, 3), tb = build_crp_table(big, 15, 3);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_profile(3, rng);
    EXPECT_LE(fit_cmr(p, tb).distance, fit_cmr(p, ts).distance);
  }
}

TEST(FitCmr, RejectsMismatchedLagRange) {
  const auto table = build_crp_table(tiny_grid(), 15, 3);
  LagProfile p(2);
  p.count.assign(p.size(), 1);
  EXPECT_THROW(fit_cmr(p, table), precondition_error);
}

TEST(FitGaussian, RecoversExactGaussian) {
  LagProfile p(5);
  for (int lag = -5; lag <= 5; ++lag) {
    const double z = (lag - 0.7) / 1.6;
    p.mean[p.index(lag)] = 0.4 * std::exp(-0.5 * z * z) + 0.05;
    p.variance[p.index(lag)] = 1.0;
    p.count[p.index(lag)] = 10;
  }
  const auto g = fit_gaussian(p);
  EXPECT_LT(g.distance, 1e-12);
  EXPECT_NEAR(g.c1, 0.4, 1e-5);
  EXPECT_NEAR(g.c2, 0.7, 1e-5);
  EXPECT_NEAR(g.c3, 1.6, 1e-5);
  EXPECT_NEAR(g.c4, 0.05, 1e-5);
}

TEST(FitGaussian, NeverBeatsExactCmrOnAsymmetricProfiles) {
  FitGrid g;
  g.beta_enc = {0.7};
  g.beta_rec = {0.7};
  g.gamma_ft = {0.0};
  g.inv_temp = {2.0, 5.0, 10.0};
  const auto table = build_crp_table(g, 40, 5);
  for (std::size_t e = 0; e < table.entries(); ++e) {
    const auto p = unit_variance_profile(table.at(e), 5);
    EXPECT_GT(fit_gaussian(p).distance, fit_cmr(p, table).distance);
  }
}

TEST(CrpTableIo, RoundTripAndCorruption) {
  const auto dir = std::filesystem::temp_directory_path() / "cmrhead_table_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "t.crptb").string();
  const auto t = build_crp_table(tiny_grid(), 15, 3);
  ASSERT_FALSE(save_crp_table(t, path).has_value());
  const auto back = load_crp_table(path);
  EXPECT_EQ(back.q, t.q);
  EXPECT_EQ(back.grid, t.grid);
  EXPECT_EQ(back.list_len, 15u);
  EXPECT_EQ(back.lag_range, 3);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(load_crp_table(path), data_error);
  { std::ofstream(path) << "not a table"; }
  EXPECT_THROW(load_crp_table(path), data_error);
  EXPECT_THROW(load_crp_table((dir / "missing").string()), data_error);
  EXPECT_TRUE(save_crp_table(t, (dir / "no/such/dir/t").string()).has_value());
  std::filesystem::remove_all(dir);
}

TEST(FitGrid, FullGridShapeAndValidation) {
  const auto g = FitGrid::full();
  EXPECT_EQ(g.beta_enc.size(), 20u);
  EXPECT_EQ(g.beta_rec.size(), 21u);
  EXPECT_EQ(g.gamma_ft.size(), 11u);
  EXPECT_EQ(g.inv_temp.size(), 25u);
  EXPECT_NEAR(g.inv_temp.front(), 0.1, 1e-15);
  EXPECT_NEAR(g.inv_temp.back(), 100.0, 1e-12);
  auto bad = g;
  bad.beta_enc.push_back(0.0);
  EXPECT_THROW(bad.validate(), precondition_error);
}
