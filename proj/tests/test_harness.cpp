#include "cmrhead/harness.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

using namespace cmrhead;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("cmrhead_h_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

RunConfig score_config(const fs::path& in, const fs::path& out) {
  RunConfig c;
  c.input = in.string();
  c.out = out.string();
  c.grid = "coarse";
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CMRHEAD_CLI) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST(ScoreHeads, QCompositionExportHasOneInductionHead) {
  TempDir d("score");
  RunConfig ec;
  ec.out = (d.path / "export").string();
  ec.toy_model = "q-composition";
  cmd_export_toy(ec);
  const auto files = cmd_score_heads(score_config(d.path / "export", d.path / "out"));
  for (const char* f : {"head_report.csv", "layer_summary.csv", "top_heads.csv", "score_meta.csv",
                        "profiles/L0H0.csv", "profiles/L1H0.csv"})
    EXPECT_TRUE(files.count(f)) << f;
  const auto rows = parse_csv(files.at("head_report.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0][2], "matching_score");
  int high = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (!rows[i][2].empty() && std::stod(rows[i][2]) >= 0.99) ++high;
  EXPECT_EQ(high, 1);
  const auto top = parse_csv(files.at("top_heads.csv"));
  EXPECT_EQ(top[1][0], "matching_score");
  EXPECT_EQ(top[1][2], "1");
  EXPECT_EQ(top[1][3], "0");
}

TEST(ScoreHeads, SchemaIsFixedForFormatVersion) {
  TempDir d("schema");
  RunConfig ec;
  ec.out = (d.path / "export").string();
  cmd_export_toy(ec);
  const auto files = cmd_score_heads(score_config(d.path / "export", d.path / "out"));
  auto header = [&](const char* f) { return files.at(f).substr(0, files.at(f).find('\n')); };
  EXPECT_EQ(header("head_report.csv"),
            "layer,head,matching_score,copying_score,cmr_distance,gaussian_distance,beta_enc,beta_rec,"
            "gamma_ft,inv_temp,is_cmr_like");
  EXPECT_EQ(header("layer_summary.csv"), "layer,n_heads,n_cmr_like,fraction_cmr_like");
  EXPECT_EQ(header("top_heads.csv"), "metric,rank,layer,head,value");
  EXPECT_EQ(header("profiles/L0H0.csv"), "lag,mean,variance,count");
  const auto meta = parse_csv(files.at("score_meta.csv"));
  EXPECT_EQ(meta[1][0], "report_format_version");
  EXPECT_EQ(meta[1][1], "1");
  EXPECT_EQ(meta[7][1], "6x6x3x7");
}

TEST(ScoreHeads, FlagsFollowThreshold) {
  TempDir d("flags");
  RunConfig ec;
  ec.out = (d.path / "export").string();
  cmd_export_toy(ec);
  auto cfg = score_config(d.path / "export", d.path / "out");
  for (double thr : {1e-6, 1.0, 1e3, 1e9}) {
    cfg.threshold = thr;
    const auto rows = parse_csv(cmd_score_heads(cfg).at("head_report.csv"));
    for (std::size_t i = 1; i < rows.size(); ++i)
      EXPECT_EQ(rows[i][10] == "1", std::stod(rows[i][4]) < thr) << thr;
  }
}

TEST(ScoreHeads, RerunIsByteIdentical) {
  TempDir d("rerun");
  RunConfig ec;
  ec.out = (d.path / "export").string();
  cmd_export_toy(ec);
  auto cfg = score_config(d.path / "export", d.path / "out");
  cfg.workers = 3;
  const auto a = cmd_score_heads(cfg);
  cfg.workers = 1;
  EXPECT_EQ(a, cmd_score_heads(cfg));
}

TEST(ScoreHeads, BadInputsFailWithoutOutput) {
  TempDir d("bad");
  fs::create_directories(d.path / "empty");
  EXPECT_THROW(cmd_score_heads(score_config(d.path / "empty", d.path / "out")), data_error);
  EXPECT_THROW(cmd_score_heads(score_config(d.path / "absent", d.path / "out")), config_error);
  EXPECT_FALSE(fs::exists(d.path / "out"));

  RunConfig ec;
  ec.out = (d.path / "export").string();
  ec.n_unique = 5;
  cmd_export_toy(ec);
  EXPECT_THROW(cmd_score_heads(score_config(d.path / "export", d.path / "out")), data_error);
  auto cfg = score_config(d.path / "export", d.path / "out");
  cfg.lag_range = 1;
  cfg.grid = (d.path / "missing.tbl").string();
  EXPECT_THROW(cmd_score_heads(cfg), config_error);
}

TEST(ScoreHeads, SavedTableMustMatchPrompt) {
  TempDir d("table");
  RunConfig tc;
  tc.out = (d.path / "t.tbl").string();
  tc.grid = "coarse";
  tc.list_len = 20;
  cmd_build_table(tc);
  RunConfig ec;
  ec.out = (d.path / "export").string();
  ec.n_unique = 20;
  cmd_export_toy(ec);
  auto cfg = score_config(d.path / "export", d.path / "out");
  cfg.grid = tc.out;
  auto from_file = cmd_score_heads(cfg);
  cfg.grid = "coarse";
  auto built = cmd_score_heads(cfg);
  EXPECT_NE(from_file.at("score_meta.csv"), built.at("score_meta.csv"));  // records the grid source
  from_file.erase("score_meta.csv");
  built.erase("score_meta.csv");
  EXPECT_EQ(from_file, built);

  ec.n_unique = 21;
  cmd_export_toy(ec);
  cfg.grid = tc.out;
  EXPECT_THROW(cmd_score_heads(cfg), data_error);
}

TEST(Simulate, ChainingAndGammaSweep) {
  RunConfig c;
  c.out = "unused";
  c.params = {"1,1,0", "0.7,0.7,0", "0.7,0.7,0.5", "0.7,0.7,1"};
  c.list_len = 30;
  c.mc_trials = 2000;
  const auto files = cmd_simulate(c);
  EXPECT_EQ(files.size(), 5u);
  const auto rows = parse_csv(files.at("crp_000.csv"));
  ASSERT_EQ(rows.size(), 12u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const int lag = std::stoi(rows[i][0]);
    EXPECT_NEAR(std::stod(rows[i][1]), lag == 1 ? 1.0 : 0.0, 1e-9) << lag;
    EXPECT_NEAR(std::stod(rows[i][3]), lag == 1 ? 1.0 : 0.0, 1e-9) << lag;
  }
  const auto index = parse_csv(files.at("simulations.csv"));
  EXPECT_EQ(index.size(), 5u);
  EXPECT_EQ(index[1][4], "100");
  EXPECT_EQ(files, cmd_simulate(c));
}

TEST(Simulate, InvalidParamsAreConfigErrors) {
  RunConfig c;
  c.out = "unused";
  for (std::string bad : {"0,0.5,0.5", "1.2,0,0", "0.5,0.5", "0.5,x,0", "0.5,0.5,0.5,-1"}) {
    c.params = {bad};
    EXPECT_THROW(cmd_simulate(c), config_error) << bad;
  }
  c.params = {"0.5,0.5,0.5"};
  c.list_len = 10;
  EXPECT_THROW(cmd_simulate(c), config_error);
}

TEST(Ablate, SmallRunIsDeterministicAndOrdered) {
  RunConfig c;
  c.out = "unused";
  c.n_seqs = 12;
  c.target_metric = "matching";
  const auto a = cmd_ablate(c);
  EXPECT_EQ(a, cmd_ablate(c));
  const auto rep = parse_csv(a.at("ablation_report.csv"));
  ASSERT_EQ(rep.size(), 4u);
  EXPECT_EQ(rep[1][0], "intact");
  const double intact = std::stod(rep[1][1]), targeted = std::stod(rep[2][1]), random = std::stod(rep[3][1]);
  EXPECT_LT(intact, random);
  EXPECT_LT(random, targeted);
  const auto meta = parse_csv(a.at("ablation_meta.csv"));
  EXPECT_EQ(meta[6][1], "L1H0");
  EXPECT_EQ(parse_csv(a.at("ablation_per_sequence.csv")).size(), 13u);
}

TEST(Ablate, MeanModeAndConfigErrors) {
  RunConfig c;
  c.out = "unused";
  c.n_seqs = 4;
  c.target_metric = "matching";
  c.ablation_mode = AblationMode::mean;
  const auto rep = parse_csv(cmd_ablate(c).at("ablation_report.csv"));
  EXPECT_LT(std::stod(rep[1][1]), std::stod(rep[2][1]));

  c.ablate_frac = 0.01;
  EXPECT_THROW(cmd_ablate(c), config_error);
  c.ablate_frac = 0.1;
  c.late = 200;
  EXPECT_THROW(cmd_ablate(c), config_error);
  c.late = 100;
  c.input = "no-such-model";
  EXPECT_THROW(cmd_ablate(c), config_error);
}

TEST(Cli, ExitCodes) {
  TempDir d("cli");
  const std::string out = (d.path / "out").string();
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("score-heads --out " + out), 2);
  EXPECT_EQ(run_cli("score-heads --input " + (d.path / "absent").string() + " --out " + out), 2);
  fs::create_directories(d.path / "empty");
  EXPECT_EQ(run_cli("score-heads --input " + (d.path / "empty").string() + " --out " + out), 3);
  EXPECT_FALSE(fs::exists(out));
  EXPECT_EQ(run_cli("simulate --params 2,0,0 --out " + out), 2);

  const std::string exp = (d.path / "export").string();
  EXPECT_EQ(run_cli("export-toy --model k-composition --out " + exp), 0);
  {
    std::ofstream cfg(d.path / "run.ini");
    cfg << "grid = coarse\nthreshold = 0.25\n";
  }
  EXPECT_EQ(run_cli("score-heads --config " + (d.path / "run.ini").string() + " --input " + exp +
                    " --out " + out),
            0);
  EXPECT_TRUE(fs::exists(d.path / "out" / "head_report.csv"));
  EXPECT_TRUE(fs::exists(d.path / "out" / "profiles" / "L1H0.csv"));

  // Flags override the file; unknown keys are configuration errors.
  {
    std::ofstream cfg(d.path / "all.ini");
    cfg << "input = " << exp << "\nout = " << (d.path / "o2").string() << "\ngrid = coarse\nthreshold = 1e-30\n";
  }
  EXPECT_EQ(run_cli("score-heads --config " + (d.path / "all.ini").string() + " --threshold 1e30"), 0);
  std::ifstream rep(d.path / "o2" / "head_report.csv");
  std::string line;
  std::getline(rep, line);
  while (std::getline(rep, line)) EXPECT_EQ(line.back(), '1') << line;
  {
    std::ofstream cfg(d.path / "bad.ini");
    cfg << "no_such_key = 1\n";
  }
  EXPECT_EQ(run_cli("score-heads --config " + (d.path / "bad.ini").string() + " --input " + exp +
                    " --out " + out),
            2);
}
