// cmrhead: score exported attention heads, simulate CMR recall, run toy
// ablation experiments.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 1 other failure.

#include "cmrhead/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace cmrhead;

/// Reads a flat key = value file and hands every key to the selected subcommand,
/// so the file mirrors that subcommand's flags.
class FlatConfig : public CLI::ConfigBase {
 public:
  explicit FlatConfig(const CLI::App& app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigBase::from_config(input);
    const auto subs = app_.get_subcommands();
    if (subs.empty()) return items;
    for (auto& item : items)
      if (item.parents.empty()) item.parents = {subs.front()->get_name()};
    return items;
  }

 private:
  const CLI::App& app_;
};

void add_common(CLI::App* sub, RunConfig& cfg, bool needs_input) {
  auto* in = sub->add_option("--input", cfg.input, needs_input ? "Export directory" : "Toy model name");
  if (needs_input) in->required();
  sub->add_option("--out", cfg.out, "Output directory")->required();
  sub->add_option("--lag-range", cfg.lag_range, "Lags in [-L, L]")->capture_default_str();
  sub->add_option("--threshold", cfg.threshold, "CMR distance threshold")->capture_default_str();
  sub->add_option("--grid", cfg.grid, "full, coarse, or a CRP table file")->capture_default_str();
  sub->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
  sub->add_option("--workers", cfg.workers, "Worker threads")->capture_default_str();
}

int run(int argc, char** argv) {
  CLI::App app{"CMR and attention-head analysis toolkit"};
  app.set_config("--config", "", "Flat key = value file mirroring the flags; flags take precedence");
  app.config_formatter(std::make_shared<FlatConfig>(app));
  app.allow_config_extras(false);
  app.fallthrough();
  app.require_subcommand(1);
  RunConfig cfg;

  auto* score = app.add_subcommand("score-heads", "Score every head of an export");
  add_common(score, cfg, true);

  auto* sim = app.add_subcommand("simulate", "Analytic and Monte-Carlo CRPs for parameter sets");
  add_common(sim, cfg, false);
  sim->add_option("--params", cfg.params, "beta_enc,beta_rec,gamma_ft[,inv_temp]; repeatable")->required();
  sim->add_option("--inv-temp", cfg.default_inv_temp, "inv_temp when a set gives three values")
      ->capture_default_str();
  sim->add_option("--list-len", cfg.list_len, "Study list length")->capture_default_str();
  sim->add_option("--mc-trials", cfg.mc_trials, "Monte-Carlo trials per parameter set")->capture_default_str();

  auto* abl = app.add_subcommand("ablate", "ICL score with targeted and random head ablation");
  add_common(abl, cfg, false);
  std::string mode = "zero";
  abl->add_option("--ablate-frac", cfg.ablate_frac, "Fraction of heads to ablate")->capture_default_str();
  abl->add_option("--ablation-mode", mode, "zero or mean")
      ->check(CLI::IsMember({"zero", "mean"}))
      ->capture_default_str();
  abl->add_option("--target-metric", cfg.target_metric, "cmr or matching")
      ->check(CLI::IsMember({"cmr", "matching"}))
      ->capture_default_str();
  abl->add_option("--n-seqs", cfg.n_seqs, "Number of sequences")->capture_default_str();
  abl->add_option("--seq-len", cfg.seq_len, "Sequence length")->capture_default_str();
  abl->add_option("--period", cfg.period, "Repeat period of each sequence")->capture_default_str();
  abl->add_option("--early", cfg.early, "Early token index")->capture_default_str();
  abl->add_option("--late", cfg.late, "Late token index")->capture_default_str();

  auto* exp = app.add_subcommand("export-toy", "Export a constructed toy model on the designed prompt");
  exp->add_option("--model", cfg.toy_model, "k-composition, q-composition or ensemble")->capture_default_str();
  exp->add_option("--out", cfg.out, "Export directory")->required();
  exp->add_option("--n-unique", cfg.n_unique, "Unique tokens N in the prompt")->capture_default_str();
  exp->add_option("--seed", cfg.seed, "Prompt shuffle seed")->capture_default_str();

  auto* tab = app.add_subcommand("build-table", "Precompute and save a CRP table");
  tab->add_option("--out", cfg.out, "Table file")->required();
  tab->add_option("--grid", cfg.grid, "full or coarse")->capture_default_str();
  tab->add_option("--list-len", cfg.list_len, "List length (the prompt's N)")->capture_default_str();
  tab->add_option("--lag-range", cfg.lag_range, "Lags in [-L, L]")->capture_default_str();
  tab->add_option("--workers", cfg.workers, "Worker threads")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  cfg.ablation_mode = mode == "mean" ? AblationMode::mean : AblationMode::zero;

  try {
    if (*score) {
      write_outputs(cfg.out, cmd_score_heads(cfg));
    } else if (*sim) {
      write_outputs(cfg.out, cmd_simulate(cfg));
    } else if (*abl) {
      write_outputs(cfg.out, cmd_ablate(cfg));
    } else if (*exp) {
      cmd_export_toy(cfg);
    } else if (*tab) {
      cmd_build_table(cfg);
    }
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const precondition_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
