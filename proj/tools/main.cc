#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "commands.h"
#include "causalmeta/stats.h"

namespace cm = causalmeta;
namespace cli = causalmeta::cli;

int main(int argc, char** argv) {
  CLI::App app{"Transport trial effects to each study population and meta-analyze them"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  std::string out = "out";
  bool skip_infeasible = false;
  app.add_option("--config", config_path, "Run configuration (JSON)");
  app.add_option("--seed", seed, "Master RNG seed")->capture_default_str();
  app.add_option("--threads", threads, "Worker threads (0 = hardware concurrency)");
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_flag("--skip-infeasible", skip_infeasible,
               "Record pairs without overlap instead of aborting");

  auto* standardize = app.add_subcommand("standardize", "Fit weights and standardized effects");
  auto* recon = app.add_subcommand("recon-cov", "Reconstruct covariate covariances of aggregated trials");
  auto* pseudo = app.add_subcommand("pseudo-ipd", "Generate moment-matched pseudo participant data");
  auto* variance = app.add_subcommand("variance", "Sandwich covariance of the effect table");
  auto* meta = app.add_subcommand("meta", "Bayesian meta-analysis of the effect table");
  auto* pipeline = app.add_subcommand("pipeline", "Run every step in order");
  auto* simulate = app.add_subcommand("simulate", "Simulation studies");

  cli::SimulateOptions sim;
  cm::Index n = 0;
  int replicates = 0, q = 0, z = 0;
  simulate->add_option("--setting", sim.setting, "1 | 2 | meta")->capture_default_str();
  auto* n_opt = simulate->add_option("--n", n, "Participants per replicate");
  auto* r_opt = simulate->add_option("--replicates,--reps", replicates, "Replicates");
  auto* q_opt = simulate->add_option("--q", q, "Studies (meta setting)");
  auto* z_opt = simulate->add_option("--z", z, "Aggregated-only studies (meta setting)");
  simulate->add_flag("--oracle-weights", sim.oracle_weights,
                     "Use the true density ratio (bias only)");

  for (auto* sub : {standardize, recon, pseudo, variance, meta, pipeline, simulate}) {
    sub->fallthrough();
  }

  CLI11_PARSE(app, argc, argv);

  try {
    cli::RunContext ctx;
    if (!config_path.empty()) ctx.config = cli::PipelineConfig::load(config_path);
    ctx.seed = seed;
    ctx.threads = threads == 0 ? cm::default_thread_count() : threads;
    ctx.out = out;
    ctx.skip_infeasible = skip_infeasible;
    std::ostringstream inv;
    inv << app.get_subcommands().front()->get_name() << " --seed " << seed;
    if (!config_path.empty()) inv << " --config " << cli::fs::path(config_path).filename().string();
    ctx.invocation = inv.str();

    const bool needs_config = !simulate->parsed() && !meta->parsed();
    if (needs_config && config_path.empty()) {
      throw cm::ValidationError("--config is required for this command");
    }
    if (standardize->parsed()) cli::cmd_standardize(ctx);
    if (recon->parsed()) cli::cmd_recon_cov(ctx);
    if (pseudo->parsed()) cli::cmd_pseudo_ipd(ctx);
    if (variance->parsed()) cli::cmd_variance(ctx);
    if (meta->parsed()) cli::cmd_meta(ctx);
    if (pipeline->parsed()) cli::cmd_pipeline(ctx);
    if (simulate->parsed()) {
      if (n_opt->count() > 0) sim.n = n;
      if (r_opt->count() > 0) sim.replicates = replicates;
      if (q_opt->count() > 0) sim.q = q;
      if (z_opt->count() > 0) sim.z = z;
      cli::cmd_simulate(ctx, sim);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::exit_code(e);
  }
  return 0;
}
