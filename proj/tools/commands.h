#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalmeta/covariance_reconstruction.h"
#include "causalmeta/meta_model.h"
#include "causalmeta/simulation.h"
#include "causalmeta/types.h"
#include "causalmeta/weights.h"

namespace causalmeta::cli {

namespace fs = std::filesystem;

// Everything a run needs; read from the --config JSON. Relative paths are
// resolved against the config file's directory.
struct PipelineConfig {
  std::vector<fs::path> ipd;
  std::vector<fs::path> aggregated;
  std::string basis = "linear";  // moment basis phi
  std::string model_basis;       // ratio model psi; empty = same as basis
  double truncation_percentile = 1.0;
  EffectScale scale = EffectScale::kRiskDifference;
  SourceAveraging averaging = SourceAveraging::kUnweighted;
  std::string target_moments = "reconstruction";  // or "pseudo"
  std::string meat = "blocks";                    // or "stacking"
  SolverOptions solver;
  MetaOptions meta;
  bool reml = true;
  bool write_draws = true;
  nlohmann::json simulation = nlohmann::json::object();

  static PipelineConfig from_json(const nlohmann::json& doc, const fs::path& base_dir);
  static PipelineConfig load(const fs::path& path);
  // Files exist, percentile in (0, 1], option values known.
  void validate() const;
};

struct RunContext {
  PipelineConfig config;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  fs::path out = ".";
  std::string invocation;
  bool skip_infeasible = false;
};

// Artifact names inside the output directory.
inline constexpr const char* kStandardizeFile = "standardize.json";
inline constexpr const char* kReconFile = "recon_cov.json";
inline constexpr const char* kPseudoFile = "pseudo_ipd.json";
inline constexpr const char* kEffectTableFile = "effect_table.json";
inline constexpr const char* kPosteriorFile = "posterior.json";
inline constexpr const char* kDrawsFile = "draws.csv";
inline constexpr const char* kForestFile = "forest.csv";

void cmd_standardize(const RunContext& ctx);
void cmd_recon_cov(const RunContext& ctx);
void cmd_pseudo_ipd(const RunContext& ctx);
void cmd_variance(const RunContext& ctx);
void cmd_meta(const RunContext& ctx);
void cmd_pipeline(const RunContext& ctx);

struct SimulateOptions {
  std::string setting = "1";  // 1 | 2 | meta
  std::optional<Index> n;
  std::optional<int> replicates;
  std::optional<int> q;
  std::optional<int> z;
  bool oracle_weights = false;
};
void cmd_simulate(const RunContext& ctx, const SimulateOptions& options);

// Reads an artifact and checks its schema version; a missing file names the
// command that produces it.
nlohmann::json read_artifact(const fs::path& path, const std::string& producer);

// Maps the error category to the process exit code.
int exit_code(const std::exception& e);

}  // namespace causalmeta::cli
