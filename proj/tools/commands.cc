#include "commands.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "causalmeta/basis.h"
#include "causalmeta/data_model.h"
#include "causalmeta/effect_table.h"
#include "causalmeta/json_util.h"
#include "causalmeta/pseudo_ipd.h"
#include "causalmeta/sandwich.h"
#include "causalmeta/stats.h"

namespace causalmeta::cli {

namespace {

using nlohmann::json;

template <class T>
T get_or(const json& doc, const char* key, T fallback) {
  if (!doc.contains(key) || doc.at(key).is_null()) return fallback;
  return doc.at(key).get<T>();
}

void reject_unknown(const json& doc, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (const auto& [key, value] : doc.items()) {
    if (!allowed.contains(key)) {
      throw ValidationError("unknown key '" + key + "' in " + where);
    }
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

json artifact(const RunContext& ctx, json body) {
  body["schema_version"] = kSchemaVersion;
  body["invocation"] = ctx.invocation;
  body["seed"] = ctx.seed;
  return body;
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  return out;
}

StudyCollection load_collection(const PipelineConfig& cfg) {
  std::vector<AggregatedTrial> agg;
  std::vector<IpdTrial> ipd;
  for (const auto& p : cfg.aggregated) agg.push_back(load_agg(p));
  for (const auto& p : cfg.ipd) ipd.push_back(load_ipd(p));
  return StudyCollection(std::move(agg), std::move(ipd));
}

struct Bases {
  BasisSpec moments;
  BasisSpec model;
};

Bases make_bases(const PipelineConfig& cfg, Index p) {
  const auto pi = static_cast<int>(p);
  Bases b{BasisSpec::parse(cfg.basis, pi),
          BasisSpec::parse(cfg.model_basis.empty() ? cfg.basis : cfg.model_basis, pi)};
  b.moments.check_covariates(p);
  b.model.check_covariates(p);
  return b;
}

struct PairResult {
  int j = 0;
  int k = 0;
  std::optional<PropensityRatioFit> fit;
  StandardizedEffect effect;
  std::string error;
};

// All estimable (j, k) cells with k > z, ordered by source then target.
std::vector<PairResult> fit_pairs(const StudyCollection& sc, const PipelineConfig& cfg,
                                  bool skip_infeasible, unsigned threads) {
  const Bases bases = make_bases(cfg, sc.num_covariates());
  const int q = sc.q();
  const int z = sc.z();
  std::vector<std::vector<PairResult>> per_source(static_cast<std::size_t>(q - z));
  parallel_for(per_source.size(), threads, [&](std::size_t s) {
    const int k = z + 1 + static_cast<int>(s);
    const auto& src = sc.ipd(k);
    for (int j = 1; j <= q; ++j) {
      PairResult r;
      r.j = j;
      r.k = k;
      try {
        PropensityRatioFit fit;
        if (j == k) {
          fit = identity_fit(src, bases.model, bases.moments);
        } else {
          const auto target = j <= z ? target_from_aggregated(sc.aggregated(j), bases.moments)
                                     : target_from_ipd(sc.ipd(j), bases.moments);
          fit = solve_weights(src, target, bases.model, bases.moments, cfg.solver);
          if (cfg.truncation_percentile < 1.0) {
            fit = truncate_weights(fit, cfg.truncation_percentile);
          }
        }
        r.effect = standardize_effect(src, fit, cfg.scale);
        r.fit = std::move(fit);
      } catch (const InfeasibleError& e) {
        if (!skip_infeasible) throw;
        r.error = e.what();
      } catch (const SolverError& e) {
        if (!skip_infeasible) throw;
        r.error = e.what();
      }
      per_source[s].push_back(std::move(r));
    }
  });
  std::vector<PairResult> out;
  for (auto& v : per_source) {
    for (auto& r : v) out.push_back(std::move(r));
  }
  return out;
}

json studies_json(const StudyCollection& sc) {
  json out = json::array();
  for (int s = 1; s <= sc.q(); ++s) {
    out.push_back({{"study", s},
                   {"original_id", sc.original_id(s)},
                   {"provenance", sc.has_ipd(s) ? "ipd" : "aggregated"},
                   {"n", sc.study_size(s)}});
  }
  return out;
}

void check_reported_scale(const StudyCollection& sc, EffectScale scale) {
  for (int j = 1; j <= sc.z(); ++j) {
    const auto& a = sc.aggregated(j);
    if (a.own_effect.scale != scale) {
      throw ValidationError("study " + std::to_string(sc.original_id(j)) +
                            " reports its own effect on the " + to_string(a.own_effect.scale) +
                            " scale but the analysis uses " + to_string(scale));
    }
  }
}

std::vector<ReconstructedMoments> load_reconstructions(const RunContext& ctx) {
  const auto doc = read_artifact(ctx.out / kReconFile, "recon-cov");
  std::vector<ReconstructedMoments> out;
  for (const auto& t : doc.at("targets")) out.push_back(reconstructed_from_json(t));
  return out;
}

const ReconstructedMoments& find_reconstruction(const std::vector<ReconstructedMoments>& all,
                                                int j) {
  for (const auto& r : all) {
    if (r.target == j) return r;
  }
  throw ValidationError("insufficient aggregated data: cov(L|S=" + std::to_string(j) +
                        ") required but " + std::string(kReconFile) + " has no entry for it");
}

bool has_reconstruction(const std::vector<ReconstructedMoments>& all, int j) {
  return std::any_of(all.begin(), all.end(), [j](const auto& r) { return r.target == j; });
}

std::map<int, Matrix> load_pseudo_rows(const RunContext& ctx, const StudyCollection& sc) {
  const auto doc = read_artifact(ctx.out / kPseudoFile, "pseudo-ipd");
  std::map<int, Matrix> rows;
  for (const auto& p : doc.at("pseudo")) {
    const int j = p.at("study").get<int>();
    const auto trial = load_ipd(ctx.out / p.at("file").get<std::string>());
    if (trial.size() != static_cast<Index>(sc.study_size(j))) {
      throw ValidationError("pseudo data for study " + std::to_string(sc.original_id(j)) +
                            " do not match its reported size");
    }
    rows[j] = trial.covariates;
  }
  return rows;
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& doc, const fs::path& base_dir) {
  PipelineConfig c;
  try {
    if (!doc.is_object()) throw ValidationError("config must be a JSON object");
    reject_unknown(doc,
                   {"ipd", "aggregated", "basis", "model_basis", "truncation_percentile", "scale",
                    "averaging", "target_moments", "meat", "solver", "mcmc", "meta",
                    "simulation"},
                   "config");
    for (const auto& p : get_or(doc, "ipd", std::vector<std::string>{})) {
      c.ipd.push_back(resolve(base_dir, p));
    }
    for (const auto& p : get_or(doc, "aggregated", std::vector<std::string>{})) {
      c.aggregated.push_back(resolve(base_dir, p));
    }
    c.basis = get_or(doc, "basis", c.basis);
    c.model_basis = get_or(doc, "model_basis", c.model_basis);
    c.truncation_percentile = get_or(doc, "truncation_percentile", c.truncation_percentile);
    if (doc.contains("scale")) c.scale = parse_effect_scale(doc.at("scale").get<std::string>());
    const auto averaging = get_or<std::string>(doc, "averaging", "unweighted");
    if (averaging == "unweighted") {
      c.averaging = SourceAveraging::kUnweighted;
    } else if (averaging == "sample_size") {
      c.averaging = SourceAveraging::kSampleSize;
    } else {
      throw ValidationError("averaging must be 'unweighted' or 'sample_size'");
    }
    c.target_moments = get_or(doc, "target_moments", c.target_moments);
    c.meat = get_or(doc, "meat", c.meat);
    if (doc.contains("solver")) {
      const auto& s = doc.at("solver");
      reject_unknown(s, {"grad_tol", "max_iter", "divergence_norm"}, "solver");
      c.solver.grad_tol = get_or(s, "grad_tol", c.solver.grad_tol);
      c.solver.max_iter = get_or(s, "max_iter", c.solver.max_iter);
      c.solver.divergence_norm = get_or(s, "divergence_norm", c.solver.divergence_norm);
    }
    if (doc.contains("mcmc")) {
      const auto& m = doc.at("mcmc");
      reject_unknown(m, {"chains", "adapt", "samples", "thin"}, "mcmc");
      auto& mc = c.meta.mcmc;
      mc.chains = get_or(m, "chains", mc.chains);
      mc.adapt = get_or(m, "adapt", mc.adapt);
      mc.samples = get_or(m, "samples", mc.samples);
      mc.thin = get_or(m, "thin", mc.thin);
    }
    if (doc.contains("meta")) {
      const auto& m = doc.at("meta");
      reject_unknown(m,
                     {"diagonal_use", "dedupe_diagonal", "diagonal_effect", "fixed_omega2",
                      "fixed_tau2", "reml", "draws", "prior_location_variance",
                      "prior_variance_upper"},
                     "meta");
      if (m.contains("diagonal_use")) {
        c.meta.diagonal_use = parse_diagonal_use(m.at("diagonal_use").get<std::string>());
      }
      if (get_or(m, "dedupe_diagonal", false)) c.meta.diagonal_use = DiagonalUse::kDedupe;
      if (m.contains("diagonal_effect")) {
        c.meta.diagonal_effect = parse_diagonal_effect(m.at("diagonal_effect").get<std::string>());
      }
      if (m.contains("fixed_omega2") && !m.at("fixed_omega2").is_null()) {
        c.meta.fixed_omega2 = m.at("fixed_omega2").get<double>();
      }
      if (m.contains("fixed_tau2") && !m.at("fixed_tau2").is_null()) {
        c.meta.fixed_tau2 = m.at("fixed_tau2").get<double>();
      }
      c.reml = get_or(m, "reml", c.reml);
      c.write_draws = get_or(m, "draws", c.write_draws);
      c.meta.priors.location_variance =
          get_or(m, "prior_location_variance", c.meta.priors.location_variance);
      c.meta.priors.variance_upper = get_or(m, "prior_variance_upper", c.meta.priors.variance_upper);
    }
    if (doc.contains("simulation")) c.simulation = doc.at("simulation");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  return from_json(doc, path.parent_path());
}

void PipelineConfig::validate() const {
  if (ipd.empty()) throw ValidationError("config lists no IPD files");
  for (const auto& list : {ipd, aggregated}) {
    for (const auto& p : list) {
      if (!fs::exists(p)) throw ValidationError("input file not found: " + p.string());
    }
  }
  if (!(truncation_percentile > 0.0 && truncation_percentile <= 1.0)) {
    throw ValidationError("truncation_percentile must lie in (0, 1]");
  }
  if (target_moments != "reconstruction" && target_moments != "pseudo") {
    throw ValidationError("target_moments must be 'reconstruction' or 'pseudo'");
  }
  if (meat != "blocks" && meat != "stacking") {
    throw ValidationError("meat must be 'blocks' or 'stacking'");
  }
  if (meat == "stacking" && target_moments != "pseudo") {
    throw ValidationError("meat 'stacking' needs participant rows; set target_moments to 'pseudo'");
  }
}

json read_artifact(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw ValidationError("missing artifact " + path.string() + "; run '" + producer +
                          "' first with the same --out directory");
  }
  std::ifstream in(path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  const int version = get_or(doc, "schema_version", -1);
  if (version != kSchemaVersion) {
    throw ValidationError("schema-version mismatch in " + path.string() + ": found " +
                          std::to_string(version) + ", expected " +
                          std::to_string(kSchemaVersion));
  }
  return doc;
}

void cmd_standardize(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  cfg.validate();
  const auto sc = load_collection(cfg);
  check_reported_scale(sc, cfg.scale);
  const auto pairs = fit_pairs(sc, cfg, ctx.skip_infeasible, ctx.threads);
  json estimates = json::array();
  json skipped = json::array();
  for (const auto& r : pairs) {
    if (!r.fit) {
      skipped.push_back({{"j", r.j}, {"k", r.k}, {"error", r.error}});
      std::cerr << "warning: skipped theta(" << r.j << "," << r.k << "): " << r.error << '\n';
      continue;
    }
    estimates.push_back({{"j", r.j},
                         {"k", r.k},
                         {"est", r.effect.estimate},
                         {"risk_treated", r.effect.risk_treated},
                         {"risk_control", r.effect.risk_control},
                         {"weights", to_json(*r.fit)}});
  }
  json reported = json::array();
  for (int j = 1; j <= sc.z(); ++j) {
    const auto& e = sc.aggregated(j).own_effect;
    reported.push_back({{"j", j}, {"k", j}, {"est", e.estimate}, {"se", e.se}});
  }
  fs::create_directories(ctx.out);
  write_json(ctx.out / kStandardizeFile,
             artifact(ctx, {{"scale", to_string(cfg.scale)},
                            {"q", sc.q()},
                            {"z", sc.z()},
                            {"studies", studies_json(sc)},
                            {"estimates", estimates},
                            {"reported", reported},
                            {"skipped", skipped}}));
}

void cmd_recon_cov(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  cfg.validate();
  const auto sc = load_collection(cfg);
  const Bases bases = make_bases(cfg, sc.num_covariates());
  std::vector<std::optional<ReconstructedMoments>> recon(static_cast<std::size_t>(sc.z()));
  std::vector<std::string> errors(recon.size());
  parallel_for(recon.size(), ctx.threads, [&](std::size_t i) {
    const int j = static_cast<int>(i) + 1;
    try {
      recon[i] = reconstruct_covariance(sc.aggregated(j), sc.ipd_trials(), bases.model,
                                        bases.moments, cfg.solver, cfg.averaging);
    } catch (const InfeasibleError& e) {
      if (!ctx.skip_infeasible) throw;
      errors[i] = e.what();
    }
  });
  json targets = json::array();
  json baseline = json::array();
  json skipped = json::array();
  for (std::size_t i = 0; i < recon.size(); ++i) {
    if (!recon[i]) {
      const int j = static_cast<int>(i) + 1;
      std::cerr << "warning: skipped cov(L|S=" << j << "): " << errors[i] << '\n';
      skipped.push_back({{"study", j}, {"original_id", sc.original_id(j)}, {"error", errors[i]}});
      continue;
    }
    const auto& r = *recon[i];
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
    auto t = to_json(r);
    t["original_id"] = sc.original_id(r.target);
    targets.push_back(t);
    auto b = to_json(correlation_extrapolation(sc.aggregated(r.target), sc.ipd_trials()));
    b["original_id"] = sc.original_id(r.target);
    baseline.push_back(b);
  }
  fs::create_directories(ctx.out);
  write_json(ctx.out / kReconFile,
             artifact(ctx, {{"q", sc.q()},
                            {"z", sc.z()},
                            {"model", bases.model.to_string()},
                            {"moments", bases.moments.to_string()},
                            {"targets", targets},
                            {"baseline", baseline},
                            {"skipped", skipped}}));
}

void cmd_pseudo_ipd(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  cfg.validate();
  const auto sc = load_collection(cfg);
  const auto recon = load_reconstructions(ctx);
  json pseudo = json::array();
  for (int j = 1; j <= sc.z(); ++j) {
    if (ctx.skip_infeasible && !has_reconstruction(recon, j)) continue;
    const auto& r = find_reconstruction(recon, j);
    auto trial = make_pseudo_trial(sc.aggregated(j), r,
                                   derive_seed(ctx.seed, {static_cast<std::uint64_t>(j)}));
    for (const auto& w : trial.warnings) std::cerr << "warning: " << w << '\n';
    const std::string file = "pseudo_study" + std::to_string(sc.original_id(j)) + ".csv";
    trial.data.study_id = sc.original_id(j);
    save_ipd(ctx.out / file, trial.data, true);
    trial.data.study_id = j;
    auto entry = to_json(trial);
    entry["study"] = j;
    entry["original_id"] = sc.original_id(j);
    entry["file"] = file;
    pseudo.push_back(entry);
  }
  write_json(ctx.out / kPseudoFile, artifact(ctx, {{"pseudo", pseudo}}));
}

void cmd_variance(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  cfg.validate();
  const auto sc = load_collection(cfg);
  check_reported_scale(sc, cfg.scale);
  const Bases bases = make_bases(cfg, sc.num_covariates());
  const auto standardized = read_artifact(ctx.out / kStandardizeFile, "standardize");
  if (standardized.at("q").get<int>() != sc.q() || standardized.at("z").get<int>() != sc.z() ||
      standardized.at("scale").get<std::string>() != to_string(cfg.scale)) {
    throw ValidationError(std::string(kStandardizeFile) +
                          " was produced from a different study set or scale");
  }
  std::set<std::pair<int, int>> skipped;
  for (const auto& s : standardized.at("skipped")) {
    skipped.insert({s.at("j").get<int>(), s.at("k").get<int>()});
  }
  std::map<std::pair<int, int>, double> recorded;
  for (const auto& e : standardized.at("estimates")) {
    recorded[{e.at("j").get<int>(), e.at("k").get<int>()}] = e.at("est").get<double>();
  }

  const auto pairs = fit_pairs(sc, cfg, !skipped.empty(), ctx.threads);
  std::map<int, std::vector<StackTarget>> stacks;
  for (const auto& r : pairs) {
    const bool was_skipped = skipped.contains({r.j, r.k});
    if (!r.fit) {
      if (!was_skipped) throw ValidationError("theta(" + std::to_string(r.j) + "," +
                                              std::to_string(r.k) + ") failed: " + r.error);
      continue;
    }
    if (was_skipped) continue;
    const auto it = recorded.find({r.j, r.k});
    if (it == recorded.end() ||
        std::abs(it->second - r.effect.estimate) > 1e-12 * std::max(1.0, std::abs(it->second))) {
      throw ValidationError(std::string(kStandardizeFile) + " is stale for theta(" +
                            std::to_string(r.j) + "," + std::to_string(r.k) +
                            "); rerun 'standardize'");
    }
    stacks[r.k].push_back(StackTarget{*r.fit, sc.study_size(r.j)});
  }

  // Target-side moments, for the populations that still have estimates.
  std::set<int> needed;
  for (const auto& [k, targets] : stacks) {
    for (const auto& t : targets) needed.insert(t.fit.target);
  }
  std::map<int, TargetMoments> moments;
  std::map<int, Matrix> rows;
  for (int j = sc.z() + 1; j <= sc.q(); ++j) {
    rows[j] = sc.ipd(j).covariates;
    moments[j] = target_moments_from_rows(j, rows[j], bases.moments);
  }
  const bool aggregated_needed = !needed.empty() && *needed.begin() <= sc.z();
  if (aggregated_needed) {
    if (cfg.target_moments == "pseudo") {
      for (auto& [j, m] : load_pseudo_rows(ctx, sc)) {
        moments[j] = target_moments_from_rows(j, m, bases.moments);
        rows[j] = std::move(m);
      }
      for (const int j : needed) {
        if (j <= sc.z() && !rows.contains(j)) {
          throw ValidationError("no pseudo data for study " + std::to_string(sc.original_id(j)) +
                                " in " + kPseudoFile);
        }
      }
    } else {
      const auto recon = load_reconstructions(ctx);
      for (const int j : needed) {
        if (j > sc.z()) continue;
        moments[j] = target_moments_from_reconstruction(find_reconstruction(recon, j),
                                                        sc.study_size(j), bases.moments);
      }
    }
  }

  const double pooled = sc.total_size();
  std::vector<int> sources;
  for (const auto& [k, targets] : stacks) sources.push_back(k);
  std::vector<SandwichResult> results(sources.size());
  parallel_for(sources.size(), ctx.threads, [&](std::size_t i) {
    const int k = sources[i];
    const EstimatingStack stack(sc.ipd(k), stacks.at(k), pooled, cfg.scale);
    results[i] = cfg.meat == "stacking" ? sandwich_by_stacking(stack, rows)
                                        : sandwich(stack, moments);
  });
  const auto table = assemble_effect_covariance(sc.q(), sc.z(), results, sc.aggregated_trials());
  json per_source = json::array();
  for (const auto& r : results) {
    auto j = to_json(r);
    j["original_id"] = sc.original_id(r.source);
    per_source.push_back(j);
  }
  write_json(ctx.out / kEffectTableFile,
             artifact(ctx, {{"scale", to_string(cfg.scale)},
                            {"target_moments", cfg.target_moments},
                            {"meat", cfg.meat},
                            {"studies", studies_json(sc)},
                            {"table", to_json(table)},
                            {"sandwich", per_source}}));
}

void cmd_meta(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  const auto doc = read_artifact(ctx.out / kEffectTableFile, "variance");
  const auto table = effect_table_from_json(doc.at("table"));
  MetaOptions options = cfg.meta;
  options.threads = ctx.threads;
  const auto post = fit_submodel_mcmc(table, options, ctx.seed);
  for (const auto& w : post.warnings) std::cerr << "warning: " << w << '\n';

  json body = {{"posterior", to_json(post)}};
  if (doc.contains("studies")) body["studies"] = doc.at("studies");
  std::optional<RemlFit> reml;
  if (cfg.reml) {
    try {
      reml = fit_submodel_reml(table, options);
      body["reml"] = to_json(*reml);
    } catch (const Error& e) {
      body["reml_error"] = e.what();
      std::cerr << "warning: REML fit failed: " << e.what() << '\n';
    }
  }
  write_json(ctx.out / kPosteriorFile, artifact(ctx, body));

  if (cfg.write_draws) {
    auto out = open_out(ctx.out / kDrawsFile);
    write_draws_csv(out, post);
  }
  auto forest = open_out(ctx.out / kForestFile);
  forest << "population,original_id,median,lower,upper" << (reml ? ",reml" : "") << '\n';
  forest.precision(10);
  std::map<int, int> original;
  if (doc.contains("studies")) {
    for (const auto& s : doc.at("studies")) {
      original[s.at("study").get<int>()] = s.at("original_id").get<int>();
    }
  }
  for (int j = 1; j <= table.q; ++j) {
    const auto s = population_summary(post, j);
    forest << j << ',' << (original.contains(j) ? original[j] : j) << ',' << s.median << ','
           << s.lower << ',' << s.upper;
    if (reml) forest << ',' << reml->theta + reml->beta[static_cast<std::size_t>(j - 1)];
    forest << '\n';
  }
}

void cmd_pipeline(const RunContext& ctx) {
  ctx.config.validate();
  fs::create_directories(ctx.out);
  cmd_standardize(ctx);
  if (!ctx.config.aggregated.empty()) {
    cmd_recon_cov(ctx);
    cmd_pseudo_ipd(ctx);
  }
  cmd_variance(ctx);
  cmd_meta(ctx);
}

void cmd_simulate(const RunContext& ctx, const SimulateOptions& options) {
  const auto& sim = ctx.config.simulation;
  fs::create_directories(ctx.out);
  try {
    if (options.setting == "1" || options.setting == "2") {
      TransportSimConfig c;
      c.setting = options.setting == "1" ? 1 : 2;
      c.n = options.n.value_or(get_or<Index>(sim, "n", c.n));
      c.replicates = options.replicates.value_or(get_or(sim, "replicates", c.replicates));
      c.truth_draws = get_or<Index>(sim, "truth_draws", c.truth_draws);
      c.oracle_weights = options.oracle_weights || get_or(sim, "oracle_weights", false);
      c.seed = ctx.seed;
      c.threads = ctx.threads;
      const auto report = run_transport_sim(c);
      auto csv = open_out(ctx.out / "sim_report.csv");
      write_report_csv(csv, report);
      write_json(ctx.out / "sim_report.json", artifact(ctx, to_json(report)));
      write_report_csv(std::cout, report);
      return;
    }
    if (options.setting == "meta") {
      MetaSimConfig c;
      c.q = options.q.value_or(get_or(sim, "q", c.q));
      c.z = options.z.value_or(get_or(sim, "z", c.z));
      c.replicates = options.replicates.value_or(get_or(sim, "replicates", c.replicates));
      c.sigma_seed = get_or<std::uint64_t>(sim, "sigma_seed", c.sigma_seed);
      c.theta = get_or(sim, "theta", c.theta);
      c.omega2 = get_or(sim, "omega2", c.omega2);
      c.xi2 = get_or(sim, "xi2", c.xi2);
      c.options = ctx.config.meta;
      c.seed = ctx.seed;
      c.threads = ctx.threads;
      const auto report = run_meta_sim(c);
      auto csv = open_out(ctx.out / "meta_sim.csv");
      write_meta_sim_csv(csv, report);
      const auto doc = artifact(ctx, to_json(report));
      write_json(ctx.out / "meta_sim.json", doc);
      std::cout << doc.at("summary").dump(2) << '\n';
      return;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("simulation config: ") + e.what());
  }
  throw ValidationError("unknown simulation setting '" + options.setting + "' (1|2|meta)");
}

int exit_code(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->kind()) {
      case ErrorKind::kValidation: return 2;
      case ErrorKind::kNumerical: return 3;
      case ErrorKind::kInfeasible: return 4;
    }
  }
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return 2;
  return 1;
}

}  // namespace causalmeta::cli
