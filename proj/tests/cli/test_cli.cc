#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "causalmeta/json_util.h"
#include "commands.h"
#include "fixture.h"

namespace causalmeta::cli {
namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("causalmeta_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    testing::write_fixture(root_ / "data", 2024);
  }
  void TearDown() override { fs::remove_all(root_); }

  RunContext context(const std::string& out, std::uint64_t seed = 7) const {
    RunContext ctx;
    ctx.config = PipelineConfig::load(root_ / "data" / "config.json");
    ctx.config.meta.mcmc.adapt = 1000;
    ctx.config.meta.mcmc.samples = 300;
    ctx.seed = seed;
    ctx.out = root_ / out;
    ctx.invocation = "test";
    return ctx;
  }

  int run_binary(const std::string& args) const {
    const std::string cmd = std::string(CAUSALMETA_CLI_PATH) + " " + args + " > " +
                            (root_ / "stdout.txt").string() + " 2> " +
                            (root_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path root_;
};

TEST_F(CliTest, StandardizeCoversAvailableCells) {
  const auto ctx = context("out");
  fs::create_directories(ctx.out);
  cmd_standardize(ctx);
  const auto doc = read_artifact(ctx.out / kStandardizeFile, "standardize");
  // 3 IPD columns x 5 populations = 12 transported cells + 3 IPD diagonals.
  EXPECT_EQ(doc.at("estimates").size(), 15u);
  int diagonals = 0;
  for (const auto& e : doc.at("estimates")) {
    EXPECT_GT(e.at("k").get<int>(), 2);
    diagonals += e.at("j") == e.at("k");
  }
  EXPECT_EQ(diagonals, 3);
  EXPECT_EQ(doc.at("reported").size(), 2u);
  EXPECT_EQ(doc.at("scale"), "log-rr");
  EXPECT_EQ(doc.at("schema_version"), kSchemaVersion);
  EXPECT_EQ(doc.at("invocation"), "test");
}

TEST_F(CliTest, PipelineEmitsAllArtifactsAndForest) {
  const auto ctx = context("out");
  cmd_pipeline(ctx);
  for (const char* f : {kStandardizeFile, kReconFile, kPseudoFile, kEffectTableFile,
                        kPosteriorFile, kDrawsFile, kForestFile}) {
    EXPECT_TRUE(fs::exists(ctx.out / f)) << f;
  }
  EXPECT_TRUE(fs::exists(ctx.out / "pseudo_study1.csv"));
  std::ifstream forest(ctx.out / kForestFile);
  std::string line;
  std::getline(forest, line);
  EXPECT_EQ(line.rfind("population,original_id,median,lower,upper", 0), 0u);
  int rows = 0;
  while (std::getline(forest, line)) ++rows;
  EXPECT_EQ(rows, 5);
  const auto post = read_artifact(ctx.out / kPosteriorFile, "meta");
  EXPECT_EQ(post.at("posterior").at("population").size(), 5u);
  EXPECT_TRUE(post.contains("reml"));
}

TEST_F(CliTest, SameSeedByteIdenticalArtifacts) {
  auto a = context("a");
  auto b = context("b");
  b.threads = 2;
  a.invocation = b.invocation = "same";
  cmd_pipeline(a);
  cmd_pipeline(b);
  for (const char* f : {kStandardizeFile, kReconFile, kPseudoFile, kEffectTableFile,
                        kPosteriorFile, kDrawsFile, kForestFile}) {
    EXPECT_EQ(slurp(a.out / f), slurp(b.out / f)) << f;
  }
}

TEST_F(CliTest, StackingMeatAgreesWithBlocks) {
  auto blocks = context("blocks");
  blocks.config.target_moments = "pseudo";
  cmd_pipeline(blocks);
  auto stacking = context("stacking");
  stacking.config.target_moments = "pseudo";
  stacking.config.meat = "stacking";
  cmd_pipeline(stacking);
  const auto x = read_artifact(blocks.out / kEffectTableFile, "variance").at("table");
  const auto y = read_artifact(stacking.out / kEffectTableFile, "variance").at("table");
  const auto tx = effect_table_from_json(x);
  const auto ty = effect_table_from_json(y);
  EXPECT_LT((tx.sigma - ty.sigma).cwiseAbs().maxCoeff(), 1e-10 * tx.sigma.cwiseAbs().maxCoeff());
}

TEST_F(CliTest, MetaWithoutEffectTableNamesMissingFile) {
  const auto ctx = context("empty");
  try {
    cmd_meta(ctx);
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(kEffectTableFile), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("variance"), std::string::npos) << e.what();
  }
}

TEST_F(CliTest, SchemaVersionMismatchRejected) {
  const auto ctx = context("out");
  fs::create_directories(ctx.out);
  cmd_standardize(ctx);
  auto doc = nlohmann::json::parse(slurp(ctx.out / kStandardizeFile));
  doc["schema_version"] = kSchemaVersion + 1;
  std::ofstream(ctx.out / kStandardizeFile) << doc.dump();
  EXPECT_THROW(cmd_variance(ctx), ValidationError);
}

TEST_F(CliTest, UnknownConfigKeyRejected) {
  const nlohmann::json doc = {{"ipd", {"a.csv"}}, {"truncaton_percentile", 0.9}};
  EXPECT_THROW(PipelineConfig::from_json(doc, root_), ValidationError);
}

TEST_F(CliTest, PercentileOutsideRangeRejected) {
  auto ctx = context("out");
  ctx.config.truncation_percentile = 0.0;
  EXPECT_THROW(ctx.config.validate(), ValidationError);
}

TEST_F(CliTest, ExitCodes) {
  const auto cfg = (root_ / "data" / "config.json").string();
  EXPECT_EQ(run_binary("--config " + cfg + " --out " + (root_ / "o").string() + " standardize"), 0);
  EXPECT_EQ(run_binary("--out " + (root_ / "none").string() + " meta"), 2);
  EXPECT_EQ(run_binary("--config " + (root_ / "missing.json").string() + " standardize"), 2);

  // A target whose mean age lies beyond every source: no overlap.
  auto agg = nlohmann::json::parse(slurp(root_ / "data" / "study1.json"));
  for (auto& arm : agg["arms"]) {
    arm["mean_l"][1] = 95.0;
    arm["raw2_l"][1] = 95.0 * 95.0 + 4.0;
  }
  std::ofstream(root_ / "data" / "study1.json") << agg.dump();
  EXPECT_EQ(run_binary("--config " + cfg + " --out " + (root_ / "o2").string() + " standardize"), 4);
  EXPECT_EQ(run_binary("--config " + cfg + " --out " + (root_ / "o3").string() +
                       " --skip-infeasible pipeline"),
            0);
  const auto doc = read_artifact(root_ / "o3" / kStandardizeFile, "standardize");
  EXPECT_EQ(doc.at("skipped").size(), 3u);
}

TEST_F(CliTest, SimulateWritesTableRows) {
  EXPECT_EQ(run_binary("--out " + (root_ / "sim").string() +
                       " --seed 3 simulate --setting 1 --n 500 --reps 5"),
            0);
  std::ifstream csv(root_ / "sim" / "sim_report.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header.rfind("Setting,Parameter,n,Bias,var,var_hat_median,MSE,Coverage", 0), 0u);
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(rows, 2);
}

}  // namespace
}  // namespace causalmeta::cli
