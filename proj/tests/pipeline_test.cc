#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "soa/errors.h"
#include "soa/pipeline/experiment.h"
#include "soa/surgery/checkpoint.h"
#include "test_util.h"

namespace soa::pipeline {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// A few steps on a handful of utterances; enough to exercise every stage.
json SmallConfigJson(uint64_t seed = 3) {
  const json stage = {{"total_steps", 3}, {"batch_size", 2}};
  return {{"seed", seed},
          {"corpora",
           {{"source_unlabeled", 8},
            {"source_labeled", 8},
            {"target_unlabeled", 8},
            {"dev", 4},
            {"test", 4},
            {"min_tokens", 3},
            {"max_tokens", 5}}},
          {"stages", {{"pretrain", stage}, {"finetune", stage}, {"continual_pretrain", stage}}},
          {"probe", {{"num_vowels", 2}, {"step_hz", 200.0}}}};
}

ExperimentConfig SmallConfig(uint64_t seed = 3) { return ParseExperimentConfig(SmallConfigJson(seed).dump()); }

std::string ConfigErrorText(const json& j) {
  try {
    ParseExperimentConfig(j.dump());
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, ErrorsNameTheOffendingPath) {
  json j = SmallConfigJson();
  j["stages"]["finetune"]["total_steps"] = -1;
  EXPECT_NE(ConfigErrorText(j).find("config.stages.finetune.total_steps"), std::string::npos);
  j = SmallConfigJson();
  j["corpora"]["colour"] = 1;
  EXPECT_NE(ConfigErrorText(j).find("config.corpora.colour"), std::string::npos);
  j = SmallConfigJson();
  j["stages"]["pretrain"]["scheduler"] = {{"kind", "cosine"}};
  EXPECT_NE(ConfigErrorText(j).find("config.stages.pretrain.scheduler.kind"), std::string::npos);
  j = SmallConfigJson();
  j["stages"]["finetune"]["freeze"] = json::array();
  EXPECT_NE(ConfigErrorText(j).find("finetune"), std::string::npos);
  j = SmallConfigJson();
  j["probe"]["pooling"] = "median";
  EXPECT_NE(ConfigErrorText(j).find("config.probe.pooling"), std::string::npos);
  EXPECT_FALSE(ConfigErrorText(json::array()).empty());
  EXPECT_THROW(ParseExperimentConfig("{"), ConfigError);
  EXPECT_THROW(LoadExperimentConfig("/nonexistent/config.json"), ConfigError);
}

TEST(Config, JsonRoundTripKeepsDigest) {
  const ExperimentConfig a = SmallConfig();
  const ExperimentConfig b = ParseExperimentConfig(a.ToJson());
  EXPECT_EQ(a.ToJson(), b.ToJson());
  EXPECT_EQ(a.Digest(), b.Digest());
  EXPECT_NE(a.Digest(), SmallConfig(4).Digest());
}

TEST(Config, SourceDigestIgnoresTargetSide) {
  json j = SmallConfigJson();
  const ExperimentConfig a = ParseExperimentConfig(j.dump());
  j["stages"]["continual_pretrain"]["total_steps"] = 7;
  j["corpora"]["target_fraction"] = 0.5;
  const ExperimentConfig b = ParseExperimentConfig(j.dump());
  EXPECT_NE(a.Digest(), b.Digest());
  EXPECT_EQ(a.SourceDigest(), b.SourceDigest());
  j["stages"]["finetune"]["total_steps"] = 7;
  EXPECT_NE(ParseExperimentConfig(j.dump()).SourceDigest(), a.SourceDigest());
}

TEST(Corpora, SplitsHaveConfiguredSizesAndLabels) {
  const ExperimentConfig cfg = SmallConfig();
  const Corpora c = SynthesizeCorpora(cfg);
  EXPECT_EQ(c.source_unlabeled.utterances.size(), 8u);
  EXPECT_EQ(c.target_eval.at("test").utterances.size(), 4u);
  for (const auto& u : c.source_unlabeled.utterances) EXPECT_FALSE(u.transcript.has_value());
  for (const auto& u : c.source_labeled.utterances) EXPECT_TRUE(u.transcript.has_value());
  EXPECT_NE(c.source_eval.at("test").utterances[0].samples, c.target_eval.at("test").utterances[0].samples);
}

// Upper binomial tail by exact integer counting.
double SignTestOracle(int wins, int trials) {
  std::vector<double> row = {1.0};
  for (int n = 0; n < trials; ++n) {
    std::vector<double> next(row.size() + 1, 0.0);
    for (size_t k = 0; k < row.size(); ++k) {
      next[k] += row[k];
      next[k + 1] += row[k];
    }
    row = next;
  }
  double tail = 0.0;
  for (int k = wins; k <= trials; ++k) tail += row[k];
  return tail / std::ldexp(1.0, trials);
}

TEST(SignTest, MatchesExactTail) {
  EXPECT_DOUBLE_EQ(SignTestPValue(0, 0), 1.0);
  EXPECT_NEAR(SignTestPValue(24, 24), std::ldexp(1.0, -24), 1e-18);
  for (int n = 1; n <= 30; ++n)
    for (int w = 0; w <= n; ++w) EXPECT_NEAR(SignTestPValue(w, n), SignTestOracle(w, n), 1e-12);
  EXPECT_THROW(SignTestPValue(5, 4), ContractError);
}

TEST(Vowels, CycleThroughScaledInventory) {
  const ExperimentConfig cfg = SmallConfig();
  const auto v = DomainVowels(cfg.target, cfg.target.vocabulary_size() + 1, 5);
  ASSERT_EQ(v.size(), static_cast<size_t>(cfg.target.vocabulary_size() + 1));
  for (size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(v[0].second[k], cfg.target.symbols[0].formants_hz[k] * 1.3, 1e-9);
    EXPECT_EQ(v.back().second[k], v[0].second[k]);
  }
  EXPECT_EQ(ProbeVowel().formants_hz[0], 568.0);
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new std::string(testing::TempDir("pipeline"));
    first_ = new ExperimentReport(RunPipeline(SmallConfig(), *dir_));
    second_ = new ExperimentReport(RunPipeline(SmallConfig(), *dir_));
  }
  static void TearDownTestSuite() {
    delete first_;
    delete second_;
    delete dir_;
  }
  static inline std::string* dir_ = nullptr;
  static inline ExperimentReport* first_ = nullptr;
  static inline ExperimentReport* second_ = nullptr;
};

TEST_F(PipelineTest, WritesArtifacts) {
  const fs::path root(*dir_);
  for (const char* f : {"config.json", "summary.json", "reports/wer.csv", "reports/flops.csv",
                        "reports/probe_M2.csv", "reports/probe_M4.csv", "reports/probe_prominence.csv",
                        "logs/pretrain.csv", "logs/continual_pretrain.csv"})
    EXPECT_TRUE(fs::exists(root / f)) << f;
  for (const char* m : {"M1", "M2", "M3", "M4"}) EXPECT_NO_THROW(surgery::LoadCheckpoint((root / "checkpoints" / m).string()));
  std::ifstream in(root / "summary.json");
  const json s = json::parse(in);
  EXPECT_EQ(s["wer"]["test"]["M2"]["source"].get<double>(), first_->Wer("M2", "source"));
  EXPECT_EQ(s["checkpoints"]["M4"].get<std::string>(), first_->m4.Digest());
  EXPECT_EQ(first_->wer.size(), 4u);
}

TEST_F(PipelineTest, SecondRunReusesSourceModels) {
  ASSERT_EQ(second_->stages.size(), 4u);
  EXPECT_FALSE(first_->stages[0].cached);
  EXPECT_TRUE(second_->stages[0].cached);
  EXPECT_TRUE(second_->stages[1].cached);
  EXPECT_FALSE(second_->stages[2].cached);
  EXPECT_EQ(first_->m2, second_->m2);
  EXPECT_EQ(first_->m4, second_->m4);
  for (const auto& c : first_->wer) EXPECT_EQ(c.report.wer, second_->Wer(c.model, c.domain));
}

TEST_F(PipelineTest, M4DescendsFromM2AndM3) {
  const auto m3 = surgery::LoadCheckpoint((fs::path(*dir_) / "checkpoints" / "M3").string());
  EXPECT_TRUE(surgery::IsRecordedParent(first_->m4, first_->m2));
  EXPECT_TRUE(surgery::IsRecordedParent(first_->m4, m3));
  EXPECT_EQ(surgery::ExtractComponent(first_->m4, "feature_encoder"), surgery::ExtractComponent(m3, "feature_encoder"));
  EXPECT_EQ(surgery::ExtractComponent(first_->m4, "contextual_encoder"),
            surgery::ExtractComponent(first_->m2, "contextual_encoder"));
}

TEST(Pipeline, ZeroAdaptationStepsReproducesM2) {
  json j = SmallConfigJson();
  j["stages"]["continual_pretrain"]["total_steps"] = 0;
  j["probe"]["enabled"] = false;
  PipelineOptions o;
  o.write_artifacts = false;
  const ExperimentReport r = RunPipeline(ParseExperimentConfig(j.dump()), "", o);
  EXPECT_EQ(r.m4.params, r.m2.params);
  for (const char* d : {"source", "target"}) EXPECT_EQ(r.Wer("M4", d), r.Wer("M2", d));
}

TEST(Pipeline, IsReproducibleWithoutCache) {
  json j = SmallConfigJson();
  j["probe"]["enabled"] = false;
  PipelineOptions o;
  o.write_artifacts = false;
  const ExperimentReport a = RunPipeline(ParseExperimentConfig(j.dump()), "", o);
  const ExperimentReport b = RunPipeline(ParseExperimentConfig(j.dump()), "", o);
  EXPECT_EQ(a.m4.Digest(), b.m4.Digest());
  EXPECT_EQ(a.m2.Digest(), b.m2.Digest());
  j["seed"] = 4;
  EXPECT_NE(RunPipeline(ParseExperimentConfig(j.dump()), "", o).m2.Digest(), a.m2.Digest());
}

int RunCli(const std::string& args) {
  const int status = std::system((std::string(SOA_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodesFollowErrorKinds) {
  const std::string dir = testing::TempDir("cli");
  const std::string cfg = dir + "/exp.json";
  std::ofstream(cfg) << SmallConfigJson().dump();
  std::ofstream(dir + "/bad.json") << R"({"stages": {"finetune": {"batch_size": 0}}})";
  EXPECT_EQ(RunCli("flops --seconds 39121 --devices 2 --tflops 19.17"), 0);
  EXPECT_EQ(RunCli("--bogus"), 2);
  EXPECT_EQ(RunCli("pipeline --config " + dir + "/bad.json"), 2);
  EXPECT_EQ(RunCli("eval --checkpoint " + dir + "/missing"), 5);
  EXPECT_EQ(RunCli("pretrain --config " + cfg + " --out " + dir + "/m1"), 0);
  const std::string m1 = dir + "/m1/checkpoints/M1";
  ASSERT_NO_THROW(surgery::LoadCheckpoint(m1));
  EXPECT_EQ(RunCli("finetune --config " + cfg + " --init " + m1 + " --out " + dir + "/m2"), 0);
  EXPECT_EQ(RunCli("adapt --config " + cfg + " --init " + m1 + " --out " + dir + "/m3"), 0);
  EXPECT_EQ(RunCli("combine --theta " + dir + "/m3/checkpoints/M3 --phi " + dir + "/m2/checkpoints/M2 --out " +
                   dir + "/m4"),
            0);
  EXPECT_EQ(RunCli("eval --config " + cfg + " --checkpoint " + dir + "/m4"), 0);
  EXPECT_EQ(RunCli("eval --config " + cfg + " --checkpoint " + m1), 4);
  EXPECT_EQ(RunCli("combine --theta " + m1 + " --phi " + m1 + " --out " + dir + "/bad"), 4);
}

}  // namespace
}  // namespace soa::pipeline
