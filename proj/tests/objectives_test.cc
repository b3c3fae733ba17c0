#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "soa/autodiff/grad_check.h"
#include "soa/autodiff/ops.h"
#include "soa/errors.h"
#include "soa/model/model.h"
#include "soa/objectives/objectives.h"
#include "soa/util/random.h"
#include "test_util.h"

namespace soa::objectives {
namespace {

using ad::Tensor;

TEST(Mask, ZeroProbabilityForcesOneSpan) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const MaskPlan p = SampleMask(50, 0.0, 10, seed);
    EXPECT_EQ(p.num_masked(), 10);
    const auto pos = p.masked_positions();
    EXPECT_EQ(pos.back() - pos.front(), 9);
  }
  EXPECT_EQ(SampleMask(50, 0.0, 10, 1, false).num_masked(), 0);
}

TEST(Mask, FullProbabilityMasksEverything) {
  EXPECT_EQ(SampleMask(37, 1.0, 1, 3).num_masked(), 37);
}

TEST(Mask, CoverageMatchesAnalyticOracle) {
  // Frame t is covered unless none of the min(t + 1, M) frames that could
  // start a span over it did.
  const int64_t T = 500, M = 10;
  const double p = 0.065;
  double expect = 0.0;
  for (int64_t t = 0; t < T; ++t) expect += 1.0 - std::pow(1.0 - p, std::min<int64_t>(t + 1, M));
  expect /= T;
  double mean = 0.0;
  for (uint64_t seed = 0; seed < 1000; ++seed) mean += SampleMask(T, p, M, seed).num_masked() / double(T);
  mean /= 1000;
  EXPECT_NEAR(mean, expect, 0.05);
  EXPECT_NEAR(mean, expect, 0.005);
}

TEST(Mask, DeterministicAndValidated) {
  EXPECT_EQ(SampleMask(100, 0.1, 5, 9).mask, SampleMask(100, 0.1, 5, 9).mask);
  EXPECT_THROW(SampleMask(10, 1.5, 2, 1), ContractError);
  EXPECT_THROW(SampleMask(10, 0.1, 11, 1), ContractError);
}

TEST(Distractors, NeverTheTrueTarget) {
  const auto d = SampleDistractors(7, 20, 4);
  for (int64_t i = 0; i < 7; ++i) {
    ASSERT_EQ(d[i].size(), 20u);
    for (int64_t j : d[i]) {
      EXPECT_NE(j, i);
      EXPECT_GE(j, 0);
      EXPECT_LT(j, 7);
    }
  }
  EXPECT_THROW(SampleDistractors(1, 1, 1), ContractError);
}

ContrastiveBatch EqualSimilarityBatch(int64_t k) {
  const int64_t n = k + 1;
  std::vector<double> rows;
  for (int64_t i = 0; i < n; ++i) rows.insert(rows.end(), {0.6, 0.8});
  ContrastiveBatch b;
  b.contexts = Tensor::Constant({n, 2}, rows);
  b.targets = Tensor::Constant({n, 2}, rows);
  b.distractors.assign(n, {});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      if (j != i) b.distractors[i].push_back(j);
  return b;
}

TEST(Contrastive, EqualSimilaritiesGiveLogOfCandidates) {
  EXPECT_NEAR(ContrastiveLoss(EqualSimilarityBatch(1)).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(ContrastiveLoss(EqualSimilarityBatch(99)).item(), 4.605170185988091, 1e-12);
  for (int64_t k : {2, 5, 17}) EXPECT_NEAR(ContrastiveLoss(EqualSimilarityBatch(k)).item(), std::log(k + 1.0), 1e-12);
}

TEST(Contrastive, OppositeDistractorAtUnitTemperature) {
  ContrastiveBatch b;
  b.contexts = Tensor::Constant({2, 2}, {1.0, 0.0, -1.0, 0.0});
  b.targets = Tensor::Constant({2, 2}, {1.0, 0.0, -1.0, 0.0});
  b.distractors = {{1}, {0}};
  b.temperature = 1.0;
  EXPECT_NEAR(ContrastiveLoss(b).item(), 0.12692801104297263, 1e-12);
}

TEST(Contrastive, NonNegativeAndRejectsZeroVectors) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    ContrastiveBatch b;
    b.contexts = testing::RandomConstant({6, 4}, 100 + i);
    b.targets = testing::RandomConstant({6, 4}, 200 + i);
    b.distractors = SampleDistractors(6, 3, i);
    b.temperature = rng.Uniform(0.05, 2.0);
    EXPECT_GE(ContrastiveLoss(b).item(), 0.0);
  }
  ContrastiveBatch z;
  z.contexts = Tensor::Constant({2, 2}, {0.0, 0.0, 1.0, 0.0});
  z.targets = Tensor::Constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
  z.distractors = {{1}, {0}};
  EXPECT_THROW(ContrastiveLoss(z), DegenerateInputError);
}

TEST(Diversity, KnownValuesAndRange) {
  EXPECT_NEAR(DiversityLoss(Tensor::Constant({2, 20}, std::vector<double>(40, 0.05))).item(), 0.0, 1e-12);
  std::vector<double> onehot(40, 0.0);
  onehot[3] = onehot[20 + 7] = 1.0;
  EXPECT_NEAR(DiversityLoss(Tensor::Constant({2, 20}, onehot)).item(), 0.95, 1e-12);
  EXPECT_NEAR(DiversityLoss(Tensor::Constant({1, 2}, {0.5, 0.5})).item(), 0.0, 1e-12);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> p(8);
    double s = 0.0;
    for (double& v : p) s += (v = rng.Uniform());
    for (double& v : p) v /= s;
    const double l = DiversityLoss(Tensor::Constant({1, 8}, p)).item();
    EXPECT_GE(l, -1e-12);
    EXPECT_LE(l, 1.0 - 1.0 / 8 + 1e-12);
  }
  EXPECT_THROW(DiversityLoss(Tensor::Constant({1, 2}, {1.5, -0.5})), ContractError);
}

Tensor UniformLogProbs(int64_t t, int64_t c) {
  return Tensor::Constant({t, c}, std::vector<double>(t * c, -std::log(static_cast<double>(c))));
}

TEST(Ctc, HandDerivedCases) {
  const std::vector<int> a = {1};
  EXPECT_NEAR(CtcLoss(Tensor::Constant({1, 2}, {-1e300, 0.0}), a).item(), 0.0, 1e-12);
  EXPECT_NEAR(CtcLoss(UniformLogProbs(2, 2), a).item(), 0.2876820724517809, 1e-9);
  EXPECT_NEAR(CtcBruteForce(UniformLogProbs(2, 2), a), 0.2876820724517809, 1e-9);
  const std::vector<int> aa = {1, 1};
  EXPECT_EQ(CtcMinFrames(aa), 3);
  EXPECT_THROW(CtcLoss(UniformLogProbs(2, 2), aa), InfeasibleTargetError);
  EXPECT_NO_THROW(CtcLoss(UniformLogProbs(3, 2), aa));
  const std::vector<int> abc = {1, 2, 3};
  EXPECT_THROW(CtcLoss(UniformLogProbs(2, 4), abc), InfeasibleTargetError);
  EXPECT_EQ(CtcBruteForce(UniformLogProbs(2, 4), abc), std::numeric_limits<double>::infinity());
  EXPECT_THROW(CtcBruteForce(UniformLogProbs(9, 2), a), ContractError);
  const std::vector<int> blank = {0};
  EXPECT_THROW(CtcLoss(UniformLogProbs(3, 2), blank), ContractError);
}

Tensor RandomLogProbs(int64_t t, int64_t c, uint64_t seed, bool param = false) {
  const Tensor x = ad::LogSoftmax(testing::RandomConstant({t, c}, seed, 2.0), 1);
  std::vector<double> v(x.values().begin(), x.values().end());
  return param ? Tensor::Parameter({t, c}, v) : Tensor::Constant({t, c}, v);
}

TEST(Ctc, MatchesBruteForceOnRandomInstances) {
  Rng rng(11);
  int feasible = 0;
  for (int i = 0; i < 200; ++i) {
    const int64_t t = 1 + rng.UniformInt(6);
    const int64_t vocab = 1 + rng.UniformInt(3);
    std::vector<int> labels(1 + rng.UniformInt(3));
    for (int& l : labels) l = 1 + static_cast<int>(rng.UniformInt(vocab));
    const Tensor lp = RandomLogProbs(t, vocab + 1, 1000 + i);
    const double oracle = CtcBruteForce(lp, labels);
    if (t < CtcMinFrames(labels)) {
      EXPECT_TRUE(std::isinf(oracle));
      EXPECT_THROW(CtcLoss(lp, labels), InfeasibleTargetError);
      continue;
    }
    ++feasible;
    EXPECT_NEAR(CtcLoss(lp, labels).item(), oracle, 1e-9) << "instance " << i;
  }
  EXPECT_GT(feasible, 100);
}

TEST(Ctc, GradientMatchesFiniteDifferences) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Tensor logits = testing::RandomParameter({7, 4}, 50 + seed);
    const std::vector<int> labels = {1, 3, 3};
    EXPECT_LT(ad::GradCheck({logits}, [&] { return CtcLoss(ad::LogSoftmax(logits, 1), labels); }), 1e-4);
    Tensor lp = RandomLogProbs(6, 3, 70 + seed, true);
    const std::vector<int> two = {2, 1};
    EXPECT_LT(ad::GradCheck({lp}, [&] { return CtcLoss(lp, two); }), 1e-4);
  }
}

TEST(Ctc, TokenClassMappingRoundTrips) {
  const std::vector<int> tokens = {0, 7, 3, 3};
  const std::vector<int> classes = TokensToClasses(tokens);
  EXPECT_EQ(classes, (std::vector<int>{1, 8, 4, 4}));
  EXPECT_EQ(ClassesToTokens(classes), tokens);
}

// Small settings so the tiny model yields enough masked frames.
PretrainSettings TinySettings() {
  PretrainSettings s;
  s.mask_prob = 0.3;
  s.mask_span = 2;
  s.num_distractors = 3;
  s.hard_quantizer = false;  // finite differences need a smooth quantizer
  s.gumbel_temperature = 1.5;
  return s;
}

TEST(PretrainLoss, GradientsMatchFiniteDifferences) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    model::Model m = model::Model::Initialize(testing::TinyConfig(), seed);
    m.SetTrainable({model::Component::kFeatureEncoder, model::Component::kContextualEncoder,
                    model::Component::kQuantizer});
    const auto wav = testing::RandomWaveform(100, 20 + seed);
    const double err = ad::GradCheck(testing::AllParameters(m), [&] {
      return PretrainLoss(m, wav, TinySettings(), seed).total;
    });
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(PretrainLoss, FiniteForRandomInputs) {
  const model::Model m = model::Model::Initialize(model::ModelConfig(), 1);
  PretrainSettings s;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const PretrainLossTerms t = PretrainLoss(m, testing::RandomWaveform(8000, seed), s, seed);
    EXPECT_TRUE(std::isfinite(t.total.item()));
    EXPECT_GE(t.num_masked, 2);
    EXPECT_NEAR(t.total.item(), t.contrastive.item() + 0.1 * t.diversity.item(), 1e-12);
  }
  EXPECT_THROW(PretrainLoss(m, testing::RandomWaveform(210, 1), s, 1), DataContractError);
}

TEST(FinetuneLoss, GradientsMatchFiniteDifferences) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    model::Model m = model::Model::Initialize(testing::TinyConfig(), seed);
    m.AddCtcHead(seed + 7);
    m.SetTrainable({model::Component::kFeatureEncoder, model::Component::kContextualEncoder,
                    model::Component::kCtcHead});
    const auto wav = testing::RandomWaveform(100, 40 + seed);
    const std::vector<int> tokens = {0, 1, 1};
    const double err = ad::GradCheck(testing::AllParameters(m), [&] { return FinetuneLoss(m, wav, tokens); });
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

}  // namespace
}  // namespace soa::objectives
