#include <gtest/gtest.h>

#include <cmath>

#include "soa/autodiff/ops.h"
#include "soa/errors.h"
#include "soa/model/model.h"
#include "soa/util/random.h"
#include "test_util.h"

namespace soa::model {
namespace {

using Mat = std::vector<std::vector<double>>;

const std::vector<ConvLayerConfig> kToyStack = {{8, 10, 5}, {8, 3, 2}, {8, 3, 2}};

TEST(Lengths, ToyStackOn16000Samples) {
  EXPECT_EQ(OutputLengths(16000, kToyStack), 799);
  EXPECT_EQ(ReceptiveField(kToyStack), 10 + 2 * 5 + 2 * 10);
  EXPECT_EQ(TotalStride(kToyStack), 20);
}

TEST(Lengths, ReceptiveFieldGivesOneFrame) {
  for (const auto& stack : {kToyStack, ModelConfig().conv_layers}) {
    const int64_t rf = ReceptiveField(stack);
    EXPECT_EQ(OutputLengths(rf, stack), 1);
    EXPECT_THROW(OutputLengths(rf - 1, stack), InputTooShortError);
  }
  EXPECT_EQ(ReceptiveField(ModelConfig().conv_layers), 210);
  EXPECT_EQ(TotalStride(ModelConfig().conv_layers), 160);
}

TEST(Lengths, MonotoneInInputSamples) {
  const auto stack = ModelConfig().conv_layers;
  int64_t prev = 0;
  for (int64_t n = ReceptiveField(stack); n < 5000; ++n) {
    const int64_t t = OutputLengths(n, stack);
    EXPECT_GE(t, prev);
    prev = t;
  }
  EXPECT_EQ(OutputLengths(32000, kToyStack), 1599);
}

TEST(FeatureEncoder, FramesMatchLengthFormula) {
  const Model m = Model::Initialize(ModelConfig(), 1);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const int64_t n = 210 + rng.UniformInt(6000);
    const ad::Tensor z = m.FeatureEncode(testing::RandomWaveform(n, 10 + i));
    EXPECT_EQ(z.dim(0), OutputLengths(n, m.config().conv_layers));
    EXPECT_EQ(z.dim(1), m.config().latent_dim());
  }
  EXPECT_THROW(m.FeatureEncode(testing::RandomWaveform(209, 1)), InputTooShortError);
}

TEST(FeatureEncoder, ZeroWaveformIsFinite) {
  const Model m = Model::Initialize(ModelConfig(), 1);
  const ad::Tensor z = m.FeatureEncode(std::vector<float>(1600, 0.0f));
  for (double v : z.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, ForwardIsDeterministic) {
  Model m = Model::Initialize(ModelConfig(), 3);
  m.AddCtcHead(4);
  const auto w = testing::RandomWaveform(3000, 5);
  const ad::Tensor a = m.Recognize(w), b = m.Recognize(w);
  ASSERT_EQ(a.numel(), b.numel());
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST(Model, RecognizeGivesFiniteLogDistributions) {
  Model m = Model::Initialize(ModelConfig(), 3);
  m.AddCtcHead(4);
  const ad::Tensor lp = m.Recognize(testing::RandomWaveform(4000, 6));
  ASSERT_EQ(lp.dim(1), 9);
  for (int64_t t = 0; t < lp.dim(0); ++t) {
    double s = 0.0;
    for (int64_t c = 0; c < 9; ++c) {
      ASSERT_TRUE(std::isfinite(lp.at(t * 9 + c)));
      s += std::exp(lp.at(t * 9 + c));
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Model, UtteranceOrderDoesNotMatter) {
  Model m = Model::Initialize(ModelConfig(), 3);
  m.AddCtcHead(4);
  const auto a = testing::RandomWaveform(2000, 7), b = testing::RandomWaveform(2600, 8);
  const ad::Tensor a1 = m.Recognize(a);
  m.Recognize(b);
  const ad::Tensor a2 = m.Recognize(a);
  for (int64_t i = 0; i < a1.numel(); ++i) EXPECT_EQ(a1.at(i), a2.at(i));
}

// Model with every parameter, including norm affines and biases, random.
Model RandomTinyModel(uint64_t seed) {
  Model m = Model::Initialize(testing::TinyConfig(), seed);
  m.AddCtcHead(seed + 1);
  Rng rng(seed + 2);
  for (auto& [name, t] : m.mutable_params())
    for (double& v : t.mutable_values()) v = 0.5 * rng.Normal() + (name.ends_with("gamma") ? 1.0 : 0.0);
  return m;
}

Mat ToMat(const ad::Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (int64_t i = 0; i < t.dim(0); ++i)
    for (int64_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i * t.dim(1) + j);
  return m;
}

Mat LinearOracle(const Mat& x, const Model& m, const std::string& name) {
  const ad::Tensor& w = m.param(name + ".weight");
  const ad::Tensor& b = m.param(name + ".bias");
  const int64_t out = w.dim(1);
  Mat y(x.size(), std::vector<double>(out));
  for (size_t i = 0; i < x.size(); ++i)
    for (int64_t o = 0; o < out; ++o) {
      double s = b.at(o);
      for (size_t k = 0; k < x[i].size(); ++k) s += x[i][k] * w.at(k * out + o);
      y[i][o] = s;
    }
  return y;
}

Mat NormOracle(Mat x, const Model& m, const std::string& name) {
  const ad::Tensor& g = m.param(name + ".gamma");
  const ad::Tensor& b = m.param(name + ".beta");
  for (auto& row : x) {
    double mean = 0.0, var = 0.0;
    for (double v : row) mean += v / row.size();
    for (double v : row) var += (v - mean) * (v - mean) / row.size();
    for (size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + 1e-5) * g.at(j) + b.at(j);
  }
  return x;
}

double GeluOracle(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Mat AddOracle(Mat a, const Mat& b) {
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

// Contextual encoder written out with plain loops.
Mat ContextOracle(const Model& m, const Mat& z, const std::vector<bool>& mask) {
  const auto& cfg = m.config();
  const int64_t T = z.size(), d = cfg.model_dim, K = cfg.pos_conv_kernel;
  Mat x = LinearOracle(z, m, "contextual_encoder.input_proj");
  for (int64_t t = 0; t < T; ++t)
    if (mask[t])
      for (int64_t j = 0; j < d; ++j) x[t][j] = m.param("contextual_encoder.mask_emb").at(j);
  const ad::Tensor& pw = m.param("contextual_encoder.pos_conv.weight");
  Mat pos(T, std::vector<double>(d));
  for (int64_t t = 0; t < T; ++t)
    for (int64_t o = 0; o < d; ++o) {
      double s = m.param("contextual_encoder.pos_conv.bias").at(o);
      for (int64_t c = 0; c < d; ++c)
        for (int64_t k = 0; k < K; ++k) {
          const int64_t src = t + k - K / 2;
          if (src >= 0 && src < T) s += pw.at((o * d + c) * K + k) * x[src][c];
        }
      pos[t][o] = GeluOracle(s);
    }
  x = NormOracle(AddOracle(x, pos), m, "contextual_encoder.input_norm");
  const int64_t hd = d / cfg.num_heads;
  for (int64_t b = 0; b < cfg.num_blocks; ++b) {
    const std::string base = "contextual_encoder.block" + std::to_string(b);
    const Mat h = NormOracle(x, m, base + ".attn_norm");
    const Mat q = LinearOracle(h, m, base + ".attn.q");
    const Mat k = LinearOracle(h, m, base + ".attn.k");
    const Mat v = LinearOracle(h, m, base + ".attn.v");
    Mat attn(T, std::vector<double>(d, 0.0));
    for (int64_t head = 0; head < cfg.num_heads; ++head)
      for (int64_t i = 0; i < T; ++i) {
        std::vector<double> w(T);
        double mx = -INFINITY, z_sum = 0.0;
        for (int64_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (int64_t e = head * hd; e < (head + 1) * hd; ++e) s += q[i][e] * k[j][e];
          w[j] = s / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, w[j]);
        }
        for (int64_t j = 0; j < T; ++j) z_sum += (w[j] = std::exp(w[j] - mx));
        for (int64_t e = head * hd; e < (head + 1) * hd; ++e)
          for (int64_t j = 0; j < T; ++j) attn[i][e] += w[j] / z_sum * v[j][e];
      }
    const Mat y = AddOracle(x, LinearOracle(attn, m, base + ".attn.out"));
    Mat f = LinearOracle(NormOracle(y, m, base + ".ffn_norm"), m, base + ".ffn.in");
    for (auto& row : f)
      for (double& u : row) u = GeluOracle(u);
    x = AddOracle(y, LinearOracle(f, m, base + ".ffn.out"));
  }
  return NormOracle(x, m, "contextual_encoder.final_norm");
}

TEST(ContextEncoder, MatchesDirectOracleOnThreeFrames) {
  const Model m = RandomTinyModel(11);
  const ad::Tensor z = testing::RandomConstant({3, m.config().latent_dim()}, 12);
  for (const std::vector<bool>& mask : {std::vector<bool>{false, false, false},
                                        std::vector<bool>{false, true, false}}) {
    const Mat expect = ContextOracle(m, ToMat(z), mask);
    const Mat got = ToMat(m.ContextEncode(z, mask));
    for (size_t i = 0; i < 3; ++i)
      for (size_t j = 0; j < got[i].size(); ++j) EXPECT_NEAR(got[i][j], expect[i][j], 1e-10);
  }
}

TEST(ContextEncoder, FullMaskHidesLatents) {
  const Model m = RandomTinyModel(13);
  const std::vector<bool> all(5, true);
  const ad::Tensor a = m.ContextEncode(testing::RandomConstant({5, 6}, 1), all);
  const ad::Tensor b = m.ContextEncode(testing::RandomConstant({5, 6}, 2), all);
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
  const ad::Tensor c = m.ContextEncode(testing::RandomConstant({5, 6}, 2), std::vector<bool>(5, false));
  EXPECT_NE(ToMat(b), ToMat(c));
}

TEST(ContextEncoder, MaskLengthMismatchRaises) {
  const Model m = RandomTinyModel(13);
  EXPECT_THROW(m.ContextEncode(testing::RandomConstant({5, 6}, 1), std::vector<bool>(4, false)),
               ContractError);
}

TEST(Quantizer, HardRowsAreCodebookConcatenations) {
  const Model m = Model::Initialize(ModelConfig(), 5);
  const ad::Tensor z = m.FeatureEncode(testing::RandomWaveform(3000, 6));
  Rng rng(7);
  std::vector<double> noise(z.dim(0) * 40);
  for (double& g : noise) g = rng.Gumbel();
  const ad::Tensor gn = ad::Tensor::Constant({z.dim(0), 40}, noise);
  const QuantizerOutput q = m.Quantize(z, 0.7, true, &gn);
  const ad::Tensor& cb = m.param("quantizer.codebook");  // [G x V x 16]
  for (int64_t t = 0; t < z.dim(0); ++t)
    for (int g = 0; g < 2; ++g)
      for (int e = 0; e < 16; ++e)
        EXPECT_DOUBLE_EQ(q.quantized.at(t * 32 + g * 16 + e), cb.at((g * 20 + q.codes[t][g]) * 16 + e));
}

TEST(Quantizer, LowTemperatureApproachesHard) {
  const Model m = Model::Initialize(testing::TinyConfig(), 5);
  const ad::Tensor z = testing::RandomConstant({6, 6}, 8, 3.0);
  const QuantizerOutput hard = m.Quantize(z, 0.01, true, nullptr);
  const QuantizerOutput soft = m.Quantize(z, 0.01, false, nullptr);
  for (int64_t i = 0; i < hard.quantized.numel(); ++i)
    EXPECT_NEAR(soft.quantized.at(i), hard.quantized.at(i), 1e-3);
}

TEST(Quantizer, AverageProbabilitiesSumToOne) {
  const Model m = Model::Initialize(ModelConfig(), 5);
  const ad::Tensor z = m.FeatureEncode(testing::RandomWaveform(2000, 9));
  const QuantizerOutput q = m.Quantize(z, 2.0, true, nullptr);
  ASSERT_EQ(q.avg_code_probs.shape(), ad::Shape({2, 20}));
  for (int g = 0; g < 2; ++g) {
    double s = 0.0;
    for (int v = 0; v < 20; ++v) s += q.avg_code_probs.at(g * 20 + v);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Quantizer, RejectsNonPositiveTemperature) {
  const Model m = Model::Initialize(testing::TinyConfig(), 5);
  const ad::Tensor z = testing::RandomConstant({4, 6}, 1);
  EXPECT_THROW(m.Quantize(z, 0.0, true, nullptr), ContractError);
  EXPECT_THROW(m.Quantize(z, -1.0, false, nullptr), ContractError);
}

TEST(Quantizer, StraightThroughPassesGradient) {
  Model m = Model::Initialize(testing::TinyConfig(), 5);
  m.SetTrainable({Component::kQuantizer});
  const ad::Tensor z = testing::RandomConstant({4, 6}, 1);
  const QuantizerOutput q = m.Quantize(z, 1.0, true, nullptr);
  ad::Backward(ad::Sum(ad::Mul(q.quantized, testing::RandomConstant(q.quantized.shape(), 2))));
  double norm = 0.0;
  for (double g : m.param("quantizer.weight_proj.weight").grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Parameters, PartitionIntoFourComponents) {
  Model m = Model::Initialize(ModelConfig(), 1);
  EXPECT_FALSE(m.has_ctc_head());
  m.AddCtcHead(2);
  std::map<Component, int> counts;
  for (const auto& [name, t] : m.params()) {
    int prefixes = 0;
    for (Component c : AllComponents())
      if (name.starts_with(std::string(ComponentName(c)) + ".")) ++prefixes;
    EXPECT_EQ(prefixes, 1) << name;
    ++counts[ComponentOf(name)];
  }
  EXPECT_EQ(counts.size(), 4u);
  EXPECT_EQ(m.param("ctc_head.proj.weight").dim(1), 9);
  EXPECT_THROW(ComponentOf("encoder.weight"), ContractError);
  EXPECT_THROW(ComponentFromName("decoder"), ContractError);
}

TEST(Parameters, SetTrainableMarksExactlyChosenComponents) {
  Model m = Model::Initialize(ModelConfig(), 1);
  m.AddCtcHead(2);
  m.SetTrainable({Component::kContextualEncoder, Component::kCtcHead});
  for (const auto& [name, t] : m.params()) {
    const Component c = ComponentOf(name);
    EXPECT_EQ(t.requires_grad(), c == Component::kContextualEncoder || c == Component::kCtcHead) << name;
  }
}

TEST(Config, FingerprintTracksArchitecture) {
  ModelConfig a, b;
  EXPECT_EQ(a.Fingerprint(), b.Fingerprint());
  b.conv_layers[1].channels = 48;
  EXPECT_NE(a.Fingerprint(), b.Fingerprint());
  EXPECT_EQ(ModelConfig::FromJson(b.ToJson()), b);
  ModelConfig bad;
  bad.num_heads = 3;
  EXPECT_THROW(bad.Validate(), ContractError);
}

}  // namespace
}  // namespace soa::model
