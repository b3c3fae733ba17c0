#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "soa/autodiff/grad_check.h"
#include "soa/autodiff/ops.h"
#include "soa/autodiff/tensor.h"
#include "soa/errors.h"
#include "test_util.h"

namespace soa::ad {
namespace {

using testing::RandomConstant;
using testing::RandomParameter;

// Weighted sum so every output element carries a distinct gradient.
Tensor Probe(const Tensor& y, uint64_t seed) {
  return Sum(Mul(y, RandomConstant(y.shape(), seed)));
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor x = RandomParameter({2, 2}, 1);
  EXPECT_THROW(Backward(Scale(x, 2.0)), ContractError);
}

TEST(Tensor, TopologicalOrderPutsInputsFirst) {
  Tensor a = RandomParameter({3}, 1), b = RandomParameter({3}, 2);
  Tensor c = Mul(Add(a, b), Exp(a));
  const auto order = TopologicalOrder(Sum(c));
  std::map<uint64_t, size_t> pos;
  for (size_t i = 0; i < order.size(); ++i) pos[order[i].id] = i;
  for (const auto& r : order)
    for (uint64_t in : r.input_ids)
      if (pos.count(in)) {
        EXPECT_LT(pos[in], pos[r.id]);
      }
}

TEST(Tensor, SharedInputAccumulates) {
  Tensor x = Tensor::Parameter({1}, {3.0});
  Backward(Sum(Mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Tensor, DetachBlocksGradient) {
  Tensor x = Tensor::Parameter({2}, {1.0, 2.0});
  Backward(Sum(Mul(Detach(x), x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Ops, MatMulMatchesLoops) {
  Tensor a = RandomConstant({3, 4}, 1), b = RandomConstant({4, 2}, 2);
  Tensor c = MatMul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a.at(i * 4 + k) * b.at(k * 2 + j);
      EXPECT_NEAR(c.at(i * 2 + j), s, 1e-12);
    }
}

TEST(Ops, Conv1dMatchesDirectSum) {
  for (int64_t stride : {1, 2, 3}) {
    for (int64_t pad : {0, 2}) {
      Tensor x = RandomConstant({3, 17}, 10 + stride), w = RandomConstant({2, 3, 4}, 20 + pad);
      Tensor y = Conv1d(x, w, stride, pad);
      const int64_t L = Conv1dOutputLength(17, 4, stride, pad);
      ASSERT_EQ(y.shape(), Shape({2, L}));
      for (int64_t o = 0; o < 2; ++o)
        for (int64_t t = 0; t < L; ++t) {
          double s = 0.0;
          for (int64_t c = 0; c < 3; ++c)
            for (int64_t k = 0; k < 4; ++k) {
              const int64_t src = t * stride + k - pad;
              if (src >= 0 && src < 17) s += w.at((o * 3 + c) * 4 + k) * x.at(c * 17 + src);
            }
          EXPECT_NEAR(y.at(o * L + t), s, 1e-12);
        }
    }
  }
}

TEST(Ops, Conv1dRejectsShortInput) {
  EXPECT_THROW(Conv1d(RandomConstant({1, 3}, 1), RandomConstant({1, 1, 4}, 2), 1), InputTooShortError);
}

TEST(Ops, LogSoftmaxMatchesExtendedPrecision) {
  Tensor x = RandomConstant({4, 7}, 3, 30.0);
  for (int axis : {0, 1}) {
    Tensor y = LogSoftmax(x, axis);
    const int64_t rows = 4, cols = 7;
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j) {
        long double m = -INFINITY, s = 0.0L;
        const int64_t n = axis == 1 ? cols : rows;
        auto val = [&](int64_t k) {
          return static_cast<long double>(axis == 1 ? x.at(i * cols + k) : x.at(k * cols + j));
        };
        for (int64_t k = 0; k < n; ++k) m = std::max(m, val(k));
        for (int64_t k = 0; k < n; ++k) s += std::exp(val(k) - m);
        const long double expect = static_cast<long double>(x.at(i * cols + j)) - m - std::log(s);
        EXPECT_NEAR(y.at(i * cols + j), static_cast<double>(expect), 1e-12);
      }
  }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Tensor y = Softmax(RandomConstant({5, 6}, 4, 10.0), 1);
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += y.at(i * 6 + j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, LayerNormRowsAreStandardized) {
  Tensor y = LayerNorm(RandomConstant({3, 16}, 5, 4.0), Tensor::Constant({16}, std::vector<double>(16, 1.0)),
                       Tensor::Constant({16}, std::vector<double>(16, 0.0)), 0.0);
  for (int i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mean += y.at(i * 16 + j) / 16;
    for (int j = 0; j < 16; ++j) var += std::pow(y.at(i * 16 + j) - mean, 2) / 16;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-10);
  }
}

TEST(Ops, AttentionMatchesDirectFormula) {
  Tensor q = RandomConstant({3, 2}, 6), k = RandomConstant({3, 2}, 7), v = RandomConstant({3, 2}, 8);
  Tensor out = ScaledDotProductAttention(q, k, v);
  for (int i = 0; i < 3; ++i) {
    double w[3], z = 0.0;
    for (int j = 0; j < 3; ++j) {
      w[j] = std::exp((q.at(i * 2) * k.at(j * 2) + q.at(i * 2 + 1) * k.at(j * 2 + 1)) / std::sqrt(2.0));
      z += w[j];
    }
    for (int d = 0; d < 2; ++d) {
      double s = 0.0;
      for (int j = 0; j < 3; ++j) s += w[j] / z * v.at(j * 2 + d);
      EXPECT_NEAR(out.at(i * 2 + d), s, 1e-10);
    }
  }
}

TEST(Ops, CosineRowsRejectsZeroVector) {
  Tensor a = Tensor::Constant({1, 2}, {0.0, 0.0}), b = Tensor::Constant({1, 2}, {1.0, 0.0});
  EXPECT_THROW(CosineRows(a, b), DegenerateInputError);
}

TEST(Ops, GeluKnownValues) {
  Tensor y = Gelu(Tensor::Constant({3}, {0.0, 1.0, -1.0}));
  EXPECT_NEAR(y.at(0), 0.0, 1e-15);
  EXPECT_NEAR(y.at(1), 0.8413447460685429, 1e-12);
  EXPECT_NEAR(y.at(2), -0.15865525393145707, 1e-12);
}

TEST(GradCheckTest, FlagsWrongGradient) {
  Tensor a = RandomParameter({3, 4}, 1);
  // d/da sum(a * detach(a)) is reported as a, the true value is 2a.
  EXPECT_NEAR(GradCheck({a}, [&] { return Sum(Mul(a, Detach(a))); }), 0.5, 1e-6);
}

TEST(GradCheckTest, ZeroGradientUnderLargeLossPasses) {
  Tensor a = RandomParameter({4, 2}, 2), shift = RandomParameter({2}, 3);
  // Softmax down each column ignores a per-column shift, so shift has an
  // exactly zero gradient while the loss is large enough for the finite
  // difference to be noisy.
  auto loss = [&] { return Scale(Sum(Mul(Softmax(AddRowVector(a, shift), 0), a)), 1e4); };
  EXPECT_LT(GradCheck({a, shift}, loss), 1e-6);
}

// Finite-difference agreement for every differentiable op.
TEST(OpGradients, ElementwiseAndLinear) {
  Tensor a = RandomParameter({3, 4}, 1), b = RandomParameter({3, 4}, 2);
  Tensor w = RandomParameter({4, 5}, 3), bias = RandomParameter({5}, 4);
  Tensor pos = Tensor::Parameter({3, 4}, testing::RandomValues(12, 5));
  for (double& v : pos.mutable_values()) v = std::abs(v) + 0.5;
  EXPECT_LT(GradCheck({a, b}, [&] { return Probe(Add(Mul(a, b), Sub(a, Scale(b, 0.3))), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a}, [&] { return Probe(Exp(a), 9); }), 1e-6);
  EXPECT_LT(GradCheck({pos}, [&] { return Probe(Log(pos), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a}, [&] { return Probe(Gelu(a), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a, w, bias}, [&] { return Probe(Linear(a, w, bias), 9); }), 1e-6);
  Tensor c = RandomParameter({3, 5}, 6);
  EXPECT_LT(GradCheck({a, c}, [&] { return Probe(MatMul(Transpose(a), c), 9); }), 1e-6);
  EXPECT_LT(GradCheck({bias}, [&] { return Probe(Reshape(bias, {5, 1}), 9); }), 1e-6);
}

TEST(OpGradients, ShapeOps) {
  Tensor a = RandomParameter({4, 3}, 1), b = RandomParameter({4, 2}, 2), v = RandomParameter({3}, 3);
  Tensor fill = RandomParameter({3}, 4);
  EXPECT_LT(GradCheck({a, b}, [&] { return Probe(ConcatCols({a, b, a}), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a}, [&] { return Probe(SliceCols(a, 1, 3), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a}, [&] { return Probe(GatherRows(a, {3, 0, 3, 1}), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a, fill}, [&] { return Probe(MaskedFillRows(a, {true, false, true, false}, fill), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a, v}, [&] { return Probe(AddRowVector(a, v), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a, v}, [&] { return Probe(MulRowVector(a, v), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a}, [&] { return Probe(MeanRows(a), 9); }), 1e-6);
  EXPECT_LT(GradCheck({a}, [&] { return Mean(Mul(a, a)); }), 1e-6);
}

TEST(OpGradients, Normalization) {
  Tensor x = RandomParameter({3, 6}, 1, 2.0), g = RandomParameter({6}, 2), b = RandomParameter({6}, 3);
  EXPECT_LT(GradCheck({x, g, b}, [&] { return Probe(LayerNorm(x, g, b), 9); }), 1e-5);
  Tensor gc = RandomParameter({3}, 4), bc = RandomParameter({3}, 5);
  EXPECT_LT(GradCheck({x, gc, bc}, [&] { return Probe(GroupNorm(x, 3, gc, bc), 9); }), 1e-5);
}

TEST(OpGradients, SoftmaxFamily) {
  Tensor x = RandomParameter({3, 5}, 1, 2.0);
  for (int axis : {0, 1}) {
    EXPECT_LT(GradCheck({x}, [&] { return Probe(Softmax(x, axis), 9); }), 1e-6);
    EXPECT_LT(GradCheck({x}, [&] { return Probe(LogSoftmax(x, axis), 9); }), 1e-6);
  }
}

TEST(OpGradients, ConvolutionAndAttention) {
  Tensor x = RandomParameter({2, 11}, 1), w = RandomParameter({3, 2, 3}, 2);
  EXPECT_LT(GradCheck({x, w}, [&] { return Probe(Conv1d(x, w, 2, 1), 9); }), 1e-6);
  Tensor q = RandomParameter({3, 4}, 3), k = RandomParameter({5, 4}, 4), v = RandomParameter({5, 2}, 5);
  EXPECT_LT(GradCheck({q, k, v}, [&] { return Probe(ScaledDotProductAttention(q, k, v), 9); }), 1e-6);
  Tensor a = RandomParameter({4, 3}, 6), b = RandomParameter({4, 3}, 7);
  EXPECT_LT(GradCheck({a, b}, [&] { return Probe(CosineRows(a, b), 9); }), 1e-6);
}

}  // namespace
}  // namespace soa::ad
