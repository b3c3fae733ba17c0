#include "soa/autodiff/ops.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "soa/errors.h"

namespace soa::ad {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

void RequireSameShape(const Tensor& a, const Tensor& b, const char* op) {
  SOA_REQUIRE(a.shape() == b.shape(), ContractError,
              std::string(op) + ": shape mismatch " + ShapeToString(a.shape()) +
                  " vs " + ShapeToString(b.shape()));
}

void RequireRank(const Tensor& x, int rank, const char* op) {
  SOA_REQUIRE(x.rank() == rank, ContractError,
              std::string(op) + ": expected rank " + std::to_string(rank) +
                  ", got " + ShapeToString(x.shape()));
}

// Applies f(grad_out_i, i) -> grad contribution to a single input.
template <typename F>
void AccumulateUnary(Node& self, size_t input, F f) {
  Node& in = *self.inputs[input];
  if (!in.requires_grad) return;
  auto& g = in.MutableGrad();
  for (size_t i = 0; i < g.size(); ++i) g[i] += f(self.grad[i], i);
}

template <typename F>
Tensor Elementwise(const char* kind, const Tensor& x, F forward,
                   BackwardFn backward) {
  std::vector<double> out(x.numel());
  auto in = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return MakeResult(kind, x.shape(), std::move(out), {x}, std::move(backward));
}

}  // namespace

Tensor Add(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Add");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return MakeResult("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    AccumulateUnary(self, 0, [](double g, size_t) { return g; });
    AccumulateUnary(self, 1, [](double g, size_t) { return g; });
  });
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Sub");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return MakeResult("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    AccumulateUnary(self, 0, [](double g, size_t) { return g; });
    AccumulateUnary(self, 1, [](double g, size_t) { return -g; });
  });
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Mul");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return MakeResult("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    AccumulateUnary(self, 0, [&](double g, size_t i) { return g * bv[i]; });
    AccumulateUnary(self, 1, [&](double g, size_t i) { return g * av[i]; });
  });
}

Tensor Scale(const Tensor& x, double factor) {
  return Elementwise(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](Node& self) {
        AccumulateUnary(self, 0, [factor](double g, size_t) { return g * factor; });
      });
}

Tensor Exp(const Tensor& x) {
  return Elementwise(
      "exp", x, [](double v) { return std::exp(v); },
      [](Node& self) {
        const auto& y = self.value;
        AccumulateUnary(self, 0, [&](double g, size_t i) { return g * y[i]; });
      });
}

Tensor Log(const Tensor& x) {
  return Elementwise(
      "log", x, [](double v) { return std::log(v); },
      [](Node& self) {
        const auto& xv = self.inputs[0]->value;
        AccumulateUnary(self, 0, [&](double g, size_t i) { return g / xv[i]; });
      });
}

Tensor Gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return Elementwise(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](Node& self) {
        const auto& xv = self.inputs[0]->value;
        AccumulateUnary(self, 0, [&](double g, size_t i) {
          const double v = xv[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          return g * (cdf + v * pdf);
        });
      });
}

Tensor AddRowVector(const Tensor& x, const Tensor& v) {
  RequireRank(x, 2, "AddRowVector");
  const int64_t n = x.dim(0), d = x.dim(1);
  SOA_REQUIRE(v.numel() == d, ContractError, "AddRowVector: width mismatch");
  std::vector<double> out(x.numel());
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) out[r * d + c] = x.at(r * d + c) + v.at(c);
  return MakeResult("add_row", x.shape(), std::move(out), {x, v},
                    [n, d](Node& self) {
                      AccumulateUnary(self, 0, [](double g, size_t) { return g; });
                      Node& vn = *self.inputs[1];
                      if (!vn.requires_grad) return;
                      auto& gv = vn.MutableGrad();
                      for (int64_t r = 0; r < n; ++r)
                        for (int64_t c = 0; c < d; ++c) gv[c] += self.grad[r * d + c];
                    });
}

Tensor MulRowVector(const Tensor& x, const Tensor& v) {
  RequireRank(x, 2, "MulRowVector");
  const int64_t n = x.dim(0), d = x.dim(1);
  SOA_REQUIRE(v.numel() == d, ContractError, "MulRowVector: width mismatch");
  std::vector<double> out(x.numel());
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) out[r * d + c] = x.at(r * d + c) * v.at(c);
  return MakeResult("mul_row", x.shape(), std::move(out), {x, v},
                    [n, d](Node& self) {
                      const auto& xv = self.inputs[0]->value;
                      const auto& vv = self.inputs[1]->value;
                      AccumulateUnary(self, 0, [&](double g, size_t i) {
                        return g * vv[i % d];
                      });
                      Node& vn = *self.inputs[1];
                      if (!vn.requires_grad) return;
                      auto& gv = vn.MutableGrad();
                      for (int64_t r = 0; r < n; ++r)
                        for (int64_t c = 0; c < d; ++c)
                          gv[c] += self.grad[r * d + c] * xv[r * d + c];
                    });
}

Tensor MatMul(const Tensor& a, const Tensor& b) {
  RequireRank(a, 2, "MatMul");
  RequireRank(b, 2, "MatMul");
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  SOA_REQUIRE(b.dim(0) == k, ContractError,
              "MatMul: inner extent mismatch " + ShapeToString(a.shape()) +
                  " * " + ShapeToString(b.shape()));
  std::vector<double> out(n * m);
  MatMap(out.data(), n, m).noalias() =
      ConstMatMap(a.values().data(), n, k) * ConstMatMap(b.values().data(), k, m);
  return MakeResult("matmul", {n, m}, std::move(out), {a, b},
                    [n, k, m](Node& self) {
                      ConstMatMap g(self.grad.data(), n, m);
                      Node& an = *self.inputs[0];
                      Node& bn = *self.inputs[1];
                      if (an.requires_grad) {
                        MatMap(an.MutableGrad().data(), n, k).noalias() +=
                            g * ConstMatMap(bn.value.data(), k, m).transpose();
                      }
                      if (bn.requires_grad) {
                        MatMap(bn.MutableGrad().data(), k, m).noalias() +=
                            ConstMatMap(an.value.data(), n, k).transpose() * g;
                      }
                    });
}

Tensor Transpose(const Tensor& x) {
  RequireRank(x, 2, "Transpose");
  const int64_t n = x.dim(0), m = x.dim(1);
  std::vector<double> out(x.numel());
  MatMap(out.data(), m, n) = ConstMatMap(x.values().data(), n, m).transpose();
  return MakeResult("transpose", {m, n}, std::move(out), {x},
                    [n, m](Node& self) {
                      Node& in = *self.inputs[0];
                      MatMap(in.MutableGrad().data(), n, m) +=
                          ConstMatMap(self.grad.data(), m, n).transpose();
                    });
}

Tensor Linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return AddRowVector(MatMul(x, w), b);
}

Tensor Reshape(const Tensor& x, Shape shape) {
  SOA_REQUIRE(NumElements(shape) == x.numel(), ContractError,
              "Reshape: element count changes from " +
                  ShapeToString(x.shape()) + " to " + ShapeToString(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return MakeResult("reshape", std::move(shape), std::move(out), {x},
                    [](Node& self) {
                      AccumulateUnary(self, 0, [](double g, size_t) { return g; });
                    });
}

Tensor ConcatCols(const std::vector<Tensor>& parts) {
  SOA_REQUIRE(!parts.empty(), ContractError, "ConcatCols: no inputs");
  const int64_t n = parts[0].dim(0);
  std::vector<int64_t> offsets;
  int64_t total = 0;
  for (const Tensor& p : parts) {
    RequireRank(p, 2, "ConcatCols");
    SOA_REQUIRE(p.dim(0) == n, ContractError, "ConcatCols: row mismatch");
    offsets.push_back(total);
    total += p.dim(1);
  }
  std::vector<double> out(n * total);
  for (size_t i = 0; i < parts.size(); ++i) {
    const int64_t w = parts[i].dim(1);
    for (int64_t r = 0; r < n; ++r)
      std::copy_n(parts[i].values().data() + r * w, w,
                  out.data() + r * total + offsets[i]);
  }
  return MakeResult("concat_cols", {n, total}, std::move(out), parts,
                    [n, total, offsets](Node& self) {
                      for (size_t i = 0; i < self.inputs.size(); ++i) {
                        Node& in = *self.inputs[i];
                        if (!in.requires_grad) continue;
                        const int64_t w = in.shape[1];
                        auto& g = in.MutableGrad();
                        for (int64_t r = 0; r < n; ++r)
                          for (int64_t c = 0; c < w; ++c)
                            g[r * w + c] += self.grad[r * total + offsets[i] + c];
                      }
                    });
}

Tensor SliceCols(const Tensor& x, int64_t begin, int64_t end) {
  RequireRank(x, 2, "SliceCols");
  const int64_t n = x.dim(0), d = x.dim(1);
  SOA_REQUIRE(0 <= begin && begin < end && end <= d, ContractError,
              "SliceCols: bad range");
  const int64_t w = end - begin;
  std::vector<double> out(n * w);
  for (int64_t r = 0; r < n; ++r)
    std::copy_n(x.values().data() + r * d + begin, w, out.data() + r * w);
  return MakeResult("slice_cols", {n, w}, std::move(out), {x},
                    [n, d, w, begin](Node& self) {
                      auto& g = self.inputs[0]->MutableGrad();
                      for (int64_t r = 0; r < n; ++r)
                        for (int64_t c = 0; c < w; ++c)
                          g[r * d + begin + c] += self.grad[r * w + c];
                    });
}

Tensor GatherRows(const Tensor& x, const std::vector<int64_t>& indices) {
  SOA_REQUIRE(x.rank() == 1 || x.rank() == 2, ContractError,
              "GatherRows: rank must be 1 or 2");
  const int64_t n = x.dim(0);
  const int64_t d = x.rank() == 2 ? x.dim(1) : 1;
  const int64_t m = static_cast<int64_t>(indices.size());
  std::vector<double> out(m * d);
  for (int64_t i = 0; i < m; ++i) {
    SOA_REQUIRE(indices[i] >= 0 && indices[i] < n, ContractError,
                "GatherRows: index out of range");
    std::copy_n(x.values().data() + indices[i] * d, d, out.data() + i * d);
  }
  Shape shape = x.rank() == 2 ? Shape{m, d} : Shape{m};
  return MakeResult("gather_rows", std::move(shape), std::move(out), {x},
                    [indices, d](Node& self) {
                      auto& g = self.inputs[0]->MutableGrad();
                      for (size_t i = 0; i < indices.size(); ++i)
                        for (int64_t c = 0; c < d; ++c)
                          g[indices[i] * d + c] += self.grad[i * d + c];
                    });
}

Tensor MaskedFillRows(const Tensor& x, const std::vector<bool>& mask,
                      const Tensor& fill) {
  RequireRank(x, 2, "MaskedFillRows");
  const int64_t n = x.dim(0), d = x.dim(1);
  SOA_REQUIRE(static_cast<int64_t>(mask.size()) == n, ContractError,
              "MaskedFillRows: mask length " + std::to_string(mask.size()) +
                  " != rows " + std::to_string(n));
  SOA_REQUIRE(fill.numel() == d, ContractError, "MaskedFillRows: fill width");
  std::vector<double> out(x.values().begin(), x.values().end());
  for (int64_t r = 0; r < n; ++r)
    if (mask[r]) std::copy_n(fill.values().data(), d, out.data() + r * d);
  return MakeResult("masked_fill_rows", x.shape(), std::move(out), {x, fill},
                    [mask, n, d](Node& self) {
                      Node& xn = *self.inputs[0];
                      Node& fn = *self.inputs[1];
                      if (xn.requires_grad) {
                        auto& g = xn.MutableGrad();
                        for (int64_t r = 0; r < n; ++r)
                          if (!mask[r])
                            for (int64_t c = 0; c < d; ++c) g[r * d + c] += self.grad[r * d + c];
                      }
                      if (fn.requires_grad) {
                        auto& g = fn.MutableGrad();
                        for (int64_t r = 0; r < n; ++r)
                          if (mask[r])
                            for (int64_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
                      }
                    });
}

Tensor Detach(const Tensor& x) {
  return Tensor::Constant(x.shape(), {x.values().begin(), x.values().end()});
}

Tensor Sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return MakeResult("sum", {}, {s}, {x}, [](Node& self) {
    const double g = self.grad[0];
    AccumulateUnary(self, 0, [g](double, size_t) { return g; });
  });
}

Tensor Mean(const Tensor& x) {
  SOA_REQUIRE(x.numel() > 0, ContractError, "Mean of empty tensor");
  const double inv = 1.0 / static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.values()) s += v;
  return MakeResult("mean", {}, {s * inv}, {x}, [inv](Node& self) {
    const double g = self.grad[0] * inv;
    Node& in = *self.inputs[0];
    auto& gi = in.MutableGrad();
    for (double& v : gi) v += g;
  });
}

Tensor MeanRows(const Tensor& x) {
  RequireRank(x, 2, "MeanRows");
  const int64_t n = x.dim(0), d = x.dim(1);
  SOA_REQUIRE(n > 0, ContractError, "MeanRows of empty tensor");
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> out(d, 0.0);
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) out[c] += x.at(r * d + c);
  for (double& v : out) v *= inv;
  return MakeResult("mean_rows", {d}, std::move(out), {x}, [n, d, inv](Node& self) {
    auto& g = self.inputs[0]->MutableGrad();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < d; ++c) g[r * d + c] += self.grad[c] * inv;
  });
}

Tensor LayerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps) {
  RequireRank(x, 2, "LayerNorm");
  const int64_t n = x.dim(0), d = x.dim(1);
  SOA_REQUIRE(gamma.numel() == d && beta.numel() == d, ContractError,
              "LayerNorm: affine width mismatch");
  std::vector<double> xhat(x.numel()), inv_std(n), out(x.numel());
  auto xv = x.values();
  for (int64_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (int64_t c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    double var = 0.0;
    for (int64_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= d;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int64_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mean) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gamma.at(c) + beta.at(c);
    }
  }
  return MakeResult(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        if (gn.requires_grad || bn.requires_grad) {
          auto& gg = gn.MutableGrad();
          auto& gb = bn.MutableGrad();
          for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < d; ++c) {
              gg[c] += self.grad[r * d + c] * xhat[r * d + c];
              gb[c] += self.grad[r * d + c];
            }
        }
        if (!xn.requires_grad) return;
        auto& gx = xn.MutableGrad();
        const auto& gamma_v = gn.value;
        std::vector<double> gxhat(d);
        for (int64_t r = 0; r < n; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (int64_t c = 0; c < d; ++c) {
            gxhat[c] = self.grad[r * d + c] * gamma_v[c];
            mean_g += gxhat[c];
            mean_gx += gxhat[c] * xhat[r * d + c];
          }
          mean_g /= d;
          mean_gx /= d;
          for (int64_t c = 0; c < d; ++c)
            gx[r * d + c] +=
                inv_std[r] * (gxhat[c] - mean_g - xhat[r * d + c] * mean_gx);
        }
      });
}

Tensor GroupNorm(const Tensor& x, int64_t groups, const Tensor& gamma,
                 const Tensor& beta, double eps) {
  RequireRank(x, 2, "GroupNorm");
  const int64_t channels = x.dim(0), len = x.dim(1);
  SOA_REQUIRE(groups >= 1 && channels % groups == 0, ContractError,
              "GroupNorm: groups must divide channels");
  SOA_REQUIRE(gamma.numel() == channels && beta.numel() == channels,
              ContractError, "GroupNorm: affine width mismatch");
  const int64_t per_group = (channels / groups) * len;
  std::vector<double> xhat(x.numel()), inv_std(groups), out(x.numel());
  auto xv = x.values();
  for (int64_t g = 0; g < groups; ++g) {
    const double* block = xv.data() + g * per_group;
    double mean = 0.0;
    for (int64_t i = 0; i < per_group; ++i) mean += block[i];
    mean /= per_group;
    double var = 0.0;
    for (int64_t i = 0; i < per_group; ++i) var += (block[i] - mean) * (block[i] - mean);
    var /= per_group;
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (int64_t i = 0; i < per_group; ++i) {
      const int64_t idx = g * per_group + i;
      const int64_t ch = idx / len;
      xhat[idx] = (block[i] - mean) * inv_std[g];
      out[idx] = xhat[idx] * gamma.at(ch) + beta.at(ch);
    }
  }
  return MakeResult(
      "group_norm", x.shape(), std::move(out), {x, gamma, beta},
      [groups, len, per_group, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Node& self) {
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        const int64_t total = groups * per_group;
        if (gn.requires_grad || bn.requires_grad) {
          auto& gg = gn.MutableGrad();
          auto& gb = bn.MutableGrad();
          for (int64_t i = 0; i < total; ++i) {
            gg[i / len] += self.grad[i] * xhat[i];
            gb[i / len] += self.grad[i];
          }
        }
        if (!xn.requires_grad) return;
        auto& gx = xn.MutableGrad();
        std::vector<double> gxhat(per_group);
        for (int64_t g = 0; g < groups; ++g) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (int64_t i = 0; i < per_group; ++i) {
            const int64_t idx = g * per_group + i;
            gxhat[i] = self.grad[idx] * gn.value[idx / len];
            mean_g += gxhat[i];
            mean_gx += gxhat[i] * xhat[idx];
          }
          mean_g /= per_group;
          mean_gx /= per_group;
          for (int64_t i = 0; i < per_group; ++i) {
            const int64_t idx = g * per_group + i;
            gx[idx] += inv_std[g] * (gxhat[i] - mean_g - xhat[idx] * mean_gx);
          }
        }
      });
}

namespace {

struct AxisLayout {
  int64_t outer = 1, n = 1, inner = 1;
};

AxisLayout LayoutFor(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  SOA_REQUIRE(axis >= 0 && axis < r, ContractError, "softmax axis out of range");
  AxisLayout l;
  for (int i = 0; i < axis; ++i) l.outer *= x.shape()[i];
  l.n = x.shape()[axis];
  for (int i = axis + 1; i < r; ++i) l.inner *= x.shape()[i];
  return l;
}

}  // namespace

Tensor Softmax(const Tensor& x, int axis) {
  const AxisLayout l = LayoutFor(x, axis);
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (int64_t o = 0; o < l.outer; ++o)
    for (int64_t j = 0; j < l.inner; ++j) {
      const int64_t base = o * l.n * l.inner + j;
      double mx = -INFINITY;
      for (int64_t i = 0; i < l.n; ++i) mx = std::max(mx, xv[base + i * l.inner]);
      double s = 0.0;
      for (int64_t i = 0; i < l.n; ++i) {
        out[base + i * l.inner] = std::exp(xv[base + i * l.inner] - mx);
        s += out[base + i * l.inner];
      }
      for (int64_t i = 0; i < l.n; ++i) out[base + i * l.inner] /= s;
    }
  return MakeResult("softmax", x.shape(), std::move(out), {x}, [l](Node& self) {
    auto& gx = self.inputs[0]->MutableGrad();
    const auto& y = self.value;
    for (int64_t o = 0; o < l.outer; ++o)
      for (int64_t j = 0; j < l.inner; ++j) {
        const int64_t base = o * l.n * l.inner + j;
        double dot = 0.0;
        for (int64_t i = 0; i < l.n; ++i)
          dot += self.grad[base + i * l.inner] * y[base + i * l.inner];
        for (int64_t i = 0; i < l.n; ++i) {
          const int64_t k = base + i * l.inner;
          gx[k] += y[k] * (self.grad[k] - dot);
        }
      }
  });
}

Tensor LogSoftmax(const Tensor& x, int axis) {
  const AxisLayout l = LayoutFor(x, axis);
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (int64_t o = 0; o < l.outer; ++o)
    for (int64_t j = 0; j < l.inner; ++j) {
      const int64_t base = o * l.n * l.inner + j;
      double mx = -INFINITY;
      for (int64_t i = 0; i < l.n; ++i) mx = std::max(mx, xv[base + i * l.inner]);
      double s = 0.0;
      for (int64_t i = 0; i < l.n; ++i) s += std::exp(xv[base + i * l.inner] - mx);
      const double lse = mx + std::log(s);
      for (int64_t i = 0; i < l.n; ++i)
        out[base + i * l.inner] = xv[base + i * l.inner] - lse;
    }
  return MakeResult("log_softmax", x.shape(), std::move(out), {x}, [l](Node& self) {
    auto& gx = self.inputs[0]->MutableGrad();
    const auto& y = self.value;
    for (int64_t o = 0; o < l.outer; ++o)
      for (int64_t j = 0; j < l.inner; ++j) {
        const int64_t base = o * l.n * l.inner + j;
        double gsum = 0.0;
        for (int64_t i = 0; i < l.n; ++i) gsum += self.grad[base + i * l.inner];
        for (int64_t i = 0; i < l.n; ++i) {
          const int64_t k = base + i * l.inner;
          gx[k] += self.grad[k] - std::exp(y[k]) * gsum;
        }
      }
  });
}

int64_t Conv1dOutputLength(int64_t length, int64_t kernel, int64_t stride,
                           int64_t padding) {
  SOA_REQUIRE(kernel >= 1 && stride >= 1 && padding >= 0, ContractError,
              "conv1d: kernel and stride must be positive");
  const int64_t padded = length + 2 * padding;
  SOA_REQUIRE(padded >= kernel, InputTooShortError,
              "conv1d: input length " + std::to_string(length) +
                  " shorter than kernel " + std::to_string(kernel));
  return (padded - kernel) / stride + 1;
}

Tensor Conv1d(const Tensor& input, const Tensor& kernels, int64_t stride,
              int64_t padding) {
  RequireRank(input, 2, "Conv1d input");
  RequireRank(kernels, 3, "Conv1d kernels");
  const int64_t c_in = input.dim(0), len = input.dim(1);
  const int64_t c_out = kernels.dim(0), k = kernels.dim(2);
  SOA_REQUIRE(kernels.dim(1) == c_in, ContractError,
              "Conv1d: kernel input channels " + std::to_string(kernels.dim(1)) +
                  " != input channels " + std::to_string(c_in));
  const int64_t l_out = Conv1dOutputLength(len, k, stride, padding);
  const int64_t rows = c_in * k;

  // im2col: cols[ci*K + j, t] = x[ci, t*stride + j - padding]
  std::vector<double> cols(rows * l_out, 0.0);
  auto xv = input.values();
  for (int64_t ci = 0; ci < c_in; ++ci)
    for (int64_t j = 0; j < k; ++j) {
      double* dst = cols.data() + (ci * k + j) * l_out;
      const double* src = xv.data() + ci * len;
      for (int64_t t = 0; t < l_out; ++t) {
        const int64_t pos = t * stride + j - padding;
        if (pos >= 0 && pos < len) dst[t] = src[pos];
      }
    }
  std::vector<double> out(c_out * l_out);
  MatMap(out.data(), c_out, l_out).noalias() =
      ConstMatMap(kernels.values().data(), c_out, rows) *
      ConstMatMap(cols.data(), rows, l_out);

  return MakeResult(
      "conv1d", {c_out, l_out}, std::move(out), {input, kernels},
      [=, cols = std::move(cols)](Node& self) {
        ConstMatMap g(self.grad.data(), c_out, l_out);
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        if (wn.requires_grad) {
          MatMap(wn.MutableGrad().data(), c_out, rows).noalias() +=
              g * ConstMatMap(cols.data(), rows, l_out).transpose();
        }
        if (xn.requires_grad) {
          RowMat gcols = ConstMatMap(wn.value.data(), c_out, rows).transpose() * g;
          auto& gx = xn.MutableGrad();
          for (int64_t ci = 0; ci < c_in; ++ci)
            for (int64_t j = 0; j < k; ++j) {
              const double* src = gcols.data() + (ci * k + j) * l_out;
              double* dst = gx.data() + ci * len;
              for (int64_t t = 0; t < l_out; ++t) {
                const int64_t pos = t * stride + j - padding;
                if (pos >= 0 && pos < len) dst[pos] += src[t];
              }
            }
        }
      });
}

Tensor CosineRows(const Tensor& a, const Tensor& b) {
  RequireRank(a, 2, "CosineRows");
  RequireSameShape(a, b, "CosineRows");
  const int64_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(n), na(n), nb(n);
  auto av = a.values(), bv = b.values();
  for (int64_t r = 0; r < n; ++r) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      dot += av[r * d + c] * bv[r * d + c];
      aa += av[r * d + c] * av[r * d + c];
      bb += bv[r * d + c] * bv[r * d + c];
    }
    SOA_REQUIRE(aa > 0.0 && bb > 0.0, DegenerateInputError,
                "cosine similarity of a zero-norm vector");
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    out[r] = dot / (na[r] * nb[r]);
  }
  return MakeResult(
      "cosine_rows", {n}, std::move(out), {a, b},
      [n, d, na = std::move(na), nb = std::move(nb)](Node& self) {
        Node& an = *self.inputs[0];
        Node& bn = *self.inputs[1];
        for (int64_t r = 0; r < n; ++r) {
          const double g = self.grad[r];
          const double cos = self.value[r];
          if (an.requires_grad) {
            auto& ga = an.MutableGrad();
            for (int64_t c = 0; c < d; ++c)
              ga[r * d + c] += g * (bn.value[r * d + c] / (na[r] * nb[r]) -
                                    cos * an.value[r * d + c] / (na[r] * na[r]));
          }
          if (bn.requires_grad) {
            auto& gb = bn.MutableGrad();
            for (int64_t c = 0; c < d; ++c)
              gb[r * d + c] += g * (an.value[r * d + c] / (na[r] * nb[r]) -
                                    cos * bn.value[r * d + c] / (nb[r] * nb[r]));
          }
        }
      });
}

Tensor ScaledDotProductAttention(const Tensor& q, const Tensor& k,
                                 const Tensor& v) {
  RequireRank(q, 2, "attention q");
  SOA_REQUIRE(k.rank() == 2 && q.dim(1) == k.dim(1), ContractError,
              "attention: query/key width mismatch");
  SOA_REQUIRE(v.rank() == 2 && v.dim(0) == k.dim(0), ContractError,
              "attention: key/value length mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor scores = Scale(MatMul(q, Transpose(k)), scale);
  return MatMul(Softmax(scores, 1), v);
}

}  // namespace soa::ad
