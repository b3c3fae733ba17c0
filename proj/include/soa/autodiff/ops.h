#ifndef SOA_AUTODIFF_OPS_H_
#define SOA_AUTODIFF_OPS_H_

#include <vector>

#include "soa/autodiff/tensor.h"

// Differentiable operations. Matrices are row-major; time series are laid out
// as [channels x length] for convolution and [frames x width] elsewhere.
namespace soa::ad {

// Elementwise, identical shapes.
Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Scale(const Tensor& x, double factor);
Tensor Exp(const Tensor& x);
Tensor Log(const Tensor& x);
// Exact (erf) GELU.
Tensor Gelu(const Tensor& x);

// Row broadcast: x[N x D] (+|*) v[D].
Tensor AddRowVector(const Tensor& x, const Tensor& v);
Tensor MulRowVector(const Tensor& x, const Tensor& v);

Tensor MatMul(const Tensor& a, const Tensor& b);
Tensor Transpose(const Tensor& x);
// x[N x in] * w[in x out] + b[out]
Tensor Linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor Reshape(const Tensor& x, Shape shape);
Tensor ConcatCols(const std::vector<Tensor>& parts);
Tensor SliceCols(const Tensor& x, int64_t begin, int64_t end);
// Rows of x[N x D] (or entries of a vector) picked by index; repeats allowed.
Tensor GatherRows(const Tensor& x, const std::vector<int64_t>& indices);
// Replaces rows where mask is true with fill[D].
Tensor MaskedFillRows(const Tensor& x, const std::vector<bool>& mask,
                      const Tensor& fill);
// Same values, no gradient flow.
Tensor Detach(const Tensor& x);

Tensor Sum(const Tensor& x);
Tensor Mean(const Tensor& x);
// [N x D] -> [D]
Tensor MeanRows(const Tensor& x);

// Normalizes each row of x[N x D].
Tensor LayerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);
// x[C x L]; statistics over each group of C/groups channels and all L.
Tensor GroupNorm(const Tensor& x, int64_t groups, const Tensor& gamma,
                 const Tensor& beta, double eps = 1e-5);

Tensor Softmax(const Tensor& x, int axis);
Tensor LogSoftmax(const Tensor& x, int axis);

// input[C_in x L], kernels[C_out x C_in x K] -> [C_out x L_out] with
// L_out = floor((L + 2*padding - K) / stride) + 1. Zero padding.
Tensor Conv1d(const Tensor& input, const Tensor& kernels, int64_t stride,
              int64_t padding = 0);
int64_t Conv1dOutputLength(int64_t length, int64_t kernel, int64_t stride,
                           int64_t padding = 0);

// Cosine similarity of matching rows: a[N x D], b[N x D] -> [N].
Tensor CosineRows(const Tensor& a, const Tensor& b);

// softmax(q k^T / sqrt(d)) v for q[Tq x d], k[Tk x d], v[Tk x dv].
Tensor ScaledDotProductAttention(const Tensor& q, const Tensor& k,
                                 const Tensor& v);

}  // namespace soa::ad

#endif  // SOA_AUTODIFF_OPS_H_
