#ifndef SOA_AUTODIFF_GRAD_CHECK_H_
#define SOA_AUTODIFF_GRAD_CHECK_H_

#include <functional>
#include <vector>

#include "soa/autodiff/tensor.h"

namespace soa::ad {

// Compares reverse-mode gradients of builder() with central differences of
// step eps, perturbing every entry of every tensor in params in place.
// Returns max |autodiff - numeric| / max(floor, |autodiff|, |numeric|); the
// floor keeps near-zero gradients from turning rounding noise into large
// ratios. Differences within the rounding error of the central difference
// itself count as zero. builder must be deterministic and return a scalar.
double GradCheck(std::vector<Tensor> params,
                 const std::function<Tensor()>& builder, double eps = 1e-5,
                 double floor = 1e-6);

}  // namespace soa::ad

#endif  // SOA_AUTODIFF_GRAD_CHECK_H_
