#include "soa/autodiff/grad_check.h"

#include <algorithm>
#include <cmath>
#include <limits>

namespace soa::ad {

double GradCheck(std::vector<Tensor> params,
                 const std::function<Tensor()>& builder, double eps,
                 double floor) {
  for (Tensor& p : params) p.ZeroGrad();
  Backward(builder());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_values();
    for (size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = builder().item();
      values[i] = saved - eps;
      const double down = builder().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      // Rounding in up - down alone can produce this much difference.
      const double noise = 8.0 * std::numeric_limits<double>::epsilon() *
                           std::max(std::abs(up), std::abs(down)) / (2.0 * eps);
      const double diff = std::abs(analytic[pi][i] - numeric);
      const double err =
          diff <= noise ? 0.0
                        : diff / std::max({floor, std::abs(numeric), std::abs(analytic[pi][i])});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace soa::ad
