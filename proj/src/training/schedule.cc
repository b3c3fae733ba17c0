#include "soa/training/schedule.h"

#include <algorithm>
#include <cmath>

#include "soa/errors.h"

namespace soa::training {

double NoamHoldDecay::operator()(int64_t step) const {
  SOA_REQUIRE(step >= 0, ContractError, "negative step");
  SOA_REQUIRE(warmup >= 1 && hold >= 1 && decay >= 1, ContractError,
              "warmup, hold and decay must be >= 1");
  SOA_REQUIRE(0.0 < lambda && lambda <= 1.0, ContractError, "lambda must lie in (0, 1]");
  if (step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (step <= warmup + hold) return peak;
  const int64_t into_decay = std::min(step - warmup - hold, decay);
  if (into_decay == decay) return peak * lambda;
  return peak * std::pow(lambda, static_cast<double>(into_decay) / static_cast<double>(decay));
}

double NoamHoldDecayLr(int64_t step, const NoamHoldDecay& s) { return s(step); }

int64_t PolyWarmupSteps(int64_t total) {
  return static_cast<int64_t>(std::ceil(kPolyWarmupFraction * static_cast<double>(total)));
}

double WarmupPolyLr(int64_t step, int64_t total, double peak, double power) {
  SOA_REQUIRE(0 <= step && step <= total, ContractError, "step outside [0, total]");
  SOA_REQUIRE(power > 0.0, ContractError, "power must be positive");
  const int64_t warmup = PolyWarmupSteps(total);
  if (step <= warmup) {
    return warmup == 0 ? peak : peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * std::pow(1.0 - progress, power);
}

double EstimateFlops(double wall_seconds, int n_devices, double device_tflops) {
  SOA_REQUIRE(wall_seconds >= 0.0 && n_devices >= 0 && device_tflops >= 0.0,
              ContractError, "FLOPs inputs must be non-negative");
  return wall_seconds * static_cast<double>(n_devices) * device_tflops * 1e12;
}

}  // namespace soa::training
