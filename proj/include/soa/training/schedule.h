#ifndef SOA_TRAINING_SCHEDULE_H_
#define SOA_TRAINING_SCHEDULE_H_

#include <cstdint>

namespace soa::training {

// Linear warmup to peak over [0, warmup], constant peak over
// (warmup, warmup + hold], then peak * lambda^((step - warmup - hold) / decay)
// over the decay phase and peak * lambda afterwards.
struct NoamHoldDecay {
  int64_t warmup = 8000;
  int64_t hold = 32000;
  int64_t decay = 40000;
  double peak = 3e-5;
  double lambda = 0.05;

  double operator()(int64_t step) const;
};

// Fraction of a run spent warming up in WarmupPolyLr.
inline constexpr double kPolyWarmupFraction = 0.08;

// Linear warmup to peak over the first ceil(0.08 * total) steps, then
// peak * (1 - progress)^power reaching 0 at step == total.
double WarmupPolyLr(int64_t step, int64_t total, double peak, double power);
int64_t PolyWarmupSteps(int64_t total);

double NoamHoldDecayLr(int64_t step, const NoamHoldDecay& s);

// Device-time cost model: seconds x devices x per-device throughput.
double EstimateFlops(double wall_seconds, int n_devices, double device_tflops);

}  // namespace soa::training

#endif  // SOA_TRAINING_SCHEDULE_H_
