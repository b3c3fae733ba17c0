#ifndef SOA_UTIL_RANDOM_H_
#define SOA_UTIL_RANDOM_H_

#include <cstdint>
#include <random>
#include <string_view>

namespace soa {

// Mixes a base seed with a stream label so independent consumers (dev/test
// splits, per-utterance noise, mask sampling) never share a sequence.
uint64_t DeriveSeed(uint64_t base, std::string_view stream, uint64_t index = 0);

// Seeded generator with portable uniform/normal draws. std::*_distribution
// output is implementation-defined, so draws are built from raw 64-bit words.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t NextU64() { return engine_(); }
  // Uniform in [0, 1).
  double Uniform();
  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }
  // Uniform integer in [0, n).
  int64_t UniformInt(int64_t n);
  double Normal();
  // Standard Gumbel sample.
  double Gumbel();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace soa

#endif  // SOA_UTIL_RANDOM_H_
