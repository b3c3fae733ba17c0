#ifndef SOA_SYNTHDATA_DOMAIN_H_
#define SOA_SYNTHDATA_DOMAIN_H_

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace soa::synth {

using Waveform = std::vector<float>;
using TokenSequence = std::vector<int>;

// A pseudo-phone: three resonances with fixed relative amplitudes.
struct SymbolSpec {
  std::string id;
  std::array<double, 3> formants_hz{};
  std::array<double, 3> amplitudes{1.0, 0.5, 0.25};
  double duration_s = 0.06;
};

struct SnrRange {
  double low_db = 0.0;
  double high_db = 15.0;
};

// Generative description of one synthetic speech domain.
struct DomainSpec {
  std::string name;
  int sample_rate_hz = 16000;
  std::vector<SymbolSpec> symbols;
  double formant_scale = 1.0;
  std::optional<SnrRange> noise_snr_range_db;
  uint64_t seed = 0;

  int vocabulary_size() const { return static_cast<int>(symbols.size()); }
  // Index of the symbol with this id, or -1.
  int TokenIndex(const std::string& id) const;
};

// Throws ContractError when formants are unordered, above Nyquist after
// scaling, durations are non-positive, or the SNR range is inverted.
void ValidateDomain(const DomainSpec& spec);

// The eight vowel-like pseudo-phones shared by every default domain. Symbol
// "s0" carries formants 568/1559/2944 Hz.
std::vector<SymbolSpec> DefaultSymbolInventory();

DomainSpec SourceDomain(uint64_t seed);
// Source inventory with every formant scaled by 1.3.
DomainSpec TargetDomain(uint64_t seed);
// Source inventory mixed with bank noise at SNRs drawn from [0, 15] dB.
DomainSpec NoisyDomain(uint64_t seed);

}  // namespace soa::synth

#endif  // SOA_SYNTHDATA_DOMAIN_H_
