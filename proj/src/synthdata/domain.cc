#include "soa/synthdata/domain.h"

#include "soa/errors.h"

namespace soa::synth {

int DomainSpec::TokenIndex(const std::string& id) const {
  for (size_t i = 0; i < symbols.size(); ++i)
    if (symbols[i].id == id) return static_cast<int>(i);
  return -1;
}

void ValidateDomain(const DomainSpec& spec) {
  SOA_REQUIRE(spec.sample_rate_hz > 0, ContractError, "sample rate must be positive");
  SOA_REQUIRE(!spec.symbols.empty(), ContractError, "empty symbol inventory");
  SOA_REQUIRE(spec.formant_scale > 0.0, ContractError, "formant_scale must be positive");
  const double nyquist = spec.sample_rate_hz / 2.0;
  for (const SymbolSpec& s : spec.symbols) {
    const auto& f = s.formants_hz;
    SOA_REQUIRE(0.0 < f[0] && f[0] < f[1] && f[1] < f[2], ContractError,
                "symbol " + s.id + ": formants must satisfy 0 < F1 < F2 < F3");
    SOA_REQUIRE(f[2] * spec.formant_scale < nyquist, ContractError,
                "symbol " + s.id + ": scaled F3 at or above Nyquist");
    SOA_REQUIRE(s.duration_s > 0.0, ContractError,
                "symbol " + s.id + ": duration must be positive");
  }
  if (spec.noise_snr_range_db) {
    SOA_REQUIRE(spec.noise_snr_range_db->low_db <= spec.noise_snr_range_db->high_db,
                ContractError, "noise SNR range low > high");
  }
}

std::vector<SymbolSpec> DefaultSymbolInventory() {
  // Formant triplets with a shared geometric mean; symbols differ in formant
  // ratios. s0 is the probe vowel.
  const std::array<std::array<double, 3>, 8> formants = {{
      {568, 1559, 2944},
      {250, 2990, 3470},
      {605, 870, 4950},
      {326, 1614, 4948},
      {884, 1576, 1870},
      {395, 2359, 2800},
      {749, 1053, 3306},
      {477, 1273, 4292},
  }};
  std::vector<SymbolSpec> out;
  for (size_t i = 0; i < formants.size(); ++i) {
    SymbolSpec s;
    s.id = "s" + std::to_string(i);
    s.formants_hz = formants[i];
    out.push_back(s);
  }
  return out;
}

DomainSpec SourceDomain(uint64_t seed) {
  DomainSpec d;
  d.name = "source";
  d.symbols = DefaultSymbolInventory();
  d.formant_scale = 1.0;
  d.seed = seed;
  return d;
}

DomainSpec TargetDomain(uint64_t seed) {
  DomainSpec d = SourceDomain(seed);
  d.name = "target";
  d.formant_scale = 1.3;
  return d;
}

DomainSpec NoisyDomain(uint64_t seed) {
  DomainSpec d = SourceDomain(seed);
  d.name = "noisy";
  d.noise_snr_range_db = SnrRange{0.0, 15.0};
  return d;
}

}  // namespace soa::synth
