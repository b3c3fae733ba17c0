#ifndef SOA_SYNTHDATA_SYNTH_H_
#define SOA_SYNTHDATA_SYNTH_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "soa/synthdata/domain.h"

namespace soa::synth {

// Peak amplitude every synthesized utterance is normalized to.
inline constexpr double kPeakAmplitude = 0.5;

// Renders tokens as concatenated segments of three exponentially damped
// sinusoids at formant_scale * formants plus -30 dB lowpass noise.
// Deterministic in (spec, tokens, seed).
Waveform SynthUtterance(const DomainSpec& spec, const TokenSequence& tokens,
                        uint64_t seed);

// Mean square of the samples.
double SignalPower(std::span<const float> x);

struct MixResult {
  Waveform mixed;
  double gain = 0.0;  // factor applied to the noise
};

// clean + g * noise[0:len(clean)], g = sqrt(P_clean / (P_noise 10^(snr/10))).
MixResult MixAtSnr(std::span<const float> clean, std::span<const float> noise,
                   double snr_db);

// Fixed set of filtered-noise clips used for noisy domains.
class NoiseBank {
 public:
  NoiseBank(uint64_t seed, int sample_rate_hz, int num_clips = 16,
            double clip_seconds = 2.0);

  const std::vector<Waveform>& clips() const { return clips_; }
  size_t clip_length() const { return clips_.front().size(); }

 private:
  std::vector<Waveform> clips_;
};

struct Utterance {
  std::string id;
  Waveform samples;
  std::optional<TokenSequence> transcript;
  // Measured SNR of the clean/noise mixture, set for noisy domains.
  std::optional<double> snr_db;
  // Tokens spoken, kept even for unlabeled corpora for diagnostics.
  TokenSequence spoken;
};

struct Corpus {
  std::string domain;
  std::string split;
  int sample_rate_hz = 16000;
  std::vector<Utterance> utterances;

  bool labeled() const;
};

struct LengthRange {
  int min_tokens = 4;
  int max_tokens = 12;
};

Corpus SampleCorpus(const DomainSpec& spec, int n_utterances, LengthRange len,
                    bool labeled, uint64_t seed, const std::string& split = "train");

// First `count` utterances of corpus, as a new corpus.
Corpus TakeSubset(const Corpus& corpus, size_t count);

// Writes manifest.tsv plus one raw little-endian float32 file per utterance.
void WriteCorpus(const Corpus& corpus, const DomainSpec& spec,
                 const std::string& dir);
Corpus ReadCorpus(const std::string& dir, const DomainSpec& spec);

}  // namespace soa::synth

#endif  // SOA_SYNTHDATA_SYNTH_H_
