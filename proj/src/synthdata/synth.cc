#include "soa/synthdata/synth.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "soa/errors.h"
#include "soa/util/random.h"

namespace soa::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
// Level of the per-segment breath noise relative to the segment, in dB.
constexpr double kSegmentNoiseDb = -30.0;

void ValidateTokens(const DomainSpec& spec, const TokenSequence& tokens) {
  SOA_REQUIRE(!tokens.empty(), ContractError, "empty token sequence");
  for (int t : tokens) {
    SOA_REQUIRE(t >= 0 && t < spec.vocabulary_size(), VocabularyError,
                "token " + std::to_string(t) + " not in the inventory of domain " +
                    spec.name);
  }
}

uint32_t FloatBits(float f) { return std::bit_cast<uint32_t>(f); }

}  // namespace

Waveform SynthUtterance(const DomainSpec& spec, const TokenSequence& tokens,
                        uint64_t seed) {
  ValidateDomain(spec);
  ValidateTokens(spec, tokens);
  Rng rng(DeriveSeed(seed, "synth_utterance", spec.seed));
  const double fs = spec.sample_rate_hz;

  std::vector<double> out;
  for (int token : tokens) {
    const SymbolSpec& sym = spec.symbols[token];
    const auto n = static_cast<size_t>(std::lround(sym.duration_s * fs));
    const double tau = sym.duration_s / 2.0;
    std::vector<double> seg(n, 0.0);
    for (int k = 0; k < 3; ++k) {
      const double f = sym.formants_hz[k] * spec.formant_scale;
      const double phase = rng.Uniform(0.0, kTwoPi);
      for (size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / fs;
        seg[i] += sym.amplitudes[k] * std::exp(-t / tau) * std::sin(kTwoPi * f * t + phase);
      }
    }
    double seg_power = 0.0;
    for (double v : seg) seg_power += v * v;
    seg_power /= static_cast<double>(n);

    // One-pole lowpass shaped noise at kSegmentNoiseDb below the segment.
    std::vector<double> noise(n);
    double state = 0.0;
    double noise_power = 0.0;
    for (size_t i = 0; i < n; ++i) {
      state = 0.7 * state + rng.Normal();
      noise[i] = state;
      noise_power += state * state;
    }
    noise_power /= static_cast<double>(n);
    const double g =
        noise_power > 0.0
            ? std::sqrt(seg_power * std::pow(10.0, kSegmentNoiseDb / 10.0) / noise_power)
            : 0.0;
    for (size_t i = 0; i < n; ++i) out.push_back(seg[i] + g * noise[i]);
  }

  double peak = 0.0;
  for (double v : out) peak = std::max(peak, std::abs(v));
  const double norm = peak > 0.0 ? kPeakAmplitude / peak : 0.0;
  Waveform wav(out.size());
  for (size_t i = 0; i < out.size(); ++i) wav[i] = static_cast<float>(out[i] * norm);
  return wav;
}

double SignalPower(std::span<const float> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (float v : x) s += static_cast<double>(v) * v;
  return s / static_cast<double>(x.size());
}

MixResult MixAtSnr(std::span<const float> clean, std::span<const float> noise,
                   double snr_db) {
  SOA_REQUIRE(noise.size() >= clean.size(), ContractError,
              "noise shorter than clean signal");
  const auto noise_seg = noise.first(clean.size());
  const double p_clean = SignalPower(clean);
  const double p_noise = SignalPower(noise_seg);
  SOA_REQUIRE(p_clean > 0.0, DegenerateInputError, "clean signal has zero power");
  SOA_REQUIRE(p_noise > 0.0, DegenerateInputError, "noise has zero power");
  MixResult r;
  r.gain = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  r.mixed.resize(clean.size());
  for (size_t i = 0; i < clean.size(); ++i)
    r.mixed[i] = static_cast<float>(clean[i] + r.gain * noise_seg[i]);
  return r;
}

NoiseBank::NoiseBank(uint64_t seed, int sample_rate_hz, int num_clips,
                     double clip_seconds) {
  SOA_REQUIRE(num_clips >= 1 && clip_seconds > 0.0, ContractError,
              "noise bank needs at least one non-empty clip");
  const auto n = static_cast<size_t>(std::lround(clip_seconds * sample_rate_hz));
  for (int c = 0; c < num_clips; ++c) {
    Rng rng(DeriveSeed(seed, "noise_clip", c));
    // Bandpass biquad (constant 0 dB peak gain) over white noise, plus a
    // broadband floor.
    const double fc = rng.Uniform(300.0, 4000.0);
    const double q = rng.Uniform(0.7, 3.0);
    const double w0 = kTwoPi * fc / sample_rate_hz;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    const double b0 = alpha / a0, b2 = -alpha / a0;
    const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    std::vector<double> clip(n);
    for (size_t i = 0; i < n; ++i) {
      const double x = rng.Normal();
      const double y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
      x2 = x1;
      x1 = x;
      y2 = y1;
      y1 = y;
      clip[i] = y + 0.1 * rng.Normal();
    }
    double p = 0.0;
    for (double v : clip) p += v * v;
    p /= static_cast<double>(n);
    const double scale = 0.1 / std::sqrt(p);
    Waveform w(n);
    for (size_t i = 0; i < n; ++i) w[i] = static_cast<float>(clip[i] * scale);
    clips_.push_back(std::move(w));
  }
}

bool Corpus::labeled() const {
  return !utterances.empty() &&
         std::all_of(utterances.begin(), utterances.end(),
                     [](const Utterance& u) { return u.transcript.has_value(); });
}

Corpus SampleCorpus(const DomainSpec& spec, int n_utterances, LengthRange len,
                    bool labeled, uint64_t seed, const std::string& split) {
  ValidateDomain(spec);
  SOA_REQUIRE(n_utterances >= 1, ContractError, "corpus needs at least one utterance");
  SOA_REQUIRE(1 <= len.min_tokens && len.min_tokens <= len.max_tokens,
              ContractError, "invalid utterance length range");
  const uint64_t base = DeriveSeed(seed, "corpus", spec.seed);

  std::optional<NoiseBank> bank;
  if (spec.noise_snr_range_db)
    bank.emplace(DeriveSeed(spec.seed, "noise_bank"), spec.sample_rate_hz);

  Corpus corpus;
  corpus.domain = spec.name;
  corpus.split = split;
  corpus.sample_rate_hz = spec.sample_rate_hz;
  corpus.utterances.reserve(n_utterances);
  for (int i = 0; i < n_utterances; ++i) {
    Rng rng(DeriveSeed(base, "utterance", i));
    const int n_tokens =
        len.min_tokens + static_cast<int>(rng.UniformInt(len.max_tokens - len.min_tokens + 1));
    TokenSequence tokens(n_tokens);
    for (int& t : tokens) t = static_cast<int>(rng.UniformInt(spec.vocabulary_size()));

    Utterance u;
    std::ostringstream id;
    id << spec.name << '_' << split << '_' << i;
    u.id = id.str();
    u.samples = SynthUtterance(spec, tokens, DeriveSeed(base, "synth", i));
    if (bank) {
      const Waveform& clip = bank->clips()[rng.UniformInt(bank->clips().size())];
      SOA_REQUIRE(clip.size() >= u.samples.size(), ContractError,
                  "noise clip shorter than utterance");
      const size_t offset = rng.UniformInt(clip.size() - u.samples.size() + 1);
      const double snr = rng.Uniform(spec.noise_snr_range_db->low_db,
                                     spec.noise_snr_range_db->high_db);
      std::span<const float> noise(clip.data() + offset, u.samples.size());
      MixResult mix = MixAtSnr(u.samples, noise, snr);
      double p_scaled = 0.0;
      for (float v : noise) p_scaled += (mix.gain * v) * (mix.gain * v);
      p_scaled /= static_cast<double>(noise.size());
      u.snr_db = 10.0 * std::log10(SignalPower(u.samples) / p_scaled);
      u.samples = std::move(mix.mixed);
    }
    u.spoken = tokens;
    if (labeled) u.transcript = std::move(tokens);
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

Corpus TakeSubset(const Corpus& corpus, size_t count) {
  Corpus out = corpus;
  if (count < out.utterances.size()) out.utterances.resize(count);
  return out;
}

void WriteCorpus(const Corpus& corpus, const DomainSpec& spec,
                 const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "wav");
  std::ofstream manifest(fs::path(dir) / "manifest.tsv");
  SOA_REQUIRE(manifest.good(), Error, "cannot write manifest in " + dir);
  manifest << "path\ttranscript\tdomain\tsplit\tsample_rate_hz\n";
  for (const Utterance& u : corpus.utterances) {
    const std::string rel = "wav/" + u.id + ".f32";
    std::ofstream wav(fs::path(dir) / rel, std::ios::binary);
    for (float v : u.samples) {
      const uint32_t bits = FloatBits(v);
      const char bytes[4] = {static_cast<char>(bits & 0xff),
                             static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff),
                             static_cast<char>((bits >> 24) & 0xff)};
      wav.write(bytes, 4);
    }
    SOA_REQUIRE(wav.good(), Error, "failed writing " + rel);
    manifest << rel << '\t';
    if (u.transcript) {
      for (size_t i = 0; i < u.transcript->size(); ++i) {
        if (i) manifest << ' ';
        manifest << spec.symbols.at((*u.transcript)[i]).id;
      }
    }
    manifest << '\t' << corpus.domain << '\t' << corpus.split << '\t'
             << corpus.sample_rate_hz << '\n';
  }
}

Corpus ReadCorpus(const std::string& dir, const DomainSpec& spec) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.tsv");
  SOA_REQUIRE(manifest.good(), DataContractError, "no manifest.tsv in " + dir);
  Corpus corpus;
  std::string line;
  std::getline(manifest, line);  // header
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() == 4) fields.insert(fields.begin() + 1, "");
    SOA_REQUIRE(fields.size() == 5, DataContractError, "malformed manifest line: " + line);
    corpus.domain = fields[2];
    corpus.split = fields[3];
    corpus.sample_rate_hz = std::stoi(fields[4]);

    Utterance u;
    u.id = fs::path(fields[0]).stem().string();
    std::ifstream wav(fs::path(dir) / fields[0], std::ios::binary);
    SOA_REQUIRE(wav.good(), DataContractError, "missing waveform " + fields[0]);
    std::vector<char> bytes((std::istreambuf_iterator<char>(wav)), {});
    SOA_REQUIRE(bytes.size() % 4 == 0, DataContractError,
                "waveform size not a multiple of 4: " + fields[0]);
    u.samples.resize(bytes.size() / 4);
    for (size_t i = 0; i < u.samples.size(); ++i) {
      uint32_t bits = 0;
      for (int b = 3; b >= 0; --b)
        bits = (bits << 8) | static_cast<unsigned char>(bytes[4 * i + b]);
      u.samples[i] = std::bit_cast<float>(bits);
    }
    if (!fields[1].empty()) {
      TokenSequence tokens;
      std::stringstream ts(fields[1]);
      std::string tok;
      while (ts >> tok) {
        const int idx = spec.TokenIndex(tok);
        SOA_REQUIRE(idx >= 0, VocabularyError, "unknown token '" + tok + "' in manifest");
        tokens.push_back(idx);
      }
      u.spoken = tokens;
      u.transcript = std::move(tokens);
    }
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace soa::synth
