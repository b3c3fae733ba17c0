#ifndef SOA_EVAL_EVAL_H_
#define SOA_EVAL_EVAL_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "soa/autodiff/tensor.h"
#include "soa/surgery/checkpoint.h"
#include "soa/synthdata/synth.h"

namespace soa::eval {

// Argmax per frame, collapse repeats, drop blanks. Returns CTC class indices
// (see objectives::ClassesToTokens for the token mapping).
std::vector<int> GreedyCtcDecode(const ad::Tensor& log_probs, int blank = 0);

struct ErrorCounts {
  double wer = 0.0;
  int64_t substitutions = 0;
  int64_t insertions = 0;
  int64_t deletions = 0;
  int64_t ref_words = 0;
};

// Unit-cost Levenshtein alignment. Throws UndefinedMetricError on empty ref.
ErrorCounts WordErrorRate(std::span<const int> ref, std::span<const int> hyp);

struct EvalReport {
  std::string split;
  double wer = 0.0;
  int64_t substitutions = 0;
  int64_t insertions = 0;
  int64_t deletions = 0;
  int64_t ref_words = 0;
  int64_t utterances = 0;
  std::string lineage_digest;

  // Equal error counts, ignoring which checkpoint produced them.
  bool SameScores(const EvalReport& o) const;
};

// Greedy decodes of every utterance scored against its transcript. Throws
// ContractError when the checkpoint has no CTC head, DataContractError when
// the corpus is unlabeled.
EvalReport Evaluate(const surgery::ModelCheckpoint& ckpt, const synth::Corpus& corpus,
                    const std::string& split_name = "");

void WriteEvalCsv(const std::vector<EvalReport>& reports, const std::string& path);

// Throws DegenerateInputError on a zero-norm vector, ContractError on a size
// mismatch.
double CosineSimilarity(std::span<const double> a, std::span<const double> b);

struct Peak {
  size_t index = 0;
  double prominence = 0.0;
};

// Local maxima (flat tops resolved to their left edge) whose prominence is at
// least min_prominence, in index order. Prominence is the height above the
// higher of the two lowest points reached before meeting a higher sample on
// each side.
std::vector<Peak> FindPeaks(std::span<const double> curve, double min_prominence);

enum class LatentPooling { kMean, kMax };

struct ProbeOptions {
  double f_lo_hz = 10.0;
  double f_hi_hz = 8000.0;
  double step_hz = 10.0;
  double amplitude = 0.5;
  double duration_s = 1.0;
  LatentPooling pooling = LatentPooling::kMean;
  double min_prominence = 0.02;
};

struct ProbeReport {
  std::vector<double> frequencies_hz;
  std::vector<double> similarity;
  std::vector<double> peaks_hz;
  std::vector<double> peak_prominences;
  std::vector<double> reference_formants_hz;
};

// Pooled feature-encoder latents of the probe sinusoids, computed once per
// checkpoint and reused across probed segments.
class SinusoidProbe {
 public:
  SinusoidProbe(const surgery::ModelCheckpoint& ckpt, int sample_rate_hz,
                ProbeOptions options = {});

  // Cosine similarity of the pooled segment latent against every probe
  // sinusoid. Throws InputTooShortError below the encoder receptive field.
  ProbeReport Probe(std::span<const float> segment,
                    std::vector<double> reference_formants_hz = {}) const;

  const std::vector<double>& frequencies() const { return frequencies_; }
  std::vector<double> PooledLatent(std::span<const float> waveform) const;

 private:
  model::Model model_;
  int sample_rate_hz_;
  ProbeOptions options_;
  std::vector<double> frequencies_;
  std::vector<std::vector<double>> sinusoid_latents_;
};

std::vector<float> ProbeSinusoid(double freq_hz, int sample_rate_hz, double duration_s,
                                 double amplitude);

// Prominence of the strongest detected peak within tolerance_hz of each
// formant (0 when none).
std::vector<double> FormantProminences(const ProbeReport& report,
                                       std::span<const double> formants_hz,
                                       double tolerance_hz);

void WriteProbeCsv(const ProbeReport& report, const std::string& path);

}  // namespace soa::eval

#endif  // SOA_EVAL_EVAL_H_
