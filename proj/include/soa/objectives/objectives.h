#ifndef SOA_OBJECTIVES_OBJECTIVES_H_
#define SOA_OBJECTIVES_OBJECTIVES_H_

#include <cstdint>
#include <span>
#include <vector>

#include "soa/autodiff/tensor.h"
#include "soa/model/model.h"

namespace soa::objectives {

struct MaskPlan {
  std::vector<bool> mask;
  double start_prob = 0.0;
  int64_t span = 1;

  int64_t num_masked() const;
  std::vector<int64_t> masked_positions() const;
};

// Every frame starts a span of `span` frames with probability start_prob
// (clipped at T). With force_span set and nothing masked, one span is placed
// uniformly so the contrastive loss always has targets.
MaskPlan SampleMask(int64_t num_frames, double start_prob, int64_t span,
                    uint64_t seed, bool force_span = true);

struct ContrastiveBatch {
  ad::Tensor contexts;  // [N x F] projected contexts at masked frames
  ad::Tensor targets;   // [N x F] projected quantized vectors, same frames
  // distractors[n] holds K row indices into targets, none equal to n.
  std::vector<std::vector<int64_t>> distractors;
  double temperature = 0.1;
};

// For each of n positions, k indices drawn uniformly (with replacement) from
// the other n-1 positions. Needs n >= 2.
std::vector<std::vector<int64_t>> SampleDistractors(int64_t n, int64_t k,
                                                    uint64_t seed);

// Mean over positions of -log softmax over {true, distractors} of
// cos(context, candidate) / temperature, the true target at index 0.
ad::Tensor ContrastiveLoss(const ContrastiveBatch& batch);

// (1/G) sum_g (1 - exp(H(p_g)) / V) for avg_code_probs [G x V].
ad::Tensor DiversityLoss(const ad::Tensor& avg_code_probs);

// Frames a CTC alignment of `labels` needs: |labels| plus one blank between
// each pair of equal neighbours.
int64_t CtcMinFrames(std::span<const int> labels);

// Negative log-likelihood of labels (class ids, never the blank) under
// log_probs [T x C], summed over all alignments. Throws
// InfeasibleTargetError when T < CtcMinFrames(labels).
ad::Tensor CtcLoss(const ad::Tensor& log_probs, std::span<const int> labels,
                   int blank = model::kBlank);

// Exhaustive enumeration of all C^T frame paths. Returns +inf when nothing
// collapses to labels; refuses T > 8.
double CtcBruteForce(const ad::Tensor& log_probs, std::span<const int> labels,
                     int blank = model::kBlank);

struct PretrainSettings {
  double mask_prob = 0.065;
  int64_t mask_span = 10;
  int64_t num_distractors = 10;
  double logit_temperature = 0.1;
  double diversity_weight = 0.1;
  double gumbel_temperature = 2.0;
  bool hard_quantizer = true;
};

struct PretrainLossTerms {
  ad::Tensor total;        // contrastive + weight * diversity
  ad::Tensor contrastive;
  ad::Tensor diversity;
  int64_t num_masked = 0;
};

// wav2vec-style loss of one utterance. Mask, distractors and Gumbel noise
// are drawn from seed and enter the graph as constants.
PretrainLossTerms PretrainLoss(const model::Model& model,
                               std::span<const float> waveform,
                               const PretrainSettings& settings, uint64_t seed);

// CTC loss of one labeled utterance; tokens are vocabulary indices.
ad::Tensor FinetuneLoss(const model::Model& model, std::span<const float> waveform,
                        std::span<const int> tokens);

// Vocabulary tokens -> CTC class ids (shifted past the blank) and back.
std::vector<int> TokensToClasses(std::span<const int> tokens);
std::vector<int> ClassesToTokens(std::span<const int> classes);

}  // namespace soa::objectives

#endif  // SOA_OBJECTIVES_OBJECTIVES_H_
