#ifndef SOA_MODEL_MODEL_H_
#define SOA_MODEL_MODEL_H_

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "soa/autodiff/tensor.h"

namespace soa::model {

struct ConvLayerConfig {
  int64_t channels = 0;
  int64_t kernel = 0;
  int64_t stride = 1;

  bool operator==(const ConvLayerConfig&) const = default;
};

// Architecture of the miniature network. Two configs with equal fingerprints
// have identical parameter names and shapes.
struct ModelConfig {
  // Total stride 160 (10 ms hop at 16 kHz), receptive field 210 samples.
  std::vector<ConvLayerConfig> conv_layers = {{32, 20, 10}, {64, 8, 4}, {64, 4, 4}};
  int64_t model_dim = 64;
  int64_t num_blocks = 2;
  int64_t num_heads = 2;
  int64_t ffn_dim = 128;
  int64_t pos_conv_kernel = 9;  // odd, "same" padding
  int64_t codebook_groups = 2;
  int64_t codebook_entries = 20;
  int64_t codevector_dim = 32;  // width of a concatenated quantized vector
  int64_t final_dim = 32;       // space the contrastive similarity lives in
  int64_t vocab_size = 8;       // CTC classes = vocab_size + 1 (blank = 0)

  int64_t latent_dim() const { return conv_layers.back().channels; }
  int64_t ctc_classes() const { return vocab_size + 1; }

  // Throws ContractError on inconsistent dimensions.
  void Validate() const;
  // Canonical JSON text; the fingerprint is its SHA-256.
  std::string ToJson() const;
  static ModelConfig FromJson(const std::string& text);
  std::string Fingerprint() const;

  bool operator==(const ModelConfig&) const = default;
};

inline constexpr int kBlank = 0;

// Frames produced from input_samples by the conv stack. Throws
// InputTooShortError below the receptive field.
int64_t OutputLengths(int64_t input_samples,
                      std::span<const ConvLayerConfig> layers);
int64_t ReceptiveField(std::span<const ConvLayerConfig> layers);
int64_t TotalStride(std::span<const ConvLayerConfig> layers);

enum class Component { kFeatureEncoder, kContextualEncoder, kQuantizer, kCtcHead };

const char* ComponentName(Component c);
Component ComponentFromName(const std::string& name);
// Component owning a parameter, from its prefix; throws ContractError when the
// name carries no known prefix.
Component ComponentOf(const std::string& param_name);
const std::vector<Component>& AllComponents();

using ParameterMap = std::map<std::string, ad::Tensor>;

struct QuantizerOutput {
  ad::Tensor quantized;       // [T x codevector_dim]
  ad::Tensor avg_code_probs;  // [G x V], noise-free softmax averaged over frames
  std::vector<std::vector<int>> codes;  // [T][G] selected entries
};

// Parameters plus the forward passes over them. Each utterance is run as its
// own graph so no padding is involved.
class Model {
 public:
  Model(ModelConfig config, ParameterMap params);

  // Random initialization of feature encoder, contextual encoder and
  // quantizer. The CTC head is added at finetuning time.
  static Model Initialize(const ModelConfig& config, uint64_t seed);
  void AddCtcHead(uint64_t seed);
  bool has_ctc_head() const;

  const ModelConfig& config() const { return config_; }
  const ParameterMap& params() const { return params_; }
  ParameterMap& mutable_params() { return params_; }
  const ad::Tensor& param(const std::string& name) const;

  // Marks exactly the parameters of `trainable` components as requiring
  // gradients.
  void SetTrainable(const std::set<Component>& trainable);

  // waveform -> z [T x latent_dim]
  ad::Tensor FeatureEncode(std::span<const float> waveform) const;
  // z [T x latent_dim] -> c [T x model_dim]; masked frames are replaced by the
  // learned mask embedding after the input projection.
  ad::Tensor ContextEncode(const ad::Tensor& latents,
                           const std::vector<bool>& mask) const;
  // gumbel_noise, when given, is [T x G*V] and added to the logits.
  QuantizerOutput Quantize(const ad::Tensor& latents, double temperature,
                           bool hard, const ad::Tensor* gumbel_noise) const;
  // Context and quantized vectors mapped into the similarity space.
  ad::Tensor ProjectContext(const ad::Tensor& contexts) const;
  ad::Tensor ProjectQuantized(const ad::Tensor& quantized) const;
  // c [T x model_dim] -> log-probabilities [T x (vocab+1)]
  ad::Tensor CtcLogProbs(const ad::Tensor& contexts) const;

  // Convenience: waveform -> CTC log-probabilities, no masking.
  ad::Tensor Recognize(std::span<const float> waveform) const;

 private:
  ad::Tensor Block(const ad::Tensor& x, int64_t index) const;

  ModelConfig config_;
  ParameterMap params_;
};

}  // namespace soa::model

#endif  // SOA_MODEL_MODEL_H_
