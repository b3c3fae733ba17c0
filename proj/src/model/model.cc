#include "soa/model/model.h"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "soa/autodiff/ops.h"
#include "soa/errors.h"
#include "soa/util/digest.h"
#include "soa/util/random.h"

namespace soa::model {

using ad::Tensor;
using nlohmann::json;

void ModelConfig::Validate() const {
  SOA_REQUIRE(!conv_layers.empty(), ContractError, "no conv layers");
  for (const auto& l : conv_layers)
    SOA_REQUIRE(l.channels > 0 && l.kernel > 0 && l.stride > 0, ContractError,
                "conv layer dimensions must be positive");
  SOA_REQUIRE(model_dim > 0 && num_blocks >= 0 && ffn_dim > 0, ContractError,
              "transformer dimensions must be positive");
  SOA_REQUIRE(num_heads > 0 && model_dim % num_heads == 0, ContractError,
              "attention heads must divide model_dim");
  SOA_REQUIRE(pos_conv_kernel > 0 && pos_conv_kernel % 2 == 1, ContractError,
              "pos_conv_kernel must be odd");
  SOA_REQUIRE(codebook_groups > 0 && codebook_entries > 1, ContractError,
              "quantizer needs groups >= 1 and entries >= 2");
  SOA_REQUIRE(codevector_dim % codebook_groups == 0, ContractError,
              "codebook groups must divide codevector_dim");
  SOA_REQUIRE(final_dim > 0 && vocab_size > 0, ContractError,
              "final_dim and vocab_size must be positive");
}

std::string ModelConfig::ToJson() const {
  json layers = json::array();
  for (const auto& l : conv_layers)
    layers.push_back({{"channels", l.channels}, {"kernel", l.kernel}, {"stride", l.stride}});
  json j = {{"conv_layers", layers},
            {"model_dim", model_dim},
            {"num_blocks", num_blocks},
            {"num_heads", num_heads},
            {"ffn_dim", ffn_dim},
            {"pos_conv_kernel", pos_conv_kernel},
            {"codebook_groups", codebook_groups},
            {"codebook_entries", codebook_entries},
            {"codevector_dim", codevector_dim},
            {"final_dim", final_dim},
            {"vocab_size", vocab_size}};
  return j.dump();
}

ModelConfig ModelConfig::FromJson(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.conv_layers.clear();
    for (const auto& l : j.at("conv_layers"))
      c.conv_layers.push_back({l.at("channels").get<int64_t>(), l.at("kernel").get<int64_t>(),
                               l.at("stride").get<int64_t>()});
    c.model_dim = j.at("model_dim");
    c.num_blocks = j.at("num_blocks");
    c.num_heads = j.at("num_heads");
    c.ffn_dim = j.at("ffn_dim");
    c.pos_conv_kernel = j.at("pos_conv_kernel");
    c.codebook_groups = j.at("codebook_groups");
    c.codebook_entries = j.at("codebook_entries");
    c.codevector_dim = j.at("codevector_dim");
    c.final_dim = j.at("final_dim");
    c.vocab_size = j.at("vocab_size");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.Validate();
  return c;
}

std::string ModelConfig::Fingerprint() const { return Sha256Hex(ToJson()); }

int64_t OutputLengths(int64_t input_samples, std::span<const ConvLayerConfig> layers) {
  const int64_t rf = ReceptiveField(layers);
  SOA_REQUIRE(input_samples >= rf, InputTooShortError,
              "waveform of " + std::to_string(input_samples) +
                  " samples is shorter than the receptive field " + std::to_string(rf));
  int64_t len = input_samples;
  for (const auto& l : layers) len = ad::Conv1dOutputLength(len, l.kernel, l.stride);
  return len;
}

int64_t ReceptiveField(std::span<const ConvLayerConfig> layers) {
  int64_t rf = 1, jump = 1;
  for (const auto& l : layers) {
    rf += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return rf;
}

int64_t TotalStride(std::span<const ConvLayerConfig> layers) {
  int64_t s = 1;
  for (const auto& l : layers) s *= l.stride;
  return s;
}

const char* ComponentName(Component c) {
  switch (c) {
    case Component::kFeatureEncoder: return "feature_encoder";
    case Component::kContextualEncoder: return "contextual_encoder";
    case Component::kQuantizer: return "quantizer";
    case Component::kCtcHead: return "ctc_head";
  }
  return "";
}

const std::vector<Component>& AllComponents() {
  static const std::vector<Component> kAll = {
      Component::kFeatureEncoder, Component::kContextualEncoder,
      Component::kQuantizer, Component::kCtcHead};
  return kAll;
}

Component ComponentFromName(const std::string& name) {
  for (Component c : AllComponents())
    if (name == ComponentName(c)) return c;
  throw ContractError("unknown component '" + name + "'");
}

Component ComponentOf(const std::string& param_name) {
  const auto dot = param_name.find('.');
  SOA_REQUIRE(dot != std::string::npos, ContractError,
              "parameter '" + param_name + "' has no component prefix");
  return ComponentFromName(param_name.substr(0, dot));
}

namespace {

Tensor NormalParam(Rng& rng, ad::Shape shape, double stddev) {
  std::vector<double> v(ad::NumElements(shape));
  for (double& x : v) x = stddev * rng.Normal();
  return Tensor::Parameter(std::move(shape), std::move(v));
}

Tensor UniformParam(Rng& rng, ad::Shape shape, double lo, double hi) {
  std::vector<double> v(ad::NumElements(shape));
  for (double& x : v) x = rng.Uniform(lo, hi);
  return Tensor::Parameter(std::move(shape), std::move(v));
}

Tensor FilledParam(ad::Shape shape, double value) {
  std::vector<double> v(ad::NumElements(shape), value);
  return Tensor::Parameter(std::move(shape), std::move(v));
}

void AddLinear(ParameterMap& p, Rng& rng, const std::string& name, int64_t in,
               int64_t out) {
  p[name + ".weight"] = NormalParam(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  p[name + ".bias"] = FilledParam({out}, 0.0);
}

void AddNorm(ParameterMap& p, const std::string& name, int64_t width) {
  p[name + ".gamma"] = FilledParam({width}, 1.0);
  p[name + ".beta"] = FilledParam({width}, 0.0);
}

Tensor LinearNamed(const ParameterMap& p, const std::string& name, const Tensor& x) {
  return ad::Linear(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

Tensor NormNamed(const ParameterMap& p, const std::string& name, const Tensor& x) {
  return ad::LayerNorm(x, p.at(name + ".gamma"), p.at(name + ".beta"));
}

}  // namespace

Model::Model(ModelConfig config, ParameterMap params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.Validate();
  for (const auto& [name, t] : params_) ComponentOf(name);
}

Model Model::Initialize(const ModelConfig& config, uint64_t seed) {
  config.Validate();
  Rng rng(DeriveSeed(seed, "model_init"));
  ParameterMap p;

  int64_t in_ch = 1;
  for (size_t i = 0; i < config.conv_layers.size(); ++i) {
    const auto& l = config.conv_layers[i];
    const std::string base = "feature_encoder.conv" + std::to_string(i);
    p[base + ".weight"] = NormalParam(rng, {l.channels, in_ch, l.kernel},
                                      std::sqrt(2.0 / static_cast<double>(in_ch * l.kernel)));
    AddNorm(p, "feature_encoder.norm" + std::to_string(i), l.channels);
    in_ch = l.channels;
  }
  AddNorm(p, "feature_encoder.out_norm", config.latent_dim());

  const int64_t d = config.model_dim;
  AddLinear(p, rng, "contextual_encoder.input_proj", config.latent_dim(), d);
  p["contextual_encoder.mask_emb"] = UniformParam(rng, {d}, 0.0, 1.0);
  p["contextual_encoder.pos_conv.weight"] =
      NormalParam(rng, {d, d, config.pos_conv_kernel},
                  std::sqrt(1.0 / static_cast<double>(d * config.pos_conv_kernel)));
  p["contextual_encoder.pos_conv.bias"] = FilledParam({d}, 0.0);
  AddNorm(p, "contextual_encoder.input_norm", d);
  for (int64_t b = 0; b < config.num_blocks; ++b) {
    const std::string base = "contextual_encoder.block" + std::to_string(b);
    AddNorm(p, base + ".attn_norm", d);
    AddLinear(p, rng, base + ".attn.q", d, d);
    AddLinear(p, rng, base + ".attn.k", d, d);
    AddLinear(p, rng, base + ".attn.v", d, d);
    AddLinear(p, rng, base + ".attn.out", d, d);
    AddNorm(p, base + ".ffn_norm", d);
    AddLinear(p, rng, base + ".ffn.in", d, config.ffn_dim);
    AddLinear(p, rng, base + ".ffn.out", config.ffn_dim, d);
  }
  AddNorm(p, "contextual_encoder.final_norm", d);

  const int64_t gv = config.codebook_groups * config.codebook_entries;
  p["quantizer.weight_proj.weight"] = NormalParam(rng, {config.latent_dim(), gv}, 1.0);
  p["quantizer.weight_proj.bias"] = FilledParam({gv}, 0.0);
  p["quantizer.codebook"] =
      UniformParam(rng,
                   {config.codebook_groups, config.codebook_entries,
                    config.codevector_dim / config.codebook_groups},
                   0.0, 1.0);
  AddLinear(p, rng, "quantizer.project_q", config.codevector_dim, config.final_dim);
  AddLinear(p, rng, "quantizer.context_proj", d, config.final_dim);

  return Model(config, std::move(p));
}

void Model::AddCtcHead(uint64_t seed) {
  Rng rng(DeriveSeed(seed, "ctc_head_init"));
  AddLinear(params_, rng, "ctc_head.proj", config_.model_dim, config_.ctc_classes());
}

bool Model::has_ctc_head() const { return params_.count("ctc_head.proj.weight") > 0; }

const Tensor& Model::param(const std::string& name) const {
  auto it = params_.find(name);
  SOA_REQUIRE(it != params_.end(), ContractError, "no parameter named " + name);
  return it->second;
}

void Model::SetTrainable(const std::set<Component>& trainable) {
  for (auto& [name, t] : params_) t.set_requires_grad(trainable.count(ComponentOf(name)) > 0);
}

Tensor Model::FeatureEncode(std::span<const float> waveform) const {
  OutputLengths(static_cast<int64_t>(waveform.size()), config_.conv_layers);
  Tensor x = Tensor::Constant({1, static_cast<int64_t>(waveform.size())},
                              std::vector<double>(waveform.begin(), waveform.end()));
  for (size_t i = 0; i < config_.conv_layers.size(); ++i) {
    const auto& l = config_.conv_layers[i];
    const std::string idx = std::to_string(i);
    x = ad::Conv1d(x, params_.at("feature_encoder.conv" + idx + ".weight"), l.stride);
    // Per-frame normalization over channels, then GELU.
    x = ad::Gelu(NormNamed(params_, "feature_encoder.norm" + idx, ad::Transpose(x)));
    if (i + 1 < config_.conv_layers.size()) x = ad::Transpose(x);
  }
  return NormNamed(params_, "feature_encoder.out_norm", x);
}

Tensor Model::Block(const Tensor& x, int64_t index) const {
  const std::string base = "contextual_encoder.block" + std::to_string(index);
  const int64_t d = config_.model_dim;
  const int64_t head_dim = d / config_.num_heads;

  Tensor h = NormNamed(params_, base + ".attn_norm", x);
  Tensor q = LinearNamed(params_, base + ".attn.q", h);
  Tensor k = LinearNamed(params_, base + ".attn.k", h);
  Tensor v = LinearNamed(params_, base + ".attn.v", h);
  std::vector<Tensor> heads;
  for (int64_t hd = 0; hd < config_.num_heads; ++hd) {
    const int64_t b = hd * head_dim, e = b + head_dim;
    heads.push_back(ad::ScaledDotProductAttention(
        ad::SliceCols(q, b, e), ad::SliceCols(k, b, e), ad::SliceCols(v, b, e)));
  }
  Tensor attn = heads.size() == 1 ? heads[0] : ad::ConcatCols(heads);
  Tensor y = ad::Add(x, LinearNamed(params_, base + ".attn.out", attn));

  Tensor f = NormNamed(params_, base + ".ffn_norm", y);
  f = LinearNamed(params_, base + ".ffn.out",
                  ad::Gelu(LinearNamed(params_, base + ".ffn.in", f)));
  return ad::Add(y, f);
}

Tensor Model::ContextEncode(const Tensor& latents, const std::vector<bool>& mask) const {
  SOA_REQUIRE(latents.rank() == 2 && latents.dim(1) == config_.latent_dim(),
              ContractError, "latents must be [T x latent_dim]");
  SOA_REQUIRE(static_cast<int64_t>(mask.size()) == latents.dim(0), ContractError,
              "mask length " + std::to_string(mask.size()) + " != frames " +
                  std::to_string(latents.dim(0)));
  Tensor x = LinearNamed(params_, "contextual_encoder.input_proj", latents);
  if (std::any_of(mask.begin(), mask.end(), [](bool m) { return m; }))
    x = ad::MaskedFillRows(x, mask, params_.at("contextual_encoder.mask_emb"));

  // Convolutional relative position signal, added residually.
  Tensor pos = ad::Conv1d(ad::Transpose(x), params_.at("contextual_encoder.pos_conv.weight"),
                          1, config_.pos_conv_kernel / 2);
  pos = ad::Gelu(ad::AddRowVector(ad::Transpose(pos),
                                  params_.at("contextual_encoder.pos_conv.bias")));
  x = NormNamed(params_, "contextual_encoder.input_norm", ad::Add(x, pos));
  for (int64_t b = 0; b < config_.num_blocks; ++b) x = Block(x, b);
  return NormNamed(params_, "contextual_encoder.final_norm", x);
}

QuantizerOutput Model::Quantize(const Tensor& latents, double temperature, bool hard,
                                const Tensor* gumbel_noise) const {
  SOA_REQUIRE(temperature > 0.0, ContractError, "quantizer temperature must be positive");
  const int64_t t_len = latents.dim(0);
  const int64_t groups = config_.codebook_groups;
  const int64_t entries = config_.codebook_entries;
  const int64_t sub_dim = config_.codevector_dim / groups;
  if (gumbel_noise) {
    SOA_REQUIRE(gumbel_noise->shape() == ad::Shape({t_len, groups * entries}),
                ContractError, "gumbel noise must be [T x G*V]");
  }

  Tensor logits = LinearNamed(params_, "quantizer.weight_proj", latents);
  Tensor noisy = gumbel_noise ? ad::Add(logits, *gumbel_noise) : logits;
  Tensor codebook = ad::Reshape(params_.at("quantizer.codebook"), {groups * entries, sub_dim});

  QuantizerOutput out;
  out.codes.assign(t_len, std::vector<int>(groups, 0));
  std::vector<Tensor> parts, avg_parts;
  for (int64_t g = 0; g < groups; ++g) {
    const int64_t b = g * entries, e = b + entries;
    Tensor soft = ad::Softmax(ad::Scale(ad::SliceCols(noisy, b, e), 1.0 / temperature), 1);
    std::vector<double> onehot(t_len * entries, 0.0);
    for (int64_t t = 0; t < t_len; ++t) {
      auto row = soft.values().subspan(t * entries, entries);
      const int64_t best = std::max_element(row.begin(), row.end()) - row.begin();
      out.codes[t][g] = static_cast<int>(best);
      onehot[t * entries + best] = 1.0;
    }
    Tensor weights = soft;
    if (hard) {
      // Straight-through: forward value is the one-hot, gradient is the soft one.
      weights = ad::Add(ad::Sub(soft, ad::Detach(soft)),
                        Tensor::Constant({t_len, entries}, std::move(onehot)));
    }
    std::vector<int64_t> rows(entries);
    for (int64_t v = 0; v < entries; ++v) rows[v] = b + v;
    parts.push_back(ad::MatMul(weights, ad::GatherRows(codebook, rows)));

    Tensor probs = ad::Softmax(ad::SliceCols(logits, b, e), 1);
    avg_parts.push_back(ad::Reshape(ad::MeanRows(probs), {1, entries}));
  }
  out.quantized = parts.size() == 1 ? parts[0] : ad::ConcatCols(parts);
  Tensor avg = avg_parts.size() == 1 ? avg_parts[0] : ad::ConcatCols(avg_parts);
  out.avg_code_probs = ad::Reshape(avg, {groups, entries});
  return out;
}

Tensor Model::ProjectContext(const Tensor& contexts) const {
  return LinearNamed(params_, "quantizer.context_proj", contexts);
}

Tensor Model::ProjectQuantized(const Tensor& quantized) const {
  return LinearNamed(params_, "quantizer.project_q", quantized);
}

Tensor Model::CtcLogProbs(const Tensor& contexts) const {
  SOA_REQUIRE(has_ctc_head(), ContractError, "model has no CTC head");
  return ad::LogSoftmax(LinearNamed(params_, "ctc_head.proj", contexts), 1);
}

Tensor Model::Recognize(std::span<const float> waveform) const {
  Tensor z = FeatureEncode(waveform);
  return CtcLogProbs(ContextEncode(z, std::vector<bool>(z.dim(0), false)));
}

}  // namespace soa::model
