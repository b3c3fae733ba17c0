// Experiment configuration: JSON layered over the defaults, with every
// mistake reported by its path in the document.

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "soa/errors.h"
#include "soa/pipeline/experiment.h"
#include "soa/util/digest.h"
#include "soa/util/random.h"

namespace soa::pipeline {

using nlohmann::json;
using training::SchedulerKind;
using training::StageConfig;
using training::StageKind;

namespace {

// Read access to one JSON object with type checks and unknown-key rejection.
class Fields {
 public:
  Fields(const json& j, std::string path, std::set<std::string> allowed)
      : j_(j), path_(std::move(path)) {
    SOA_REQUIRE(j.is_object(), ConfigError, path_ + ": expected an object");
    for (const auto& [key, value] : j.items())
      SOA_REQUIRE(allowed.count(key), ConfigError, Path(key) + ": unknown field");
  }

  bool Has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  std::string Path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  const json& Raw(const std::string& key) const { return j_.at(key); }

  double Number(const std::string& key, double current) const {
    if (!Has(key)) return current;
    SOA_REQUIRE(j_.at(key).is_number(), ConfigError, Path(key) + ": expected a number");
    const double v = j_.at(key).get<double>();
    SOA_REQUIRE(std::isfinite(v), ConfigError, Path(key) + ": must be finite");
    return v;
  }
  int64_t Integer(const std::string& key, int64_t current) const {
    if (!Has(key)) return current;
    SOA_REQUIRE(j_.at(key).is_number_integer(), ConfigError,
                Path(key) + ": expected an integer");
    return j_.at(key).get<int64_t>();
  }
  uint64_t Unsigned(const std::string& key, uint64_t current) const {
    if (!Has(key)) return current;
    SOA_REQUIRE(j_.at(key).is_number_unsigned() ||
                    (j_.at(key).is_number_integer() && j_.at(key).get<int64_t>() >= 0),
                ConfigError, Path(key) + ": expected a non-negative integer");
    return j_.at(key).get<uint64_t>();
  }
  bool Bool(const std::string& key, bool current) const {
    if (!Has(key)) return current;
    SOA_REQUIRE(j_.at(key).is_boolean(), ConfigError, Path(key) + ": expected true or false");
    return j_.at(key).get<bool>();
  }
  std::string String(const std::string& key, const std::string& current) const {
    if (!Has(key)) return current;
    SOA_REQUIRE(j_.at(key).is_string(), ConfigError, Path(key) + ": expected a string");
    return j_.at(key).get<std::string>();
  }

 private:
  const json& j_;
  std::string path_;
};

void Require(bool cond, const std::string& path, const std::string& what) {
  if (!cond) throw ConfigError(path + ": " + what);
}

// Finetuning run of 80k updates split 8k / 32k / 40k, rescaled.
training::NoamHoldDecay ScaledNoam(int64_t total_steps, double peak) {
  auto part = [total_steps](double fraction) {
    return std::max<int64_t>(1, std::llround(fraction * static_cast<double>(total_steps)));
  };
  return training::NoamHoldDecay{part(0.1), part(0.4), part(0.5), peak, 0.05};
}

const char* SchedulerName(SchedulerKind k) {
  switch (k) {
    case SchedulerKind::kNoamHoldDecay: return "noam_hold_decay";
    case SchedulerKind::kWarmupPoly: return "warmup_poly";
    case SchedulerKind::kConstant: return "constant";
  }
  return "";
}

json DomainToJson(const synth::DomainSpec& d) {
  json symbols = json::array();
  for (const auto& s : d.symbols)
    symbols.push_back({{"id", s.id},
                       {"formants_hz", s.formants_hz},
                       {"amplitudes", s.amplitudes},
                       {"duration_s", s.duration_s}});
  json snr = nullptr;
  if (d.noise_snr_range_db)
    snr = json::array({d.noise_snr_range_db->low_db, d.noise_snr_range_db->high_db});
  return {{"name", d.name},
          {"sample_rate_hz", d.sample_rate_hz},
          {"formant_scale", d.formant_scale},
          {"noise_snr_range_db", snr},
          {"seed", d.seed},
          {"symbols", symbols}};
}

std::array<double, 3> Triple(const json& j, const std::string& path) {
  Require(j.is_array() && j.size() == 3, path, "expected three numbers");
  std::array<double, 3> out{};
  for (size_t i = 0; i < 3; ++i) {
    Require(j[i].is_number(), path, "expected three numbers");
    out[i] = j[i].get<double>();
  }
  return out;
}

void DomainFromJson(const json& j, const std::string& path, synth::DomainSpec& d) {
  Fields f(j, path,
           {"name", "sample_rate_hz", "formant_scale", "noise_snr_range_db", "seed", "symbols"});
  d.name = f.String("name", d.name);
  d.sample_rate_hz = static_cast<int>(f.Integer("sample_rate_hz", d.sample_rate_hz));
  d.formant_scale = f.Number("formant_scale", d.formant_scale);
  d.seed = f.Unsigned("seed", d.seed);
  if (j.contains("noise_snr_range_db")) {
    const json& r = j.at("noise_snr_range_db");
    const std::string p = f.Path("noise_snr_range_db");
    if (r.is_null()) {
      d.noise_snr_range_db.reset();
    } else {
      Require(r.is_array() && r.size() == 2 && r[0].is_number() && r[1].is_number(), p,
              "expected [low, high] in dB or null");
      d.noise_snr_range_db = synth::SnrRange{r[0].get<double>(), r[1].get<double>()};
    }
  }
  if (f.Has("symbols")) {
    const json& arr = f.Raw("symbols");
    const std::string p = f.Path("symbols");
    Require(arr.is_array() && !arr.empty(), p, "expected a non-empty list");
    d.symbols.clear();
    for (size_t i = 0; i < arr.size(); ++i) {
      const std::string sp = p + "[" + std::to_string(i) + "]";
      Fields sf(arr[i], sp, {"id", "formants_hz", "amplitudes", "duration_s"});
      synth::SymbolSpec s;
      s.id = sf.String("id", "s" + std::to_string(i));
      Require(sf.Has("formants_hz"), sp + ".formants_hz", "required");
      s.formants_hz = Triple(sf.Raw("formants_hz"), sf.Path("formants_hz"));
      if (sf.Has("amplitudes")) s.amplitudes = Triple(sf.Raw("amplitudes"), sf.Path("amplitudes"));
      s.duration_s = sf.Number("duration_s", s.duration_s);
      d.symbols.push_back(s);
    }
  }
  try {
    synth::ValidateDomain(d);
  } catch (const ContractError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

json StageToJson(const StageConfig& s) {
  json freeze = json::array();
  for (auto c : s.freeze) freeze.push_back(model::ComponentName(c));
  json sched = {{"kind", SchedulerName(s.scheduler.kind)},
                {"peak", s.scheduler.peak},
                {"power", s.scheduler.power}};
  if (s.scheduler.kind == SchedulerKind::kNoamHoldDecay) {
    sched["warmup"] = s.scheduler.noam.warmup;
    sched["hold"] = s.scheduler.noam.hold;
    sched["decay"] = s.scheduler.noam.decay;
    sched["lambda"] = s.scheduler.noam.lambda;
  }
  const auto& p = s.pretrain;
  return {{"total_steps", s.total_steps},
          {"batch_size", s.batch_size},
          {"seed", s.seed},
          {"label", s.label},
          {"freeze", freeze},
          {"allow_freeze_override", s.allow_freeze_override},
          {"target_ratio", s.target_ratio ? json(*s.target_ratio) : json(nullptr)},
          {"max_grad_norm", s.max_grad_norm},
          {"gumbel_start", s.gumbel_start},
          {"gumbel_end", s.gumbel_end},
          {"scheduler", sched},
          {"adam", {{"beta1", s.adam.beta1}, {"beta2", s.adam.beta2}, {"eps", s.adam.eps}}},
          {"objective",
           {{"mask_prob", p.mask_prob},
            {"mask_span", p.mask_span},
            {"num_distractors", p.num_distractors},
            {"logit_temperature", p.logit_temperature},
            {"diversity_weight", p.diversity_weight},
            {"hard_quantizer", p.hard_quantizer}}}};
}

void StageFromJson(const json& j, const std::string& path, StageConfig& s) {
  Fields f(j, path,
           {"total_steps", "batch_size", "seed", "label", "freeze", "allow_freeze_override",
            "target_ratio", "max_grad_norm", "gumbel_start", "gumbel_end", "scheduler", "adam",
            "objective"});
  s.total_steps = f.Integer("total_steps", s.total_steps);
  Require(s.total_steps >= 0, f.Path("total_steps"), "must be >= 0");
  s.batch_size = f.Integer("batch_size", s.batch_size);
  Require(s.batch_size >= 1, f.Path("batch_size"), "must be >= 1");
  s.seed = f.Unsigned("seed", s.seed);
  s.label = f.String("label", s.label);
  s.allow_freeze_override = f.Bool("allow_freeze_override", s.allow_freeze_override);
  if (j.contains("target_ratio")) {
    if (j.at("target_ratio").is_null()) {
      s.target_ratio.reset();
    } else {
      const double r = f.Number("target_ratio", 0.0);
      Require(r >= 0.0 && r <= 1.0, f.Path("target_ratio"), "must lie in [0, 1]");
      s.target_ratio = r;
    }
  }
  s.max_grad_norm = f.Number("max_grad_norm", s.max_grad_norm);
  Require(s.max_grad_norm >= 0.0, f.Path("max_grad_norm"), "must be >= 0");
  s.gumbel_start = f.Number("gumbel_start", s.gumbel_start);
  s.gumbel_end = f.Number("gumbel_end", s.gumbel_end);
  Require(s.gumbel_start > 0.0 && s.gumbel_end > 0.0, path, "Gumbel temperatures must be > 0");
  if (f.Has("freeze")) {
    const json& arr = f.Raw("freeze");
    Require(arr.is_array(), f.Path("freeze"), "expected a list of component names");
    s.freeze.clear();
    for (size_t i = 0; i < arr.size(); ++i) {
      const std::string p = f.Path("freeze") + "[" + std::to_string(i) + "]";
      Require(arr[i].is_string(), p, "expected a component name");
      try {
        s.freeze.insert(model::ComponentFromName(arr[i].get<std::string>()));
      } catch (const ContractError&) {
        throw ConfigError(p + ": unknown component '" + arr[i].get<std::string>() + "'");
      }
    }
  }
  bool explicit_noam_lengths = false;
  if (f.Has("scheduler")) {
    Fields sf(f.Raw("scheduler"), f.Path("scheduler"),
              {"kind", "peak", "power", "warmup", "hold", "decay", "lambda"});
    const std::string kind = sf.String("kind", SchedulerName(s.scheduler.kind));
    if (kind == "noam_hold_decay") s.scheduler.kind = SchedulerKind::kNoamHoldDecay;
    else if (kind == "warmup_poly") s.scheduler.kind = SchedulerKind::kWarmupPoly;
    else if (kind == "constant") s.scheduler.kind = SchedulerKind::kConstant;
    else throw ConfigError(sf.Path("kind") + ": unknown scheduler '" + kind + "'");
    s.scheduler.peak = sf.Number("peak", s.scheduler.peak);
    Require(s.scheduler.peak >= 0.0, sf.Path("peak"), "must be >= 0");
    s.scheduler.power = sf.Number("power", s.scheduler.power);
    Require(s.scheduler.power > 0.0, sf.Path("power"), "must be > 0");
    explicit_noam_lengths = sf.Has("warmup") || sf.Has("hold") || sf.Has("decay");
    auto& n = s.scheduler.noam;
    n.warmup = sf.Integer("warmup", n.warmup);
    n.hold = sf.Integer("hold", n.hold);
    n.decay = sf.Integer("decay", n.decay);
    n.lambda = sf.Number("lambda", n.lambda);
    Require(n.warmup >= 1 && n.hold >= 1 && n.decay >= 1, sf.Path("warmup"),
            "warmup, hold and decay must be >= 1");
    Require(n.lambda > 0.0 && n.lambda <= 1.0, sf.Path("lambda"), "must lie in (0, 1]");
  }
  if (s.scheduler.kind == SchedulerKind::kNoamHoldDecay && !explicit_noam_lengths) {
    const double lambda = s.scheduler.noam.lambda;
    s.scheduler.noam = ScaledNoam(s.total_steps, s.scheduler.peak);
    s.scheduler.noam.lambda = lambda;
  }
  s.scheduler.noam.peak = s.scheduler.peak;
  if (f.Has("adam")) {
    Fields af(f.Raw("adam"), f.Path("adam"), {"beta1", "beta2", "eps"});
    s.adam.beta1 = af.Number("beta1", s.adam.beta1);
    s.adam.beta2 = af.Number("beta2", s.adam.beta2);
    s.adam.eps = af.Number("eps", s.adam.eps);
    Require(s.adam.beta1 >= 0.0 && s.adam.beta1 < 1.0 && s.adam.beta2 >= 0.0 &&
                s.adam.beta2 < 1.0 && s.adam.eps > 0.0,
            f.Path("adam"), "need 0 <= beta < 1 and eps > 0");
  }
  if (f.Has("objective")) {
    Fields of(f.Raw("objective"), f.Path("objective"),
              {"mask_prob", "mask_span", "num_distractors", "logit_temperature",
               "diversity_weight", "hard_quantizer"});
    auto& p = s.pretrain;
    p.mask_prob = of.Number("mask_prob", p.mask_prob);
    Require(p.mask_prob >= 0.0 && p.mask_prob <= 1.0, of.Path("mask_prob"), "must lie in [0, 1]");
    p.mask_span = of.Integer("mask_span", p.mask_span);
    Require(p.mask_span >= 1, of.Path("mask_span"), "must be >= 1");
    p.num_distractors = of.Integer("num_distractors", p.num_distractors);
    Require(p.num_distractors >= 1, of.Path("num_distractors"), "must be >= 1");
    p.logit_temperature = of.Number("logit_temperature", p.logit_temperature);
    Require(p.logit_temperature > 0.0, of.Path("logit_temperature"), "must be > 0");
    p.diversity_weight = of.Number("diversity_weight", p.diversity_weight);
    Require(p.diversity_weight >= 0.0, of.Path("diversity_weight"), "must be >= 0");
    p.hard_quantizer = of.Bool("hard_quantizer", p.hard_quantizer);
  }
}

json ExperimentToJson(const ExperimentConfig& c) {
  const auto& k = c.corpora;
  const auto& po = c.probe.options;
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"source", DomainToJson(c.source)},
          {"target", DomainToJson(c.target)},
          {"corpora",
           {{"source_unlabeled", k.source_unlabeled},
            {"source_labeled", k.source_labeled},
            {"target_unlabeled", k.target_unlabeled},
            {"dev", k.dev},
            {"test", k.test},
            {"min_tokens", k.length.min_tokens},
            {"max_tokens", k.length.max_tokens},
            {"target_fraction", k.target_fraction}}},
          {"model", json::parse(c.model.ToJson())},
          {"stages",
           {{"pretrain", StageToJson(c.pretrain)},
            {"finetune", StageToJson(c.finetune)},
            {"continual_pretrain", StageToJson(c.continual)}}},
          {"eval", {{"splits", c.eval_splits}}},
          {"probe",
           {{"enabled", c.probe.enabled},
            {"num_vowels", c.probe.num_vowels},
            {"tolerance_hz", c.probe.tolerance_hz},
            {"f_lo_hz", po.f_lo_hz},
            {"f_hi_hz", po.f_hi_hz},
            {"step_hz", po.step_hz},
            {"amplitude", po.amplitude},
            {"pooling", po.pooling == eval::LatentPooling::kMax ? "max" : "mean"},
            {"min_prominence", po.min_prominence}}},
          {"flops", {{"devices", c.flops.devices}, {"device_tflops", c.flops.device_tflops}}}};
}

}  // namespace

ExperimentConfig DefaultExperimentConfig() {
  ExperimentConfig c;
  c.seed = 1;
  c.source = synth::SourceDomain(DeriveSeed(c.seed, "domain.source"));
  c.target = synth::TargetDomain(DeriveSeed(c.seed, "domain.target"));
  c.pretrain = training::DefaultStageConfig(StageKind::kPretrain);
  c.finetune = training::DefaultStageConfig(StageKind::kFinetune);
  c.continual = training::DefaultStageConfig(StageKind::kContinualPretrain);
  c.finetune.scheduler.noam = ScaledNoam(c.finetune.total_steps, c.finetune.scheduler.peak);
  c.pretrain.seed = DeriveSeed(c.seed, "stage.pretrain");
  c.finetune.seed = DeriveSeed(c.seed, "stage.finetune");
  c.continual.seed = DeriveSeed(c.seed, "stage.continual_pretrain");
  return c;
}

ExperimentConfig ParseExperimentConfig(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  Fields top(j, "config",
             {"seed", "output_dir", "source", "target", "corpora", "model", "stages", "eval",
              "probe", "flops"});
  ExperimentConfig c = DefaultExperimentConfig();
  c.seed = top.Unsigned("seed", c.seed);
  // Seeds not given explicitly follow the global seed.
  c.source.seed = DeriveSeed(c.seed, "domain.source");
  c.target.seed = DeriveSeed(c.seed, "domain.target");
  c.pretrain.seed = DeriveSeed(c.seed, "stage.pretrain");
  c.finetune.seed = DeriveSeed(c.seed, "stage.finetune");
  c.continual.seed = DeriveSeed(c.seed, "stage.continual_pretrain");
  c.output_dir = top.String("output_dir", c.output_dir);
  if (top.Has("source")) DomainFromJson(top.Raw("source"), "config.source", c.source);
  if (top.Has("target")) DomainFromJson(top.Raw("target"), "config.target", c.target);
  if (top.Has("corpora")) {
    Fields f(top.Raw("corpora"), "config.corpora",
             {"source_unlabeled", "source_labeled", "target_unlabeled", "dev", "test",
              "min_tokens", "max_tokens", "target_fraction"});
    auto& k = c.corpora;
    auto count = [&f](const std::string& key, int current) {
      const int64_t v = f.Integer(key, current);
      Require(v >= 1, f.Path(key), "must be >= 1");
      return static_cast<int>(v);
    };
    k.source_unlabeled = count("source_unlabeled", k.source_unlabeled);
    k.source_labeled = count("source_labeled", k.source_labeled);
    k.target_unlabeled = count("target_unlabeled", k.target_unlabeled);
    k.dev = count("dev", k.dev);
    k.test = count("test", k.test);
    k.length.min_tokens = count("min_tokens", k.length.min_tokens);
    k.length.max_tokens = count("max_tokens", k.length.max_tokens);
    Require(k.length.min_tokens <= k.length.max_tokens, f.Path("max_tokens"),
            "must be >= min_tokens");
    k.target_fraction = f.Number("target_fraction", k.target_fraction);
    Require(k.target_fraction > 0.0 && k.target_fraction <= 1.0, f.Path("target_fraction"),
            "must lie in (0, 1]");
  }
  if (top.Has("model")) {
    try {
      c.model = model::ModelConfig::FromJson(top.Raw("model").dump());
    } catch (const Error& e) {
      throw ConfigError(std::string("config.model: ") + e.what());
    }
  }
  if (top.Has("stages")) {
    Fields f(top.Raw("stages"), "config.stages", {"pretrain", "finetune", "continual_pretrain"});
    if (f.Has("pretrain")) StageFromJson(f.Raw("pretrain"), f.Path("pretrain"), c.pretrain);
    if (f.Has("finetune")) StageFromJson(f.Raw("finetune"), f.Path("finetune"), c.finetune);
    if (f.Has("continual_pretrain"))
      StageFromJson(f.Raw("continual_pretrain"), f.Path("continual_pretrain"), c.continual);
  }
  if (top.Has("eval")) {
    Fields f(top.Raw("eval"), "config.eval", {"splits"});
    if (f.Has("splits")) {
      const json& arr = f.Raw("splits");
      Require(arr.is_array() && !arr.empty(), f.Path("splits"), "expected a non-empty list");
      c.eval_splits.clear();
      for (const auto& s : arr) {
        Require(s.is_string() && (s == "dev" || s == "test"), f.Path("splits"),
                "entries must be \"dev\" or \"test\"");
        c.eval_splits.push_back(s.get<std::string>());
      }
    }
  }
  if (top.Has("probe")) {
    Fields f(top.Raw("probe"), "config.probe",
             {"enabled", "num_vowels", "tolerance_hz", "f_lo_hz", "f_hi_hz", "step_hz",
              "amplitude", "pooling", "min_prominence"});
    auto& p = c.probe;
    p.enabled = f.Bool("enabled", p.enabled);
    p.num_vowels = static_cast<int>(f.Integer("num_vowels", p.num_vowels));
    Require(p.num_vowels >= 1, f.Path("num_vowels"), "must be >= 1");
    p.tolerance_hz = f.Number("tolerance_hz", p.tolerance_hz);
    auto& o = p.options;
    o.f_lo_hz = f.Number("f_lo_hz", o.f_lo_hz);
    o.f_hi_hz = f.Number("f_hi_hz", o.f_hi_hz);
    o.step_hz = f.Number("step_hz", o.step_hz);
    Require(o.f_lo_hz > 0.0 && o.step_hz > 0.0 && o.f_hi_hz >= o.f_lo_hz, f.Path("f_hi_hz"),
            "need 0 < f_lo <= f_hi and step > 0");
    o.amplitude = f.Number("amplitude", o.amplitude);
    const std::string pooling = f.String("pooling", "mean");
    Require(pooling == "mean" || pooling == "max", f.Path("pooling"),
            "expected \"mean\" or \"max\"");
    o.pooling = pooling == "max" ? eval::LatentPooling::kMax : eval::LatentPooling::kMean;
    o.min_prominence = f.Number("min_prominence", o.min_prominence);
  }
  if (top.Has("flops")) {
    Fields f(top.Raw("flops"), "config.flops", {"devices", "device_tflops"});
    c.flops.devices = static_cast<int>(f.Integer("devices", c.flops.devices));
    c.flops.device_tflops = f.Number("device_tflops", c.flops.device_tflops);
    Require(c.flops.devices >= 0 && c.flops.device_tflops >= 0.0, "config.flops",
            "must be >= 0");
  }
  FinalizeConfig(c);
  return c;
}

ExperimentConfig LoadExperimentConfig(const std::string& path) {
  std::ifstream in(path);
  SOA_REQUIRE(in.good(), ConfigError, "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ParseExperimentConfig(ss.str());
}

void FinalizeConfig(ExperimentConfig& cfg) {
  if (cfg.pretrain.label.empty()) cfg.pretrain.label = "M1";
  if (cfg.finetune.label.empty()) cfg.finetune.label = "M2";
  if (cfg.continual.label.empty()) cfg.continual.label = "M3";
  cfg.pretrain.kind = StageKind::kPretrain;
  cfg.finetune.kind = StageKind::kFinetune;
  cfg.continual.kind = StageKind::kContinualPretrain;
  try {
    cfg.model.Validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("config.model: ") + e.what());
  }
  Require(cfg.model.vocab_size == cfg.source.vocabulary_size() &&
              cfg.model.vocab_size == cfg.target.vocabulary_size(),
          "config.model.vocab_size", "must equal the size of both symbol inventories");
  Require(cfg.source.sample_rate_hz == cfg.target.sample_rate_hz, "config.target.sample_rate_hz",
          "must equal the source sample rate");
  Require(cfg.probe.options.f_hi_hz <= cfg.source.sample_rate_hz / 2.0, "config.probe.f_hi_hz",
          "must not exceed Nyquist");
  const std::pair<const char*, StageConfig*> stages[] = {
      {"config.stages.pretrain", &cfg.pretrain},
      {"config.stages.finetune", &cfg.finetune},
      {"config.stages.continual_pretrain", &cfg.continual}};
  for (auto& [path, stage] : stages) {
    try {
      training::ValidateStageConfig(*stage);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(path) + ": " + e.what());
    }
  }
}

std::string ExperimentConfig::ToJson() const { return ExperimentToJson(*this).dump(2); }

std::string ExperimentConfig::Digest() const {
  json j = ExperimentToJson(*this);
  j.erase("output_dir");
  return Sha256Hex(j.dump());
}

std::string ExperimentConfig::SourceDigest() const {
  const json all = ExperimentToJson(*this);
  json j = {{"seed", seed},
            {"source", all.at("source")},
            {"source_unlabeled", corpora.source_unlabeled},
            {"source_labeled", corpora.source_labeled},
            {"min_tokens", corpora.length.min_tokens},
            {"max_tokens", corpora.length.max_tokens},
            {"model", all.at("model")},
            {"pretrain", all.at("stages").at("pretrain")},
            {"finetune", all.at("stages").at("finetune")}};
  return Sha256Hex(j.dump());
}

std::string ResolveRunDir(const ExperimentConfig& cfg) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  const std::string name = "run-" + cfg.Digest().substr(0, 12);
  if (const char* root = std::getenv("SOA_OUTPUT_ROOT"); root && *root)
    return std::string(root) + "/" + name;
  return "runs/" + name;
}

}  // namespace soa::pipeline
