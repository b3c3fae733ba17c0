#include "soa/training/stage.h"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>

#include "soa/autodiff/ops.h"
#include "soa/errors.h"
#include "soa/util/digest.h"
#include "soa/util/random.h"

namespace soa::training {

using model::Component;

const char* StageKindName(StageKind kind) {
  switch (kind) {
    case StageKind::kPretrain: return "pretrain";
    case StageKind::kFinetune: return "finetune";
    case StageKind::kContinualPretrain: return "continual_pretrain";
  }
  return "";
}

StageKind StageKindFromName(const std::string& name) {
  for (StageKind k : {StageKind::kPretrain, StageKind::kFinetune, StageKind::kContinualPretrain})
    if (name == StageKindName(k)) return k;
  throw ConfigError("unknown stage kind '" + name + "'");
}

double SchedulerConfig::LearningRate(int64_t step, int64_t total_steps) const {
  switch (kind) {
    case SchedulerKind::kNoamHoldDecay: {
      NoamHoldDecay s = noam;
      s.peak = peak;
      return s(step);
    }
    case SchedulerKind::kWarmupPoly:
      return WarmupPolyLr(std::min(step, total_steps), total_steps, peak, power);
    case SchedulerKind::kConstant:
      return peak;
  }
  return 0.0;
}

std::set<Component> DefaultFreezeSet(StageKind kind) {
  switch (kind) {
    case StageKind::kPretrain: return {};
    case StageKind::kFinetune: return {Component::kFeatureEncoder, Component::kQuantizer};
    case StageKind::kContinualPretrain:
      return {Component::kContextualEncoder, Component::kCtcHead};
  }
  return {};
}

StageConfig DefaultStageConfig(StageKind kind) {
  StageConfig cfg;
  cfg.kind = kind;
  cfg.freeze = DefaultFreezeSet(kind);
  switch (kind) {
    case StageKind::kPretrain:
      cfg.total_steps = 2000;
      cfg.scheduler.kind = SchedulerKind::kWarmupPoly;
      cfg.scheduler.peak = 1e-3;
      cfg.label = "M1";
      break;
    case StageKind::kFinetune:
      cfg.total_steps = 1000;
      cfg.scheduler.kind = SchedulerKind::kNoamHoldDecay;
      cfg.scheduler.peak = 1e-3;
      // 8k / 32k / 40k of an 80k-update run, scaled to 1000 steps.
      cfg.scheduler.noam = NoamHoldDecay{100, 400, 500, 1e-3, 0.05};
      cfg.label = "M2";
      break;
    case StageKind::kContinualPretrain:
      cfg.total_steps = 500;
      cfg.scheduler.kind = SchedulerKind::kWarmupPoly;
      cfg.scheduler.peak = 5e-4;
      cfg.label = "M3";
      break;
  }
  return cfg;
}

void ValidateStageConfig(const StageConfig& cfg) {
  SOA_REQUIRE(cfg.total_steps >= 0, ConfigError, "total_steps must be >= 0");
  SOA_REQUIRE(cfg.batch_size >= 1, ConfigError, "batch_size must be >= 1");
  SOA_REQUIRE(!cfg.target_ratio || (*cfg.target_ratio >= 0.0 && *cfg.target_ratio <= 1.0),
              ConfigError, "target_ratio must lie in [0, 1]");
  SOA_REQUIRE(cfg.gumbel_start > 0.0 && cfg.gumbel_end > 0.0, ConfigError,
              "Gumbel temperatures must be positive");
  if (cfg.allow_freeze_override) return;
  if (cfg.kind == StageKind::kFinetune) {
    SOA_REQUIRE(cfg.freeze.count(Component::kFeatureEncoder), ConfigError,
                "finetune stages must freeze the feature encoder");
  }
  if (cfg.kind == StageKind::kContinualPretrain) {
    SOA_REQUIRE(cfg.freeze.count(Component::kContextualEncoder) &&
                    cfg.freeze.count(Component::kCtcHead),
                ConfigError,
                "continual pretraining must freeze the contextual encoder and CTC head");
  }
}

void AdamStep(model::ParameterMap& params, const std::set<std::string>& trainable,
              OptimizerState& state, double lr) {
  SOA_REQUIRE(lr >= 0.0, ContractError, "learning rate must be non-negative");
  ++state.step;
  const auto& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (const std::string& name : trainable) {
    auto it = params.find(name);
    SOA_REQUIRE(it != params.end(), ContractError, "no parameter named " + name);
    ad::Tensor& p = it->second;
    const std::vector<double> g = p.grad();
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    SOA_REQUIRE(m.size() == g.size(), ContractError,
                "optimizer state shape mismatch for " + name);
    auto values = p.mutable_values();
    for (size_t i = 0; i < values.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

std::string CorpusFingerprint(const synth::Corpus& corpus) {
  std::vector<unsigned char> buf;
  auto put = [&buf](const std::string& s) {
    buf.insert(buf.end(), s.begin(), s.end());
    buf.push_back(0);
  };
  put(corpus.domain);
  put(corpus.split);
  for (const auto& u : corpus.utterances) {
    put(u.id);
    for (float f : u.samples) {
      const uint32_t bits = std::bit_cast<uint32_t>(f);
      for (int b = 0; b < 4; ++b) buf.push_back((bits >> (8 * b)) & 0xff);
    }
    if (u.transcript)
      for (int t : *u.transcript) put(std::to_string(t));
    buf.push_back(1);
  }
  return Sha256Hex(buf);
}

namespace {

struct UtteranceRef {
  const synth::Corpus* corpus;
  size_t index;
};

const synth::Utterance& Deref(const UtteranceRef& r) { return r.corpus->utterances[r.index]; }

void CheckUnlabeled(const synth::Corpus& c) {
  for (const auto& u : c.utterances)
    SOA_REQUIRE(!u.transcript, DataContractError,
                "pretraining stages take unlabeled corpora; " + c.domain + "/" + c.split +
                    " carries transcripts");
}

}  // namespace

StageResult RunStage(const StageConfig& cfg, const surgery::ModelCheckpoint& start,
                     const StageData& data) {
  ValidateStageConfig(cfg);
  SOA_REQUIRE(data.source && !data.source->utterances.empty(), DataContractError,
              "stage needs a non-empty source corpus");
  const bool pretraining = cfg.kind != StageKind::kFinetune;
  std::string data_fingerprint = CorpusFingerprint(*data.source);
  if (cfg.kind == StageKind::kFinetune) {
    SOA_REQUIRE(data.source->labeled(), DataContractError,
                "finetuning needs a labeled corpus");
  } else {
    CheckUnlabeled(*data.source);
  }
  if (cfg.kind == StageKind::kContinualPretrain) {
    SOA_REQUIRE(data.target && !data.target->utterances.empty(), DataContractError,
                "continual pretraining needs a non-empty target corpus");
    CheckUnlabeled(*data.target);
    data_fingerprint = Sha256Hex(data_fingerprint + CorpusFingerprint(*data.target));
  }

  const auto t0 = std::chrono::steady_clock::now();
  model::Model model = surgery::ToModel(start);
  if (cfg.kind == StageKind::kFinetune && !model.has_ctc_head())
    model.AddCtcHead(DeriveSeed(cfg.seed, "ctc_head"));

  std::set<Component> trainable;
  for (Component c : model::AllComponents())
    if (!cfg.freeze.count(c)) trainable.insert(c);
  model.SetTrainable(trainable);
  std::set<std::string> trainable_names;
  for (const auto& [name, t] : model.params())
    if (trainable.count(model::ComponentOf(name))) trainable_names.insert(name);

  std::vector<UtteranceRef> source_pool, target_pool;
  for (size_t i = 0; i < data.source->utterances.size(); ++i)
    source_pool.push_back({data.source, i});
  if (data.target)
    for (size_t i = 0; i < data.target->utterances.size(); ++i)
      target_pool.push_back({data.target, i});

  Rng sampler(DeriveSeed(cfg.seed, "batches"));
  auto draw = [&]() -> UtteranceRef {
    if (cfg.kind != StageKind::kContinualPretrain)
      return source_pool[sampler.UniformInt(source_pool.size())];
    if (cfg.target_ratio) {
      const bool tgt = sampler.Uniform() < *cfg.target_ratio;
      const auto& pool = tgt ? target_pool : source_pool;
      return pool[sampler.UniformInt(pool.size())];
    }
    const int64_t k = sampler.UniformInt(source_pool.size() + target_pool.size());
    return k < static_cast<int64_t>(source_pool.size()) ? source_pool[k]
                                                        : target_pool[k - source_pool.size()];
  };

  StageResult result;
  OptimizerState state;
  state.hyper = cfg.adam;
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  for (int64_t step = 1; step <= cfg.total_steps; ++step) {
    const double lr = cfg.scheduler.LearningRate(step, cfg.total_steps);
    objectives::PretrainSettings settings = cfg.pretrain;
    const double frac = cfg.total_steps > 1
                            ? static_cast<double>(step - 1) / static_cast<double>(cfg.total_steps - 1)
                            : 0.0;
    settings.gumbel_temperature = cfg.gumbel_start + (cfg.gumbel_end - cfg.gumbel_start) * frac;

    for (const auto& name : trainable_names) model.mutable_params().at(name).ZeroGrad();
    double loss_sum = 0.0;
    int64_t used = 0;
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      const synth::Utterance& utt = Deref(draw());
      const uint64_t sample_seed =
          DeriveSeed(cfg.seed, "sample", static_cast<uint64_t>(step * cfg.batch_size + b));
      ad::Tensor loss;
      try {
        loss = pretraining ? objectives::PretrainLoss(model, utt.samples, settings, sample_seed).total
                           : objectives::FinetuneLoss(model, utt.samples, *utt.transcript);
      } catch (const InfeasibleTargetError&) {
        ++result.skipped_samples;
        continue;
      } catch (const DataContractError&) {
        ++result.skipped_samples;
        continue;
      }
      ad::Backward(ad::Scale(loss, inv_batch));
      loss_sum += loss.item();
      ++used;
    }

    if (cfg.max_grad_norm > 0.0) {
      double sq = 0.0;
      for (const auto& name : trainable_names)
        for (double g : model.param(name).grad()) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg.max_grad_norm) {
        const double s = cfg.max_grad_norm / norm;
        for (const auto& name : trainable_names) {
          auto& node = *model.mutable_params().at(name).node();
          for (double& g : node.grad) g *= s;
        }
      }
    }
    AdamStep(model.mutable_params(), trainable_names, state, lr);

    StepLog row;
    row.step = step;
    row.lr = lr;
    row.loss = used > 0 ? loss_sum / static_cast<double>(used) : NAN;
    row.theta_digest = surgery::ComponentDigest(model, Component::kFeatureEncoder);
    row.phi_digest = surgery::ComponentDigest(model, Component::kContextualEncoder);
    result.log.push_back(std::move(row));
  }

  std::vector<surgery::LineageEntry> lineage = start.lineage;
  surgery::LineageEntry entry;
  entry.label = cfg.label;
  entry.stage = StageKindName(cfg.kind);
  entry.data_fingerprint = data_fingerprint;
  entry.steps = cfg.total_steps;
  entry.parent_digests = {start.Digest()};
  lineage.push_back(std::move(entry));
  result.checkpoint = surgery::FromModel(model, std::move(lineage));
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!cfg.log_path.empty()) WriteStageLog(result.log, cfg.log_path);
  return result;
}

void WriteStageLog(const std::vector<StepLog>& log, const std::string& path) {
  std::ofstream out(path);
  SOA_REQUIRE(out.good(), Error, "cannot write training log " + path);
  out << "step,lr,loss,component_checksums\n";
  out.precision(10);
  for (const auto& r : log)
    out << r.step << ',' << r.lr << ',' << r.loss << ",theta=" << r.theta_digest
        << ";phi=" << r.phi_digest << '\n';
}

}  // namespace soa::training
