#ifndef SOA_TRAINING_STAGE_H_
#define SOA_TRAINING_STAGE_H_

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "soa/model/model.h"
#include "soa/objectives/objectives.h"
#include "soa/surgery/checkpoint.h"
#include "soa/synthdata/synth.h"
#include "soa/training/schedule.h"

namespace soa::training {

enum class StageKind { kPretrain, kFinetune, kContinualPretrain };

const char* StageKindName(StageKind kind);
StageKind StageKindFromName(const std::string& name);

enum class SchedulerKind { kNoamHoldDecay, kWarmupPoly, kConstant };

struct SchedulerConfig {
  SchedulerKind kind = SchedulerKind::kWarmupPoly;
  double peak = 5e-4;
  double power = 1.0;   // warmup-poly decay exponent
  NoamHoldDecay noam;   // used when kind == kNoamHoldDecay (peak taken from above)

  double LearningRate(int64_t step, int64_t total_steps) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct StageConfig {
  StageKind kind = StageKind::kPretrain;
  std::set<model::Component> freeze;
  SchedulerConfig scheduler;
  AdamConfig adam;
  int64_t total_steps = 0;
  int64_t batch_size = 8;
  uint64_t seed = 0;
  // Continual pretraining: probability of drawing a target utterance. Unset
  // means uniform over the union of source and target utterances.
  std::optional<double> target_ratio;
  objectives::PretrainSettings pretrain;
  double gumbel_start = 2.0;
  double gumbel_end = 0.5;
  // Global gradient-norm clip; 0 disables.
  double max_grad_norm = 0.0;
  // Lineage label recorded on the output (M1, M2, M3).
  std::string label;
  // Permits freeze sets that break the adaptation contract.
  bool allow_freeze_override = false;
  // Optional CSV training log path.
  std::string log_path;
};

// Freeze set the adaptation recipe prescribes for each stage kind.
std::set<model::Component> DefaultFreezeSet(StageKind kind);
StageConfig DefaultStageConfig(StageKind kind);

// Throws ConfigError when finetuning leaves the feature encoder trainable or
// continual pretraining leaves the contextual encoder or CTC head trainable,
// unless allow_freeze_override is set; also rejects non-positive batch sizes.
void ValidateStageConfig(const StageConfig& cfg);

struct OptimizerState {
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
  int64_t step = 0;
  AdamConfig hyper;
};

// One bias-corrected Adam update of the parameters named in trainable, using
// their accumulated gradients. Everything else is left bit-identical.
void AdamStep(model::ParameterMap& params, const std::set<std::string>& trainable,
              OptimizerState& state, double lr);

struct StepLog {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::string theta_digest;
  std::string phi_digest;
};

struct StageData {
  const synth::Corpus* source = nullptr;
  const synth::Corpus* target = nullptr;  // continual pretraining only
};

struct StageResult {
  surgery::ModelCheckpoint checkpoint;
  std::vector<StepLog> log;
  int64_t skipped_samples = 0;
  double wall_seconds = 0.0;
};

// Content digest of a corpus (waveform bytes and transcripts).
std::string CorpusFingerprint(const synth::Corpus& corpus);

// Runs one training stage from start. Frozen components of the result are
// bit-identical to start; lineage gains one entry.
StageResult RunStage(const StageConfig& cfg, const surgery::ModelCheckpoint& start,
                     const StageData& data);

void WriteStageLog(const std::vector<StepLog>& log, const std::string& path);

}  // namespace soa::training

#endif  // SOA_TRAINING_STAGE_H_
