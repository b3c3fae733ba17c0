#ifndef SOA_PIPELINE_EXPERIMENT_H_
#define SOA_PIPELINE_EXPERIMENT_H_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "soa/eval/eval.h"
#include "soa/model/model.h"
#include "soa/surgery/checkpoint.h"
#include "soa/synthdata/domain.h"
#include "soa/synthdata/synth.h"
#include "soa/training/stage.h"

namespace soa::pipeline {

// Utterance counts of every synthesized split.
struct CorpusSizes {
  int source_unlabeled = 1000;
  int source_labeled = 500;
  int target_unlabeled = 500;
  int dev = 100;
  int test = 100;
  synth::LengthRange length;
  // Share of the target unlabeled corpus used for continual pretraining.
  double target_fraction = 1.0;
};

struct ProbeSettings {
  bool enabled = true;
  int num_vowels = 24;
  double tolerance_hz = 30.0;
  eval::ProbeOptions options;
};

struct FlopsSettings {
  int devices = 1;
  double device_tflops = 0.1;
};

struct ExperimentConfig {
  uint64_t seed = 1;
  synth::DomainSpec source;
  synth::DomainSpec target;
  CorpusSizes corpora;
  model::ModelConfig model;
  training::StageConfig pretrain;
  training::StageConfig finetune;
  training::StageConfig continual;
  std::vector<std::string> eval_splits = {"test"};
  ProbeSettings probe;
  FlopsSettings flops;
  std::string output_dir;  // empty: derived from the environment

  // Canonical JSON of every field.
  std::string ToJson() const;
  std::string Digest() const;
  // Digest of the fields that determine M1 and M2 (seed, source domain,
  // source corpora, model, pretrain and finetune stages).
  std::string SourceDigest() const;
};

// Default toy experiment: source scale 1.0, target scale 1.3, 2000 / 1000 /
// 500 stage steps.
ExperimentConfig DefaultExperimentConfig();

// Parses a JSON config layered over the defaults. Unknown fields, wrong types
// and invalid values raise ConfigError naming the offending path.
ExperimentConfig ParseExperimentConfig(const std::string& json_text);
ExperimentConfig LoadExperimentConfig(const std::string& path);

// Fills per-stage seeds and labels, scales finetune schedule lengths, and
// validates domains and stages. Throws ConfigError.
void FinalizeConfig(ExperimentConfig& cfg);

struct Corpora {
  synth::Corpus source_unlabeled;
  synth::Corpus source_labeled;
  synth::Corpus target_unlabeled;
  std::map<std::string, synth::Corpus> source_eval;  // split -> corpus
  std::map<std::string, synth::Corpus> target_eval;
};

// Every split comes from its own derived seed stream.
Corpora SynthesizeCorpora(const ExperimentConfig& cfg);

struct StageSummary {
  std::string label;
  std::string stage;
  int64_t steps_run = 0;
  bool cached = false;
  double wall_seconds = 0.0;
  double flops = 0.0;
  int64_t skipped_samples = 0;
  double final_loss = 0.0;
};

struct WerCell {
  std::string model;   // M2 | M4
  std::string domain;  // source | target
  eval::EvalReport report;
};

struct ProbeSummary {
  std::string model;
  std::vector<double> reference_peaks_hz;  // probe-vowel peaks
  std::vector<double> mean_formant_prominence;  // one per target vowel
};

struct ExperimentReport {
  std::string run_dir;
  std::string config_digest;
  std::vector<StageSummary> stages;
  std::vector<WerCell> wer;
  std::map<std::string, ProbeSummary> probes;
  surgery::ModelCheckpoint m2;
  surgery::ModelCheckpoint m4;

  double Wer(const std::string& model, const std::string& domain,
             const std::string& split = "test") const;
};

struct PipelineOptions {
  bool write_artifacts = true;
  bool verbose = false;
};

// synth -> pretrain (M1) -> finetune (M2) -> continual pretrain (M3) ->
// combine (M4) -> evaluate M2, M4 on source and target -> probe. M1 and M2
// are cached under run_dir/cache keyed by SourceDigest. Stage failures are
// rethrown as the same error type with the stage name prefixed.
ExperimentReport RunPipeline(const ExperimentConfig& cfg, const std::string& run_dir,
                             const PipelineOptions& options = {});

// Run directory: cfg.output_dir, else $SOA_OUTPUT_ROOT/run-<digest>, else
// runs/run-<digest>.
std::string ResolveRunDir(const ExperimentConfig& cfg);

// Probe vowel with formants 568 / 1559 / 2944 Hz.
synth::SymbolSpec ProbeVowel();
// Single-segment vowel waveforms drawn from a domain's inventory, cycling
// through symbols.
std::vector<std::pair<synth::Waveform, std::vector<double>>> DomainVowels(
    const synth::DomainSpec& spec, int count, uint64_t seed);

// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
double SignTestPValue(int wins, int trials);

}  // namespace soa::pipeline

#endif  // SOA_PIPELINE_EXPERIMENT_H_
