// soa: command-line driver for the speech-only adaptation experiments.
//
//   soa pipeline --config exp.json --out runs/a
//   soa pretrain --config exp.json --steps 200 --out runs/m1
//   soa finetune --init runs/m1/checkpoints/M1 --out runs/m2
//   soa adapt    --init runs/m1/checkpoints/M1 --out runs/m3
//   soa combine  --theta runs/m3/checkpoints/M3 --phi runs/m2/checkpoints/M2 --out runs/m4
//   soa eval     --checkpoint runs/m4/checkpoints/M4
//   soa probe    --checkpoint runs/m4/checkpoints/M4 --out runs/probe
//   soa flops    --seconds 39121 --devices 2 --tflops 19.17
//
// Exit status: 0 success, 2 configuration error, 3 data error, 4 training or
// evaluation error, 5 integrity error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "soa/errors.h"
#include "soa/eval/eval.h"
#include "soa/pipeline/experiment.h"
#include "soa/surgery/checkpoint.h"
#include "soa/synthdata/synth.h"
#include "soa/training/schedule.h"
#include "soa/training/stage.h"
#include "soa/util/random.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace soa;

namespace {

struct Common {
  std::string config_path;
  std::string out;
  std::optional<uint64_t> seed;
};

// Reads the config file (or an empty document) and applies command-line
// overrides before schema validation, so derived values follow them.
pipeline::ExperimentConfig LoadConfig(const Common& c,
                                      const std::vector<std::pair<std::string, int64_t>>& steps) {
  json doc = json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in.good()) throw ConfigError("cannot read config file " + c.config_path);
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(c.config_path + ": not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw ConfigError(c.config_path + ": expected a JSON object");
  }
  if (c.seed) doc["seed"] = *c.seed;
  for (const auto& [stage, n] : steps) {
    if (!doc.contains("stages") || !doc["stages"].is_object()) doc["stages"] = json::object();
    if (!doc["stages"].contains(stage) || !doc["stages"][stage].is_object())
      doc["stages"][stage] = json::object();
    doc["stages"][stage]["total_steps"] = n;
  }
  auto cfg = pipeline::ParseExperimentConfig(doc.dump());
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

std::string RunDir(const pipeline::ExperimentConfig& cfg) {
  const std::string dir = pipeline::ResolveRunDir(cfg);
  fs::create_directories(fs::path(dir) / "checkpoints");
  fs::create_directories(fs::path(dir) / "logs");
  fs::create_directories(fs::path(dir) / "reports");
  return dir;
}

void AddCommon(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "experiment config (JSON)");
  app->add_option("--out", c.out, "run directory (default: $SOA_OUTPUT_ROOT/run-<digest>)");
  app->add_option("--seed", c.seed, "global seed override");
}

void PrintStage(const char* label, const training::StageResult& r) {
  const double loss = r.log.empty() ? 0.0 : r.log.back().loss;
  std::printf("%s: %zu steps, final loss %.4f, %lld skipped samples, %.1f s\n", label,
              r.log.size(), loss, static_cast<long long>(r.skipped_samples), r.wall_seconds);
}

training::StageResult TrainStage(const pipeline::ExperimentConfig& cfg, training::StageKind kind,
                                 const std::string& init_path, const std::string& run_dir) {
  const auto data = pipeline::SynthesizeCorpora(cfg);
  surgery::ModelCheckpoint start;
  if (init_path.empty()) {
    if (kind != training::StageKind::kPretrain)
      throw ConfigError("--init is required for this stage");
    start = surgery::FromModel(
        model::Model::Initialize(cfg.model, DeriveSeed(cfg.seed, "model_init")));
  } else {
    start = surgery::LoadCheckpoint(init_path);
  }
  training::StageConfig sc;
  training::StageData sd;
  switch (kind) {
    case training::StageKind::kPretrain:
      sc = cfg.pretrain;
      sd = {&data.source_unlabeled, nullptr};
      break;
    case training::StageKind::kFinetune:
      sc = cfg.finetune;
      sd = {&data.source_labeled, nullptr};
      break;
    case training::StageKind::kContinualPretrain:
      sc = cfg.continual;
      sd = {&data.source_unlabeled, &data.target_unlabeled};
      break;
  }
  sc.log_path = (fs::path(run_dir) / "logs" / (std::string(training::StageKindName(kind)) + ".csv")).string();
  auto r = training::RunStage(sc, start, sd);
  surgery::SaveCheckpoint(r.checkpoint, (fs::path(run_dir) / "checkpoints" / sc.label).string());
  return r;
}

int Dispatch(int argc, char** argv) {
  CLI::App app{"Speech-only adaptation experiments on synthetic formant domains"};
  app.require_subcommand(1);

  Common common;
  int64_t steps = -1;
  std::string init, theta, phi, checkpoint, corpus_dir, domain = "target";
  int64_t pretrain_steps = -1, finetune_steps = -1, adapt_steps = -1;
  double seconds = 0.0, tflops = 19.17;
  int devices = 1;
  bool quiet = false;

  auto* synth_cmd = app.add_subcommand("synth", "write the configured corpora to disk");
  AddCommon(synth_cmd, common);

  auto* pretrain_cmd = app.add_subcommand("pretrain", "initial pretraining (M1)");
  AddCommon(pretrain_cmd, common);
  pretrain_cmd->add_option("--steps", steps, "training steps");
  pretrain_cmd->add_option("--init", init, "start checkpoint (default: random init)");

  auto* finetune_cmd = app.add_subcommand("finetune", "source finetuning with theta frozen (M2)");
  AddCommon(finetune_cmd, common);
  finetune_cmd->add_option("--steps", steps, "training steps");
  finetune_cmd->add_option("--init", init, "pretrained checkpoint (M1)")->required();

  auto* adapt_cmd = app.add_subcommand("adapt", "continual pretraining with phi frozen (M3)");
  AddCommon(adapt_cmd, common);
  adapt_cmd->add_option("--steps", steps, "training steps");
  adapt_cmd->add_option("--init", init, "pretrained checkpoint (M1)")->required();

  auto* combine_cmd = app.add_subcommand("combine", "pair an adapted theta with a finetuned phi (M4)");
  combine_cmd->add_option("--theta", theta, "feature-encoder donor (M3)")->required();
  combine_cmd->add_option("--phi", phi, "contextual-encoder donor (M2)")->required();
  combine_cmd->add_option("--out", common.out, "output checkpoint directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "greedy-decoding WER of a checkpoint");
  AddCommon(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--corpus", corpus_dir, "labeled corpus written by `synth` (default: config eval splits)");
  eval_cmd->add_option("--domain", domain, "domain of --corpus: source or target");

  auto* probe_cmd = app.add_subcommand("probe", "sinusoid probe of a feature encoder");
  AddCommon(probe_cmd, common);
  probe_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();

  auto* flops_cmd = app.add_subcommand("flops", "device-time compute estimate");
  AddCommon(flops_cmd, common);
  flops_cmd->add_option("--seconds", seconds, "training wall time")->required();
  flops_cmd->add_option("--devices", devices, "number of devices");
  flops_cmd->add_option("--tflops", tflops, "per-device single-precision TFLOPS");

  auto* pipeline_cmd = app.add_subcommand("pipeline", "run the full adaptation experiment");
  AddCommon(pipeline_cmd, common);
  pipeline_cmd->add_option("--pretrain-steps", pretrain_steps, "override pretraining steps");
  pipeline_cmd->add_option("--finetune-steps", finetune_steps, "override finetuning steps");
  pipeline_cmd->add_option("--adapt-steps", adapt_steps, "override continual pretraining steps");
  pipeline_cmd->add_flag("--quiet", quiet, "no progress messages");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  auto stage_steps = [&](const char* stage) {
    std::vector<std::pair<std::string, int64_t>> o;
    if (steps >= 0) o.emplace_back(stage, steps);
    return o;
  };

  if (*synth_cmd) {
    const auto cfg = LoadConfig(common, {});
    const std::string dir = RunDir(cfg);
    const auto data = pipeline::SynthesizeCorpora(cfg);
    const fs::path base = fs::path(dir) / "corpora";
    synth::WriteCorpus(data.source_unlabeled, cfg.source, (base / "source_unlabeled").string());
    synth::WriteCorpus(data.source_labeled, cfg.source, (base / "source_labeled").string());
    synth::WriteCorpus(data.target_unlabeled, cfg.target, (base / "target_unlabeled").string());
    for (const auto& [split, c] : data.source_eval)
      synth::WriteCorpus(c, cfg.source, (base / ("source_" + split)).string());
    for (const auto& [split, c] : data.target_eval)
      synth::WriteCorpus(c, cfg.target, (base / ("target_" + split)).string());
    std::printf("corpora written to %s\n", base.string().c_str());
    return 0;
  }
  if (*pretrain_cmd || *finetune_cmd || *adapt_cmd) {
    const auto kind = *pretrain_cmd ? training::StageKind::kPretrain
                      : *finetune_cmd ? training::StageKind::kFinetune
                                      : training::StageKind::kContinualPretrain;
    const auto cfg = LoadConfig(common, stage_steps(training::StageKindName(kind)));
    const std::string dir = RunDir(cfg);
    const auto r = TrainStage(cfg, kind, init, dir);
    PrintStage(training::StageKindName(kind), r);
    std::printf("checkpoint digest %s\n", r.checkpoint.Digest().c_str());
    return 0;
  }
  if (*combine_cmd) {
    const auto m4 = surgery::Combine(surgery::LoadCheckpoint(theta), surgery::LoadCheckpoint(phi));
    surgery::SaveCheckpoint(m4, common.out);
    std::printf("combined checkpoint %s\n", m4.Digest().c_str());
    return 0;
  }
  if (*eval_cmd) {
    const auto cfg = LoadConfig(common, {});
    const auto ckpt = surgery::LoadCheckpoint(checkpoint);
    std::vector<eval::EvalReport> rows;
    if (!corpus_dir.empty()) {
      if (domain != "source" && domain != "target")
        throw ConfigError("--domain must be source or target");
      const auto corpus = synth::ReadCorpus(corpus_dir, domain == "source" ? cfg.source : cfg.target);
      rows.push_back(eval::Evaluate(ckpt, corpus));
    } else {
      const auto data = pipeline::SynthesizeCorpora(cfg);
      for (const auto& [split, c] : data.source_eval) rows.push_back(eval::Evaluate(ckpt, c, "source/" + split));
      for (const auto& [split, c] : data.target_eval) rows.push_back(eval::Evaluate(ckpt, c, "target/" + split));
    }
    if (!common.out.empty()) {
      fs::create_directories(common.out);
      eval::WriteEvalCsv(rows, (fs::path(common.out) / "eval.csv").string());
    }
    for (const auto& r : rows)
      std::printf("%s WER %.4f (S %lld I %lld D %lld / %lld words, %lld utterances)\n",
                  r.split.c_str(), r.wer, static_cast<long long>(r.substitutions),
                  static_cast<long long>(r.insertions), static_cast<long long>(r.deletions),
                  static_cast<long long>(r.ref_words), static_cast<long long>(r.utterances));
    return 0;
  }
  if (*probe_cmd) {
    const auto cfg = LoadConfig(common, {});
    const auto ckpt = surgery::LoadCheckpoint(checkpoint);
    synth::DomainSpec d = cfg.source;
    d.symbols = {pipeline::ProbeVowel()};
    d.formant_scale = 1.0;
    d.noise_snr_range_db.reset();
    const auto vowel = synth::SynthUtterance(d, {0}, DeriveSeed(cfg.seed, "probe_vowel"));
    const eval::SinusoidProbe probe(ckpt, d.sample_rate_hz, cfg.probe.options);
    const auto& f = pipeline::ProbeVowel().formants_hz;
    const auto report = probe.Probe(vowel, {f.begin(), f.end()});
    if (!common.out.empty()) {
      fs::create_directories(common.out);
      eval::WriteProbeCsv(report, (fs::path(common.out) / "probe.csv").string());
    }
    std::printf("peaks (Hz):");
    for (double p : report.peaks_hz) std::printf(" %.0f", p);
    std::printf("\n");
    return 0;
  }
  if (*flops_cmd) {
    std::printf("%.6e\n", training::EstimateFlops(seconds, devices, tflops));
    return 0;
  }
  if (*pipeline_cmd) {
    std::vector<std::pair<std::string, int64_t>> o;
    if (pretrain_steps >= 0) o.emplace_back("pretrain", pretrain_steps);
    if (finetune_steps >= 0) o.emplace_back("finetune", finetune_steps);
    if (adapt_steps >= 0) o.emplace_back("continual_pretrain", adapt_steps);
    const auto cfg = LoadConfig(common, o);
    const std::string dir = pipeline::ResolveRunDir(cfg);
    pipeline::PipelineOptions opts;
    opts.verbose = !quiet;
    const auto report = pipeline::RunPipeline(cfg, dir, opts);
    for (const auto& split : cfg.eval_splits) {
      std::printf("%s WER      source   target\n", split.c_str());
      for (const char* m : {"M2", "M4"})
        std::printf("  %s      %7.4f  %7.4f\n", m, report.Wer(m, "source", split),
                    report.Wer(m, "target", split));
    }
    std::printf("run directory %s\n", dir.c_str());
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return Dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataContractError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const VocabularyError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const IntegrityError& e) {
    std::fprintf(stderr, "integrity error: %s\n", e.what());
    return 5;
  } catch (const IncompatibleArchitectureError& e) {
    std::fprintf(stderr, "integrity error: %s\n", e.what());
    return 5;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}
