#include "soa/pipeline/experiment.h"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <utility>

#include "soa/errors.h"
#include "soa/training/schedule.h"
#include "soa/util/random.h"

namespace soa::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using training::StageKind;

namespace {

// Runs fn, re-raising library errors with the stage name prefixed. Error
// classes the CLI maps to distinct exit codes keep their type.
template <class Fn>
auto InStage(const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(stage + ": " + e.what());
  } catch (const DataContractError& e) {
    throw DataContractError(stage + ": " + e.what());
  } catch (const IntegrityError& e) {
    throw IntegrityError(stage + ": " + e.what());
  } catch (const IncompatibleArchitectureError& e) {
    throw IncompatibleArchitectureError(stage + ": " + e.what());
  } catch (const Error& e) {
    throw Error(stage + ": " + e.what());
  }
}

StageSummary Summarize(const std::string& label, StageKind kind,
                       const training::StageResult& r, const FlopsSettings& flops) {
  StageSummary s;
  s.label = label;
  s.stage = training::StageKindName(kind);
  s.steps_run = static_cast<int64_t>(r.log.size());
  s.wall_seconds = r.wall_seconds;
  s.flops = training::EstimateFlops(r.wall_seconds, flops.devices, flops.device_tflops);
  s.skipped_samples = r.skipped_samples;
  s.final_loss = r.log.empty() ? 0.0 : r.log.back().loss;
  return s;
}

std::optional<std::pair<surgery::ModelCheckpoint, surgery::ModelCheckpoint>> LoadCached(
    const fs::path& dir, const std::string& digest) {
  std::ifstream in(dir / "source_digest.txt");
  std::string stored;
  if (!(in >> stored) || stored != digest) return std::nullopt;
  try {
    return std::make_pair(surgery::LoadCheckpoint((dir / "M1").string()),
                          surgery::LoadCheckpoint((dir / "M2").string()));
  } catch (const IntegrityError&) {
    return std::nullopt;
  }
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  SOA_REQUIRE(out.good(), Error, "cannot write " + path.string());
}

}  // namespace

Corpora SynthesizeCorpora(const ExperimentConfig& cfg) {
  const auto& k = cfg.corpora;
  auto seed = [&cfg](const std::string& stream) { return DeriveSeed(cfg.seed, "corpus." + stream); };
  Corpora c;
  c.source_unlabeled =
      synth::SampleCorpus(cfg.source, k.source_unlabeled, k.length, false, seed("source_unlabeled"));
  c.source_labeled =
      synth::SampleCorpus(cfg.source, k.source_labeled, k.length, true, seed("source_labeled"));
  const synth::Corpus target_full =
      synth::SampleCorpus(cfg.target, k.target_unlabeled, k.length, false, seed("target_unlabeled"));
  const size_t keep = std::max<size_t>(
      1, static_cast<size_t>(std::ceil(k.target_fraction * target_full.utterances.size() - 1e-9)));
  c.target_unlabeled = synth::TakeSubset(target_full, keep);
  for (const auto& split : cfg.eval_splits) {
    const int n = split == "dev" ? k.dev : k.test;
    c.source_eval[split] =
        synth::SampleCorpus(cfg.source, n, k.length, true, seed("source_" + split), split);
    c.target_eval[split] =
        synth::SampleCorpus(cfg.target, n, k.length, true, seed("target_" + split), split);
  }
  return c;
}

synth::SymbolSpec ProbeVowel() {
  synth::SymbolSpec s;
  s.id = "probe";
  s.formants_hz = {568.0, 1559.0, 2944.0};
  return s;
}

std::vector<std::pair<synth::Waveform, std::vector<double>>> DomainVowels(
    const synth::DomainSpec& spec, int count, uint64_t seed) {
  SOA_REQUIRE(!spec.symbols.empty(), ContractError, "domain has no symbols");
  std::vector<std::pair<synth::Waveform, std::vector<double>>> out;
  for (int i = 0; i < count; ++i) {
    const int token = i % spec.vocabulary_size();
    std::vector<double> formants;
    for (double f : spec.symbols[token].formants_hz) formants.push_back(f * spec.formant_scale);
    out.emplace_back(synth::SynthUtterance(spec, {token}, DeriveSeed(seed, "vowel", i)),
                     std::move(formants));
  }
  return out;
}

double SignTestPValue(int wins, int trials) {
  SOA_REQUIRE(trials >= 0 && wins >= 0 && wins <= trials, ContractError,
              "sign test needs 0 <= wins <= trials");
  double p = 0.0;
  for (int k = wins; k <= trials; ++k)
    p += std::exp(std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) -
                  std::lgamma(trials - k + 1.0) - trials * std::log(2.0));
  return std::min(1.0, p);
}

double ExperimentReport::Wer(const std::string& model, const std::string& domain,
                             const std::string& split) const {
  for (const auto& c : wer)
    if (c.model == model && c.domain == domain && c.report.split == split) return c.report.wer;
  throw ContractError("no WER cell for " + model + "/" + domain + "/" + split);
}

ExperimentReport RunPipeline(const ExperimentConfig& cfg, const std::string& run_dir,
                             const PipelineOptions& options) {
  const fs::path root(run_dir);
  auto say = [&options](const std::string& msg) {
    if (options.verbose) std::fprintf(stderr, "[pipeline] %s\n", msg.c_str());
  };
  if (options.write_artifacts) {
    for (const char* sub : {"checkpoints", "logs", "reports"}) fs::create_directories(root / sub);
    WriteText(root / "config.json", cfg.ToJson() + "\n");
  }

  ExperimentReport report;
  report.run_dir = run_dir;
  report.config_digest = cfg.Digest();

  say("synthesizing corpora");
  const Corpora data = InStage("synth", [&] { return SynthesizeCorpora(cfg); });

  // Initial pretraining and source finetuning, reused across target domains.
  const std::string source_digest = cfg.SourceDigest();
  const fs::path cache = root / "cache" / source_digest.substr(0, 16);
  surgery::ModelCheckpoint m1, m2;
  std::optional<std::pair<surgery::ModelCheckpoint, surgery::ModelCheckpoint>> cached;
  if (options.write_artifacts) cached = LoadCached(cache, source_digest);
  auto log_path = [&](const char* name) {
    return options.write_artifacts ? (root / "logs" / name).string() : std::string();
  };
  if (cached) {
    say("reusing cached M1/M2 from " + cache.string());
    m1 = cached->first;
    m2 = cached->second;
    for (auto [label, kind] : {std::pair{"M1", StageKind::kPretrain},
                               std::pair{"M2", StageKind::kFinetune}}) {
      StageSummary s;
      s.label = label;
      s.stage = training::StageKindName(kind);
      s.cached = true;
      report.stages.push_back(s);
      if (options.write_artifacts)
        training::WriteStageLog({}, log_path(kind == StageKind::kPretrain ? "pretrain.csv"
                                                                        : "finetune.csv"));
    }
  } else {
    say("pretraining M1");
    auto pcfg = cfg.pretrain;
    pcfg.log_path = log_path("pretrain.csv");
    const auto init = surgery::FromModel(
        model::Model::Initialize(cfg.model, DeriveSeed(cfg.seed, "model_init")));
    const auto r1 = InStage("pretrain", [&] {
      return training::RunStage(pcfg, init, {&data.source_unlabeled, nullptr});
    });
    m1 = r1.checkpoint;
    report.stages.push_back(Summarize("M1", StageKind::kPretrain, r1, cfg.flops));

    say("finetuning M2");
    auto fcfg = cfg.finetune;
    fcfg.log_path = log_path("finetune.csv");
    const auto r2 = InStage("finetune", [&] {
      return training::RunStage(fcfg, m1, {&data.source_labeled, nullptr});
    });
    m2 = r2.checkpoint;
    report.stages.push_back(Summarize("M2", StageKind::kFinetune, r2, cfg.flops));
    if (options.write_artifacts) {
      surgery::SaveCheckpoint(m1, (cache / "M1").string());
      surgery::SaveCheckpoint(m2, (cache / "M2").string());
      WriteText(cache / "source_digest.txt", source_digest + "\n");
    }
  }

  say("continual pretraining M3");
  auto ccfg = cfg.continual;
  ccfg.log_path = log_path("continual_pretrain.csv");
  const auto r3 = InStage("continual_pretrain", [&] {
    return training::RunStage(ccfg, m1, {&data.source_unlabeled, &data.target_unlabeled});
  });
  const surgery::ModelCheckpoint& m3 = r3.checkpoint;
  report.stages.push_back(Summarize("M3", StageKind::kContinualPretrain, r3, cfg.flops));

  const surgery::ModelCheckpoint m4 = InStage("combine", [&] { return surgery::Combine(m3, m2); });
  StageSummary combine;
  combine.label = "M4";
  combine.stage = "combine";
  report.stages.push_back(combine);

  if (options.write_artifacts) {
    const std::pair<const char*, const surgery::ModelCheckpoint*> all[] = {
        {"M1", &m1}, {"M2", &m2}, {"M3", &m3}, {"M4", &m4}};
    for (auto [name, ck] : all) surgery::SaveCheckpoint(*ck, (root / "checkpoints" / name).string());
  }

  say("evaluating");
  std::vector<eval::EvalReport> eval_rows;
  for (const auto& split : cfg.eval_splits) {
    for (auto [name, ck] : {std::pair{"M2", &std::as_const(m2)}, std::pair{"M4", &m4}}) {
      for (auto [domain, corpus] : {std::pair{"source", &data.source_eval.at(split)},
                                    std::pair{"target", &data.target_eval.at(split)}}) {
        WerCell cell;
        cell.model = name;
        cell.domain = domain;
        cell.report = InStage("eval", [&] { return eval::Evaluate(*ck, *corpus, split); });
        report.wer.push_back(cell);
        eval::EvalReport row = cell.report;
        row.split = std::string(name) + "/" + domain + "/" + split;
        eval_rows.push_back(row);
      }
    }
  }

  if (cfg.probe.enabled) {
    say("probing feature encoders");
    const auto vowels = DomainVowels(cfg.target, cfg.probe.num_vowels,
                                     DeriveSeed(cfg.seed, "probe_vowels"));
    synth::DomainSpec probe_domain = cfg.source;
    probe_domain.symbols = {ProbeVowel()};
    probe_domain.formant_scale = 1.0;
    probe_domain.noise_snr_range_db.reset();
    const synth::Waveform probe_vowel =
        synth::SynthUtterance(probe_domain, {0}, DeriveSeed(cfg.seed, "probe_vowel"));
    const std::vector<double> probe_formants(ProbeVowel().formants_hz.begin(),
                                             ProbeVowel().formants_hz.end());
    for (auto [name, ck] : {std::pair{"M2", &std::as_const(m2)}, std::pair{"M4", &m4}}) {
      ProbeSummary ps;
      ps.model = name;
      InStage("probe", [&] {
        const eval::SinusoidProbe probe(*ck, cfg.source.sample_rate_hz, cfg.probe.options);
        const eval::ProbeReport ref = probe.Probe(probe_vowel, probe_formants);
        ps.reference_peaks_hz = ref.peaks_hz;
        if (options.write_artifacts)
          eval::WriteProbeCsv(ref, (root / "reports" / ("probe_" + std::string(name) + ".csv")).string());
        for (const auto& [wave, formants] : vowels) {
          const auto r = probe.Probe(wave, formants);
          const auto prom = eval::FormantProminences(r, formants, cfg.probe.tolerance_hz);
          double mean = 0.0;
          for (double p : prom) mean += p / static_cast<double>(prom.size());
          ps.mean_formant_prominence.push_back(mean);
        }
        return 0;
      });
      report.probes[name] = ps;
    }
  }

  report.m2 = m2;
  report.m4 = m4;
  if (!options.write_artifacts) return report;

  eval::WriteEvalCsv(eval_rows, (root / "reports" / "wer.csv").string());
  {
    std::ofstream out(root / "reports" / "flops.csv");
    out << "label,stage,steps_run,cached,wall_seconds,flops\n";
    for (const auto& s : report.stages)
      out << s.label << ',' << s.stage << ',' << s.steps_run << ',' << (s.cached ? 1 : 0) << ','
          << s.wall_seconds << ',' << s.flops << '\n';
  }

  json table = json::object();
  for (const auto& split : cfg.eval_splits) {
    json t;
    for (const char* m : {"M2", "M4"})
      for (const char* d : {"source", "target"}) t[m][d] = report.Wer(m, d, split);
    t["delta_M4_minus_M2"] = {{"source", report.Wer("M4", "source", split) - report.Wer("M2", "source", split)},
                              {"target", report.Wer("M4", "target", split) - report.Wer("M2", "target", split)}};
    table[split] = t;
  }
  json stages = json::array();
  for (const auto& s : report.stages)
    stages.push_back({{"label", s.label},
                      {"stage", s.stage},
                      {"steps_run", s.steps_run},
                      {"cached", s.cached},
                      {"skipped_samples", s.skipped_samples},
                      {"final_loss", s.final_loss}});
  json probes = json::object();
  if (cfg.probe.enabled) {
    const auto& a = report.probes.at("M2").mean_formant_prominence;
    const auto& b = report.probes.at("M4").mean_formant_prominence;
    int wins = 0, trials = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i] == b[i]) continue;
      ++trials;
      wins += b[i] > a[i];
    }
    std::ofstream out(root / "reports" / "probe_prominence.csv");
    out.precision(10);
    out << "vowel,M2,M4\n";
    for (size_t i = 0; i < a.size(); ++i) out << i << ',' << a[i] << ',' << b[i] << '\n';
    probes = {{"reference_peaks_hz",
               {{"M2", report.probes.at("M2").reference_peaks_hz},
                {"M4", report.probes.at("M4").reference_peaks_hz}}},
              {"sign_test", {{"M4_wins", wins}, {"trials", trials},
                             {"p_value", SignTestPValue(wins, trials)}}}};
  }
  json lineage = json::array();
  for (const auto& e : m4.lineage)
    lineage.push_back({{"label", e.label}, {"stage", e.stage}, {"steps", e.steps},
                       {"parent_digests", e.parent_digests}});
  const json summary = {{"config_digest", report.config_digest},
                        {"source_digest", source_digest},
                        {"wer", table},
                        {"stages", stages},
                        {"probe", probes},
                        {"checkpoints",
                         {{"M1", m1.Digest()}, {"M2", m2.Digest()}, {"M3", m3.Digest()},
                          {"M4", m4.Digest()}}},
                        {"lineage", lineage},
                        {"flops_report", "reports/flops.csv"}};
  WriteText(root / "summary.json", summary.dump(2) + "\n");
  return report;
}

}  // namespace soa::pipeline
