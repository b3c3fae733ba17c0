#include "soa/eval/eval.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "soa/errors.h"
#include "soa/model/model.h"
#include "soa/objectives/objectives.h"

namespace soa::eval {

std::vector<int> GreedyCtcDecode(const ad::Tensor& log_probs, int blank) {
  SOA_REQUIRE(log_probs.rank() == 2, ContractError, "expected [T x classes] log-probabilities");
  const int64_t T = log_probs.dim(0), C = log_probs.dim(1);
  const auto v = log_probs.values();
  std::vector<int> out;
  int prev = -1;
  for (int64_t t = 0; t < T; ++t) {
    const double* row = v.data() + t * C;
    const int best = static_cast<int>(std::max_element(row, row + C) - row);
    if (best != prev && best != blank) out.push_back(best);
    prev = best;
  }
  return out;
}

ErrorCounts WordErrorRate(std::span<const int> ref, std::span<const int> hyp) {
  SOA_REQUIRE(!ref.empty(), UndefinedMetricError, "WER is undefined for an empty reference");
  const size_t n = ref.size(), m = hyp.size();
  // cost[i][j] aligns ref[:i] with hyp[:j]; ties prefer substitution, then
  // deletion, then insertion.
  std::vector<std::vector<int64_t>> cost(n + 1, std::vector<int64_t>(m + 1));
  for (size_t i = 0; i <= n; ++i) cost[i][0] = static_cast<int64_t>(i);
  for (size_t j = 0; j <= m; ++j) cost[0][j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j)
      cost[i][j] = std::min({cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                             cost[i - 1][j] + 1, cost[i][j - 1] + 1});
  ErrorCounts e;
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])) {
      e.substitutions += ref[i - 1] != hyp[j - 1];
      --i;
      --j;
    } else if (i > 0 && cost[i][j] == cost[i - 1][j] + 1) {
      ++e.deletions;
      --i;
    } else {
      ++e.insertions;
      --j;
    }
  }
  e.ref_words = static_cast<int64_t>(n);
  e.wer = static_cast<double>(e.substitutions + e.insertions + e.deletions) /
          static_cast<double>(n);
  return e;
}

bool EvalReport::SameScores(const EvalReport& o) const {
  return wer == o.wer && substitutions == o.substitutions && insertions == o.insertions &&
         deletions == o.deletions && ref_words == o.ref_words && utterances == o.utterances;
}

EvalReport Evaluate(const surgery::ModelCheckpoint& ckpt, const synth::Corpus& corpus,
                    const std::string& split_name) {
  SOA_REQUIRE(ckpt.HasComponent(model::Component::kCtcHead), ContractError,
              "evaluation needs a checkpoint with a CTC head");
  SOA_REQUIRE(corpus.labeled(), DataContractError, "evaluation needs a labeled corpus");
  model::Model m = surgery::ToModel(ckpt);
  m.SetTrainable({});
  EvalReport r;
  r.split = split_name.empty() ? corpus.domain + "/" + corpus.split : split_name;
  r.lineage_digest = ckpt.Digest();
  for (const auto& u : corpus.utterances) {
    const auto hyp = objectives::ClassesToTokens(GreedyCtcDecode(m.Recognize(u.samples)));
    const ErrorCounts e = WordErrorRate(*u.transcript, hyp);
    r.substitutions += e.substitutions;
    r.insertions += e.insertions;
    r.deletions += e.deletions;
    r.ref_words += e.ref_words;
    ++r.utterances;
  }
  SOA_REQUIRE(r.ref_words > 0, UndefinedMetricError, "corpus has no reference words");
  r.wer = static_cast<double>(r.substitutions + r.insertions + r.deletions) /
          static_cast<double>(r.ref_words);
  return r;
}

void WriteEvalCsv(const std::vector<EvalReport>& reports, const std::string& path) {
  std::ofstream out(path);
  SOA_REQUIRE(out.good(), Error, "cannot write " + path);
  out.precision(10);
  out << "split,wer,substitutions,insertions,deletions,ref_words,utterances,lineage_digest\n";
  for (const auto& r : reports)
    out << r.split << ',' << r.wer << ',' << r.substitutions << ',' << r.insertions << ','
        << r.deletions << ',' << r.ref_words << ',' << r.utterances << ',' << r.lineage_digest
        << '\n';
}

double CosineSimilarity(std::span<const double> a, std::span<const double> b) {
  SOA_REQUIRE(a.size() == b.size(), ContractError, "cosine similarity of unequal lengths");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  SOA_REQUIRE(na > 0.0 && nb > 0.0, DegenerateInputError, "cosine similarity of a zero vector");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

std::vector<Peak> FindPeaks(std::span<const double> curve, double min_prominence) {
  std::vector<Peak> peaks;
  const size_t n = curve.size();
  if (n < 3) return peaks;
  size_t i = 1;
  while (i + 1 < n) {
    if (curve[i] > curve[i - 1]) {
      size_t j = i;
      while (j + 1 < n && curve[j + 1] == curve[i]) ++j;
      if (j + 1 < n && curve[j + 1] < curve[i]) {
        const double h = curve[i];
        double left_min = h;
        for (size_t k = i; k-- > 0;) {
          if (curve[k] > h) break;
          left_min = std::min(left_min, curve[k]);
        }
        double right_min = h;
        for (size_t k = j + 1; k < n; ++k) {
          if (curve[k] > h) break;
          right_min = std::min(right_min, curve[k]);
        }
        const double prominence = h - std::max(left_min, right_min);
        if (prominence >= min_prominence) peaks.push_back({i, prominence});
      }
      i = j + 1;
    } else {
      ++i;
    }
  }
  return peaks;
}

std::vector<float> ProbeSinusoid(double freq_hz, int sample_rate_hz, double duration_s,
                                 double amplitude) {
  const size_t n = static_cast<size_t>(std::llround(duration_s * sample_rate_hz));
  std::vector<float> x(n);
  for (size_t i = 0; i < n; ++i)
    x[i] = static_cast<float>(amplitude * std::sin(2.0 * std::numbers::pi * freq_hz *
                                                   static_cast<double>(i) / sample_rate_hz));
  return x;
}

SinusoidProbe::SinusoidProbe(const surgery::ModelCheckpoint& ckpt, int sample_rate_hz,
                             ProbeOptions options)
    : model_(surgery::ToModel(ckpt)), sample_rate_hz_(sample_rate_hz), options_(options) {
  model_.SetTrainable({});
  SOA_REQUIRE(options_.step_hz > 0.0 && options_.f_lo_hz > 0.0 &&
                  options_.f_hi_hz >= options_.f_lo_hz,
              ContractError, "invalid probe frequency grid");
  SOA_REQUIRE(options_.f_hi_hz <= sample_rate_hz / 2.0, ContractError,
              "probe frequencies must not exceed Nyquist");
  const int64_t count =
      static_cast<int64_t>(std::floor((options_.f_hi_hz - options_.f_lo_hz) / options_.step_hz + 1e-9)) + 1;
  for (int64_t i = 0; i < count; ++i) {
    const double f = options_.f_lo_hz + static_cast<double>(i) * options_.step_hz;
    frequencies_.push_back(f);
    sinusoid_latents_.push_back(PooledLatent(
        ProbeSinusoid(f, sample_rate_hz_, options_.duration_s, options_.amplitude)));
  }
}

std::vector<double> SinusoidProbe::PooledLatent(std::span<const float> waveform) const {
  const ad::Tensor z = model_.FeatureEncode(waveform);
  const int64_t T = z.dim(0), D = z.dim(1);
  const auto v = z.values();
  std::vector<double> pooled(D, options_.pooling == LatentPooling::kMax ? -INFINITY : 0.0);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t d = 0; d < D; ++d) {
      if (options_.pooling == LatentPooling::kMax)
        pooled[d] = std::max(pooled[d], v[t * D + d]);
      else
        pooled[d] += v[t * D + d] / static_cast<double>(T);
    }
  return pooled;
}

ProbeReport SinusoidProbe::Probe(std::span<const float> segment,
                                 std::vector<double> reference_formants_hz) const {
  const std::vector<double> target = PooledLatent(segment);
  ProbeReport r;
  r.frequencies_hz = frequencies_;
  r.reference_formants_hz = std::move(reference_formants_hz);
  for (const auto& s : sinusoid_latents_) r.similarity.push_back(CosineSimilarity(s, target));
  for (const Peak& p : FindPeaks(r.similarity, options_.min_prominence)) {
    r.peaks_hz.push_back(frequencies_[p.index]);
    r.peak_prominences.push_back(p.prominence);
  }
  return r;
}

std::vector<double> FormantProminences(const ProbeReport& report,
                                       std::span<const double> formants_hz,
                                       double tolerance_hz) {
  std::vector<double> out;
  for (double f : formants_hz) {
    double best = 0.0;
    for (size_t i = 0; i < report.peaks_hz.size(); ++i)
      if (std::abs(report.peaks_hz[i] - f) <= tolerance_hz)
        best = std::max(best, report.peak_prominences[i]);
    out.push_back(best);
  }
  return out;
}

void WriteProbeCsv(const ProbeReport& report, const std::string& path) {
  std::ofstream out(path);
  SOA_REQUIRE(out.good(), Error, "cannot write " + path);
  out.precision(10);
  out << "frequency_hz,similarity\n";
  for (size_t i = 0; i < report.frequencies_hz.size(); ++i)
    out << report.frequencies_hz[i] << ',' << report.similarity[i] << '\n';
}

}  // namespace soa::eval
