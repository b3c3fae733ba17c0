#include "soa/objectives/objectives.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "soa/autodiff/ops.h"
#include "soa/errors.h"
#include "soa/util/random.h"

namespace soa::objectives {

using ad::Tensor;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double LogAdd(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

void ValidateLabels(std::span<const int> labels, int64_t classes, int blank) {
  for (int l : labels) {
    SOA_REQUIRE(l >= 0 && l < classes && l != blank, ContractError,
                "CTC label " + std::to_string(l) + " out of range or blank");
  }
}

}  // namespace

int64_t MaskPlan::num_masked() const {
  return std::count(mask.begin(), mask.end(), true);
}

std::vector<int64_t> MaskPlan::masked_positions() const {
  std::vector<int64_t> out;
  for (size_t t = 0; t < mask.size(); ++t)
    if (mask[t]) out.push_back(static_cast<int64_t>(t));
  return out;
}

MaskPlan SampleMask(int64_t num_frames, double start_prob, int64_t span,
                    uint64_t seed, bool force_span) {
  SOA_REQUIRE(0.0 <= start_prob && start_prob <= 1.0, ContractError,
              "mask start probability must lie in [0, 1]");
  SOA_REQUIRE(1 <= span && span <= num_frames, ContractError,
              "mask span must satisfy 1 <= M <= T");
  MaskPlan plan;
  plan.start_prob = start_prob;
  plan.span = span;
  plan.mask.assign(num_frames, false);
  Rng rng(DeriveSeed(seed, "mask"));
  for (int64_t t = 0; t < num_frames; ++t) {
    if (rng.Uniform() < start_prob) {
      for (int64_t j = t; j < std::min(t + span, num_frames); ++j) plan.mask[j] = true;
    }
  }
  if (force_span && plan.num_masked() == 0) {
    const int64_t start = rng.UniformInt(num_frames - span + 1);
    for (int64_t j = start; j < start + span; ++j) plan.mask[j] = true;
  }
  return plan;
}

std::vector<std::vector<int64_t>> SampleDistractors(int64_t n, int64_t k,
                                                    uint64_t seed) {
  SOA_REQUIRE(n >= 2, ContractError, "distractors need at least two masked frames");
  SOA_REQUIRE(k >= 1, ContractError, "need at least one distractor");
  Rng rng(DeriveSeed(seed, "distractors"));
  std::vector<std::vector<int64_t>> out(n, std::vector<int64_t>(k));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < k; ++j) {
      int64_t d = rng.UniformInt(n - 1);
      if (d >= i) ++d;  // skip the true target
      out[i][j] = d;
    }
  }
  return out;
}

Tensor ContrastiveLoss(const ContrastiveBatch& batch) {
  SOA_REQUIRE(batch.temperature > 0.0, ContractError,
              "contrastive temperature must be positive");
  const int64_t n = batch.contexts.dim(0);
  SOA_REQUIRE(n >= 1 && batch.targets.dim(0) == n, ContractError,
              "contexts and targets must have the same positive row count");
  SOA_REQUIRE(static_cast<int64_t>(batch.distractors.size()) == n, ContractError,
              "one distractor list per position");
  const int64_t k = static_cast<int64_t>(batch.distractors.front().size());
  SOA_REQUIRE(k >= 1, ContractError, "need at least one distractor");

  std::vector<int64_t> context_rows, candidate_rows, true_slots;
  context_rows.reserve(n * (k + 1));
  candidate_rows.reserve(n * (k + 1));
  for (int64_t i = 0; i < n; ++i) {
    SOA_REQUIRE(static_cast<int64_t>(batch.distractors[i].size()) == k, ContractError,
                "every position needs the same number of distractors");
    true_slots.push_back(i * (k + 1));
    context_rows.push_back(i);
    candidate_rows.push_back(i);
    for (int64_t d : batch.distractors[i]) {
      SOA_REQUIRE(d != i, ContractError, "distractor equals the true target");
      context_rows.push_back(i);
      candidate_rows.push_back(d);
    }
  }
  Tensor sims = ad::CosineRows(ad::GatherRows(batch.contexts, context_rows),
                               ad::GatherRows(batch.targets, candidate_rows));
  Tensor logits = ad::Scale(ad::Reshape(sims, {n, k + 1}), 1.0 / batch.temperature);
  Tensor log_p = ad::Reshape(ad::LogSoftmax(logits, 1), {n * (k + 1)});
  return ad::Scale(ad::Mean(ad::GatherRows(log_p, true_slots)), -1.0);
}

Tensor DiversityLoss(const Tensor& avg_code_probs) {
  SOA_REQUIRE(avg_code_probs.rank() == 2, ContractError,
              "avg_code_probs must be [G x V]");
  const int64_t groups = avg_code_probs.dim(0), entries = avg_code_probs.dim(1);
  auto p = avg_code_probs.values();
  std::vector<double> perplexity(groups);
  double loss = 0.0;
  for (int64_t g = 0; g < groups; ++g) {
    double sum = 0.0, entropy = 0.0;
    for (int64_t v = 0; v < entries; ++v) {
      const double pv = p[g * entries + v];
      SOA_REQUIRE(pv >= 0.0, ContractError, "negative code probability");
      sum += pv;
      if (pv > 0.0) entropy -= pv * std::log(pv);
    }
    SOA_REQUIRE(std::abs(sum - 1.0) < 1e-6, ContractError,
                "code probabilities of a group must sum to 1");
    perplexity[g] = std::exp(entropy);
    loss += 1.0 - perplexity[g] / static_cast<double>(entries);
  }
  loss /= static_cast<double>(groups);
  return ad::MakeResult(
      "diversity_loss", {}, {loss}, {avg_code_probs},
      [groups, entries, perplexity](ad::Node& self) {
        auto& g = self.inputs[0]->MutableGrad();
        const auto& p = self.inputs[0]->value;
        const double scale = self.grad[0] / static_cast<double>(groups * entries);
        for (int64_t gi = 0; gi < groups; ++gi)
          for (int64_t v = 0; v < entries; ++v) {
            const double pv = std::max(p[gi * entries + v], 1e-300);
            // d/dp exp(H) = exp(H) * (-log p - 1)
            g[gi * entries + v] -= scale * perplexity[gi] * (-std::log(pv) - 1.0);
          }
      });
}

int64_t CtcMinFrames(std::span<const int> labels) {
  int64_t n = static_cast<int64_t>(labels.size());
  for (size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

Tensor CtcLoss(const Tensor& log_probs, std::span<const int> labels, int blank) {
  SOA_REQUIRE(log_probs.rank() == 2, ContractError, "log_probs must be [T x C]");
  const int64_t t_len = log_probs.dim(0), classes = log_probs.dim(1);
  SOA_REQUIRE(blank >= 0 && blank < classes, ContractError, "blank out of range");
  ValidateLabels(labels, classes, blank);
  SOA_REQUIRE(t_len >= 1 && t_len >= CtcMinFrames(labels), InfeasibleTargetError,
              "no CTC alignment: " + std::to_string(t_len) + " frames for a target needing " +
                  std::to_string(CtcMinFrames(labels)));

  // Blank-interleaved label sequence.
  const int64_t s_len = 2 * static_cast<int64_t>(labels.size()) + 1;
  std::vector<int> ext(s_len, blank);
  for (size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  auto lp = log_probs.values();
  auto emit = [&](int64_t t, int64_t s) { return lp[t * classes + ext[s]]; };
  auto can_skip = [&](int64_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(t_len * s_len, kNegInf), beta(t_len * s_len, kNegInf);
  alpha[0] = emit(0, 0);
  if (s_len > 1) alpha[1] = emit(0, 1);
  for (int64_t t = 1; t < t_len; ++t) {
    for (int64_t s = 0; s < s_len; ++s) {
      double a = alpha[(t - 1) * s_len + s];
      if (s >= 1) a = LogAdd(a, alpha[(t - 1) * s_len + s - 1]);
      if (can_skip(s)) a = LogAdd(a, alpha[(t - 1) * s_len + s - 2]);
      alpha[t * s_len + s] = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  const int64_t last = (t_len - 1) * s_len;
  double log_total = alpha[last + s_len - 1];
  if (s_len > 1) log_total = LogAdd(log_total, alpha[last + s_len - 2]);
  SOA_REQUIRE(log_total != kNegInf, InfeasibleTargetError,
              "CTC target has zero probability under log_probs");

  return ad::MakeResult(
      "ctc_loss", {}, {-log_total}, {log_probs},
      [t_len, s_len, classes, ext = std::move(ext), alpha = std::move(alpha),
       beta = std::move(beta), log_total, blank](ad::Node& self) mutable {
        const auto& lpv = self.inputs[0]->value;
        auto emit_b = [&](int64_t t, int64_t s) { return lpv[t * classes + ext[s]]; };
        auto skip_from = [&](int64_t s) {
          // Transition s -> s+2 allowed when s+2 is a non-blank differing from s.
          return s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s];
        };
        // beta includes the emission at t, like alpha.
        const int64_t last_row = (t_len - 1) * s_len;
        beta[last_row + s_len - 1] = emit_b(t_len - 1, s_len - 1);
        if (s_len > 1) beta[last_row + s_len - 2] = emit_b(t_len - 1, s_len - 2);
        for (int64_t t = t_len - 2; t >= 0; --t) {
          for (int64_t s = 0; s < s_len; ++s) {
            double b = beta[(t + 1) * s_len + s];
            if (s + 1 < s_len) b = LogAdd(b, beta[(t + 1) * s_len + s + 1]);
            if (skip_from(s)) b = LogAdd(b, beta[(t + 1) * s_len + s + 2]);
            beta[t * s_len + s] = b == kNegInf ? kNegInf : b + emit_b(t, s);
          }
        }
        auto& g = self.inputs[0]->MutableGrad();
        const double scale = self.grad[0];
        for (int64_t t = 0; t < t_len; ++t) {
          for (int64_t s = 0; s < s_len; ++s) {
            const double ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if (ab == kNegInf) continue;
            // alpha*beta counts the emission at t twice.
            g[t * classes + ext[s]] -= scale * std::exp(ab - emit_b(t, s) - log_total);
          }
        }
      });
}

double CtcBruteForce(const Tensor& log_probs, std::span<const int> labels, int blank) {
  SOA_REQUIRE(log_probs.rank() == 2, ContractError, "log_probs must be [T x C]");
  const int64_t t_len = log_probs.dim(0), classes = log_probs.dim(1);
  SOA_REQUIRE(t_len <= 8, ContractError, "brute-force CTC refuses T > 8");
  ValidateLabels(labels, classes, blank);
  auto lp = log_probs.values();

  std::vector<int> path(t_len, 0);
  double log_total = kNegInf;
  std::vector<int> collapsed;
  while (true) {
    collapsed.clear();
    int prev = -1;
    double logp = 0.0;
    for (int64_t t = 0; t < t_len; ++t) {
      logp += lp[t * classes + path[t]];
      if (path[t] != prev && path[t] != blank) collapsed.push_back(path[t]);
      prev = path[t];
    }
    if (std::equal(collapsed.begin(), collapsed.end(), labels.begin(), labels.end()))
      log_total = LogAdd(log_total, logp);
    // Odometer increment.
    int64_t t = t_len - 1;
    while (t >= 0 && ++path[t] == classes) path[t--] = 0;
    if (t < 0) break;
  }
  return log_total == kNegInf ? std::numeric_limits<double>::infinity() : -log_total;
}

PretrainLossTerms PretrainLoss(const model::Model& model, std::span<const float> waveform,
                               const PretrainSettings& settings, uint64_t seed) {
  const model::ModelConfig& cfg = model.config();
  Tensor z = model.FeatureEncode(waveform);
  const int64_t frames = z.dim(0);
  MaskPlan plan = SampleMask(frames, settings.mask_prob,
                             std::min(settings.mask_span, frames), seed);
  const std::vector<int64_t> positions = plan.masked_positions();
  SOA_REQUIRE(positions.size() >= 2, DataContractError,
              "utterance too short for the contrastive loss");

  Rng noise_rng(DeriveSeed(seed, "gumbel"));
  const int64_t gv = cfg.codebook_groups * cfg.codebook_entries;
  std::vector<double> noise(frames * gv);
  for (double& v : noise) v = noise_rng.Gumbel();
  Tensor gumbel = Tensor::Constant({frames, gv}, std::move(noise));

  model::QuantizerOutput q =
      model.Quantize(z, settings.gumbel_temperature, settings.hard_quantizer, &gumbel);
  Tensor c = model.ContextEncode(z, plan.mask);

  ContrastiveBatch batch;
  batch.contexts = model.ProjectContext(ad::GatherRows(c, positions));
  batch.targets = model.ProjectQuantized(ad::GatherRows(q.quantized, positions));
  batch.distractors = SampleDistractors(static_cast<int64_t>(positions.size()),
                                        settings.num_distractors, seed);
  batch.temperature = settings.logit_temperature;

  PretrainLossTerms terms;
  terms.contrastive = ContrastiveLoss(batch);
  terms.diversity = DiversityLoss(q.avg_code_probs);
  terms.total = ad::Add(terms.contrastive, ad::Scale(terms.diversity, settings.diversity_weight));
  terms.num_masked = static_cast<int64_t>(positions.size());
  return terms;
}

Tensor FinetuneLoss(const model::Model& model, std::span<const float> waveform,
                    std::span<const int> tokens) {
  Tensor log_probs = model.Recognize(waveform);
  const std::vector<int> classes = TokensToClasses(tokens);
  return CtcLoss(log_probs, classes);
}

std::vector<int> TokensToClasses(std::span<const int> tokens) {
  std::vector<int> out(tokens.begin(), tokens.end());
  for (int& t : out) t += 1;
  return out;
}

std::vector<int> ClassesToTokens(std::span<const int> classes) {
  std::vector<int> out;
  for (int c : classes)
    if (c != model::kBlank) out.push_back(c - 1);
  return out;
}

}  // namespace soa::objectives
