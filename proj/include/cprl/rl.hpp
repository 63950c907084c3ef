#pragma once

// Augmented-likelihood policy update: sample a batch from the agent, score the
// assembled sequences, regress the agent log-likelihood onto the augmented
// prior log-likelihood log P_prior + sigma * S with a squared loss, and take
// one SGD step.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cprl/conformal.hpp"
#include "cprl/policy.hpp"
#include "cprl/scoring.hpp"
#include "cprl/surrogate.hpp"

namespace cprl {

inline constexpr double kDefaultSigma = 50.0;

struct RLConfig {
  double sigma = kDefaultSigma;
  std::size_t batch_size = 32;
  std::size_t steps = 350;
  double significance = kDefaultSignificance;
  ScoringKind scoring = ScoringKind::rm_p1;
  std::uint64_t seed = 0;
  double learning_rate = 1e-3;

  void validate() const {
    if (!(sigma > 0.0)) throw std::invalid_argument("rl: sigma must be > 0");
    if (batch_size < 1) throw std::invalid_argument("rl: batch_size must be >= 1");
    if (steps < 1) throw std::invalid_argument("rl: steps must be >= 1");
    if (!(significance > 0.0 && significance < 1.0))
      throw std::invalid_argument("rl: significance must be in (0, 1)");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("rl: learning_rate must be > 0");
  }
};

inline double augmented_log_likelihood(double log_p_prior, double score, double sigma) {
  return log_p_prior + sigma * score;
}

inline double squared_loss(double log_p_aug, double log_p_agent) {
  const double d = log_p_aug - log_p_agent;
  return d * d;
}

/// Everything known about one assembled sequence. p-values and the raw
/// probability are computed for every scoring kind.
struct Evaluation {
  double score = 0.0;
  double raw_p1 = 0.0;
  PValuePair pv;
  bool confident_permeable = false;
};

template <class S>
concept SequenceScorer = requires(const S& s, const TokenSequence& seq) {
  { s.evaluate(seq) } -> std::convertible_to<Evaluation>;
};

template <ProbabilisticClassifier Clf, class Conformal>
class ModelScorer {
 public:
  ModelScorer(ScoringKind kind, const Clf& classifier, const Conformal& acp,
              double significance = kDefaultSignificance)
      : kind_(kind), classifier_(&classifier), acp_(&acp), significance_(significance) {}

  Evaluation evaluate(const TokenSequence& seq) const {
    const auto fp = fingerprint(seq);
    Evaluation e;
    e.raw_p1 = classifier_->predict_probability(fp);
    e.pv = acp_->p_values(fp);
    e.confident_permeable = is_confident_permeable(e.pv, significance_);
    e.score = apply_scoring(kind_, e.raw_p1, e.pv, significance_);
    return e;
  }

  ScoringKind kind() const { return kind_; }

 private:
  ScoringKind kind_;
  const Clf* classifier_;
  const Conformal* acp_;
  double significance_;
};

struct StepMetrics {
  std::size_t step = 0;
  double avg_score = 0.0;  // averages are over the unique valid batch members
  double avg_p0 = 0.0;
  double avg_p1 = 0.0;
  double avg_raw_p1 = 0.0;
  double frac_conf_eff = 0.0;
  std::size_t n_sampled = 0;
  std::size_t n_valid = 0;
  std::size_t n_unique_valid = 0;
  double loss = 0.0;
  bool operator==(const StepMetrics&) const = default;
};

struct BatchMember {
  SampledProposal sampled;
  std::optional<TokenSequence> sequence;
  Evaluation evaluation;  // zero score for invalid members
  double prior_log_likelihood = 0.0;
};

struct StepResult {
  StepMetrics metrics;
  std::vector<BatchMember> batch;
};

/// One update of `agent`. Invalid proposals score 0 and still enter the loss.
template <SequenceScorer Scorer>
StepResult rl_step(Policy& agent, const Policy& prior, const Vocabulary& vocab, const QueryTemplate& query,
                   const Scorer& scorer, const RLConfig& cfg, Rng& rng, std::size_t step_index = 0) {
  const auto context = encode_context(vocab, query);
  StepResult res;
  res.metrics.step = step_index;
  res.metrics.n_sampled = cfg.batch_size;
  res.batch.reserve(cfg.batch_size);
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    BatchMember m;
    m.sampled = agent.sample(context, query.masked_count(), rng);
    m.prior_log_likelihood = -prior.nll(context, m.sampled.trace);
    auto assembled = assemble(vocab, query, m.sampled.proposal);
    if (assembled.valid()) {
      m.sequence = std::move(assembled.sequence);
      m.evaluation = scorer.evaluate(*m.sequence);
    }
    res.batch.push_back(std::move(m));
  }

  std::vector<double> grad(agent.parameter_count(), 0.0);
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  double loss = 0.0;
  for (const auto& m : res.batch) {
    const double target = augmented_log_likelihood(m.prior_log_likelihood, m.evaluation.score, cfg.sigma);
    const double log_p_agent = m.sampled.log_likelihood;
    loss += squared_loss(target, log_p_agent) * inv_batch;
    // d/dtheta (target + NLL)^2 = 2 (target - log p_agent) dNLL/dtheta
    agent.accumulate_gradient(context, m.sampled.trace, 2.0 * (target - log_p_agent) * inv_batch, grad);
  }
  if (!std::isfinite(loss)) throw std::runtime_error("rl: non-finite loss");
  auto params = agent.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.learning_rate * grad[i];
  res.metrics.loss = loss;

  std::set<TokenSequence> unique;
  for (const auto& m : res.batch) {
    if (!m.sequence) continue;
    ++res.metrics.n_valid;
    if (!unique.insert(*m.sequence).second) continue;
    res.metrics.avg_score += m.evaluation.score;
    res.metrics.avg_p0 += m.evaluation.pv.p0;
    res.metrics.avg_p1 += m.evaluation.pv.p1;
    res.metrics.avg_raw_p1 += m.evaluation.raw_p1;
    res.metrics.frac_conf_eff += m.evaluation.confident_permeable ? 1.0 : 0.0;
  }
  res.metrics.n_unique_valid = unique.size();
  if (!unique.empty()) {
    const double n = static_cast<double>(unique.size());
    res.metrics.avg_score /= n;
    res.metrics.avg_p0 /= n;
    res.metrics.avg_p1 /= n;
    res.metrics.avg_raw_p1 /= n;
    res.metrics.frac_conf_eff /= n;
  }
  return res;
}

struct SequenceRecord {
  std::size_t first_step = 0;
  bool confident_permeable = false;
  bool raw_permeable = false;  // raw classifier probability > 0.5
};

struct RunRecord {
  RLConfig config;
  std::vector<StepMetrics> steps;
  std::map<TokenSequence, SequenceRecord> unique_valid;  // cumulative over the run
  std::vector<std::size_t> cumulative_unique_valid;      // size of the set after each step
  std::vector<std::size_t> cumulative_conf_eff;

  std::size_t n_unique_valid() const { return unique_valid.size(); }
  std::size_t n_conf_eff() const {
    std::size_t n = 0;
    for (const auto& [seq, rec] : unique_valid) n += rec.confident_permeable ? 1 : 0;
    return n;
  }
  std::size_t n_raw_permeable() const {
    std::size_t n = 0;
    for (const auto& [seq, rec] : unique_valid) n += rec.raw_permeable ? 1 : 0;
    return n;
  }
};

/// Runs `cfg.steps` updates of a fresh copy of `prior`. The prior is only read.
template <SequenceScorer Scorer>
RunRecord run(const Policy& prior, const Vocabulary& vocab, const QueryTemplate& query, const Scorer& scorer,
              const RLConfig& cfg, Policy* final_agent = nullptr) {
  cfg.validate();
  validate_query(query, vocab);
  Policy agent = prior;
  Rng rng = make_rng(cfg.seed, 61);
  RunRecord rec;
  rec.config = cfg;
  std::size_t conf = 0;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    auto res = rl_step(agent, prior, vocab, query, scorer, cfg, rng, s);
    for (const auto& m : res.batch) {
      if (!m.sequence) continue;
      auto [it, inserted] = rec.unique_valid.try_emplace(
          *m.sequence, SequenceRecord{s, m.evaluation.confident_permeable, m.evaluation.raw_p1 > 0.5});
      if (inserted && it->second.confident_permeable) ++conf;
    }
    rec.steps.push_back(res.metrics);
    rec.cumulative_unique_valid.push_back(rec.unique_valid.size());
    rec.cumulative_conf_eff.push_back(conf);
  }
  if (final_agent) *final_agent = std::move(agent);
  return rec;
}

// ---------------------------------------------------------------------------
// Per-run metrics CSV

inline constexpr const char* kRunCsvHeader =
    "step,scoring_fn,avg_score,avg_p0,avg_p1,frac_conf_eff,n_sampled,n_valid,n_unique_valid,loss";

namespace detail {
inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
}  // namespace detail

inline void write_run_csv(std::ostream& out, const RunRecord& rec) {
  out << kRunCsvHeader << '\n';
  const auto name = scoring_name(rec.config.scoring);
  for (const auto& m : rec.steps) {
    out << m.step << ',' << name << ',' << detail::fixed(m.avg_score) << ',' << detail::fixed(m.avg_p0) << ','
        << detail::fixed(m.avg_p1) << ',' << detail::fixed(m.frac_conf_eff) << ',' << m.n_sampled << ','
        << m.n_valid << ',' << m.n_unique_valid << ',' << detail::fixed(m.loss) << '\n';
  }
}

/// Cumulative unique valid sequences of a run: sequence,first_step,conf_eff,raw_permeable.
inline void write_sequences_csv(std::ostream& out, const Vocabulary& vocab, const RunRecord& rec) {
  out << "sequence,first_step,conf_eff,raw_permeable\n";
  for (const auto& [seq, r] : rec.unique_valid)
    out << to_string(vocab, seq) << ',' << r.first_step << ',' << (r.confident_permeable ? 1 : 0) << ','
        << (r.raw_permeable ? 1 : 0) << '\n';
}

}  // namespace cprl
