#pragma once

// Autoregressive fill policy: a single tanh recurrence conditioned on the mean
// embedding of the query template, with a softmax head over residues plus the
// slot terminator. Forward, sampling and backpropagation through time are
// written out by hand; all parameters live in one flat vector.
//
//   q   = mean_j E[c_j]                        (context symbols, mask included)
//   h_i = tanh(Wh h_{i-1} + Wx E[x_i] + Wq q + b),   h_0 = 0
//   p_i = softmax(Wo h_i + bo)
//
// x_1 is the begin symbol and x_i = t_{i-1} afterwards.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "cprl/random.hpp"
#include "cprl/surrogate.hpp"

namespace cprl {

struct PolicyShape {
  std::size_t outputs = 21;  // emitted tokens; the last one terminates a slot
  std::size_t embed = 16;
  std::size_t hidden = 32;

  std::size_t symbols() const { return outputs + 2; }  // + mask, begin
  std::size_t mask_symbol() const { return outputs; }
  std::size_t begin_symbol() const { return outputs + 1; }
  std::size_t end_token() const { return outputs - 1; }
  bool operator==(const PolicyShape&) const = default;

  static PolicyShape for_vocabulary(const Vocabulary& v) { return {v.output_size(), 16, 32}; }
};

struct SampledProposal {
  FillProposal proposal;
  double log_likelihood = 0.0;
  std::vector<int> trace;  // the emitted token stream, all slots in order
};

class Policy {
 public:
  Policy() : Policy(PolicyShape{}) {}
  explicit Policy(PolicyShape shape) : shape_(shape) {
    if (shape_.outputs < 1 || shape_.embed < 1 || shape_.hidden < 1)
      throw std::invalid_argument("policy: dimensions must be positive");
    layout();
    params_.assign(total_, 0.0);
  }

  /// Gaussian initialisation scaled by fan-in; biases start at zero.
  static Policy random(PolicyShape shape, std::uint64_t seed) {
    Policy p(shape);
    Rng rng = make_rng(seed, 21);
    auto fill = [&](std::size_t off, std::size_t count, double scale) {
      for (std::size_t i = 0; i < count; ++i) p.params_[off + i] = scale * normal01(rng);
    };
    const auto d = shape.embed, h = shape.hidden;
    fill(p.off_embed_, shape.symbols() * d, 0.5);
    fill(p.off_wx_, h * d, 1.0 / std::sqrt(static_cast<double>(d)));
    fill(p.off_wq_, h * d, 1.0 / std::sqrt(static_cast<double>(d)));
    fill(p.off_wh_, h * h, 0.5 / std::sqrt(static_cast<double>(h)));
    fill(p.off_wo_, shape.outputs * h, 1.0 / std::sqrt(static_cast<double>(h)));
    return p;
  }

  const PolicyShape& shape() const { return shape_; }
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }
  std::size_t parameter_count() const { return total_; }

  /// Zeroes the output head, which makes every step uniform over the outputs.
  void zero_output_head() {
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(off_wo_), params_.end(), 0.0);
  }

  std::size_t output_weight_index(std::size_t token, std::size_t unit) const {
    return off_wo_ + token * shape_.hidden + unit;
  }
  std::size_t output_bias_index(std::size_t token) const { return off_bo_ + token; }

  /// Per-step output distributions for a given stream (teacher forcing).
  std::vector<std::vector<double>> step_distributions(std::span<const int> context,
                                                     std::span<const int> stream) const {
    Forward f = forward(context, stream);
    return std::move(f.probs);
  }

  /// -sum_i log P(t_i | t_<i, context).
  double nll(std::span<const int> context, std::span<const int> stream) const {
    return forward(context, stream).nll;
  }

  /// Adds scale * d NLL / d params into `grad` and returns the NLL.
  double accumulate_gradient(std::span<const int> context, std::span<const int> stream, double scale,
                             std::span<double> grad) const {
    if (grad.size() != total_) throw std::invalid_argument("policy: gradient buffer has the wrong size");
    Forward f = forward(context, stream);
    if (scale == 0.0 || stream.empty()) return f.nll;
    const auto d = shape_.embed, hd = shape_.hidden, no = shape_.outputs;
    const double* wo = &params_[off_wo_];
    const double* wh = &params_[off_wh_];
    const double* wx = &params_[off_wx_];
    const double* wq = &params_[off_wq_];
    const double* emb = &params_[off_embed_];
    std::vector<double> dh(hd, 0.0), dh_prev(hd), da(hd), du(hd, 0.0), dz(no);
    for (std::size_t i = stream.size(); i-- > 0;) {
      const auto& p = f.probs[i];
      const double* h = &f.states[(i + 1) * hd];
      const double* h_prev = &f.states[i * hd];
      for (std::size_t k = 0; k < no; ++k) dz[k] = scale * p[k];
      dz[static_cast<std::size_t>(stream[i])] -= scale;
      for (std::size_t k = 0; k < no; ++k) {
        grad[off_bo_ + k] += dz[k];
        double* gwo = &grad[off_wo_ + k * hd];
        const double* wrow = wo + k * hd;
        for (std::size_t u = 0; u < hd; ++u) {
          gwo[u] += dz[k] * h[u];
          dh[u] += wrow[u] * dz[k];
        }
      }
      for (std::size_t u = 0; u < hd; ++u) da[u] = dh[u] * (1.0 - h[u] * h[u]);
      const std::size_t x = input_symbol(stream, i);
      const double* ex = emb + x * d;
      double* gex = &grad[off_embed_ + x * d];
      std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
      for (std::size_t u = 0; u < hd; ++u) {
        const double a = da[u];
        if (a == 0.0) continue;
        du[u] += a;
        double* gwh = &grad[off_wh_ + u * hd];
        const double* whrow = wh + u * hd;
        for (std::size_t v = 0; v < hd; ++v) {
          gwh[v] += a * h_prev[v];
          dh_prev[v] += whrow[v] * a;
        }
        double* gwx = &grad[off_wx_ + u * d];
        const double* wxrow = wx + u * d;
        for (std::size_t e = 0; e < d; ++e) {
          gwx[e] += a * ex[e];
          gex[e] += wxrow[e] * a;
        }
      }
      std::swap(dh, dh_prev);
    }
    std::vector<double> dq(d, 0.0);
    for (std::size_t u = 0; u < hd; ++u) {
      grad[off_b_ + u] += du[u];
      double* gwq = &grad[off_wq_ + u * d];
      const double* wqrow = wq + u * d;
      for (std::size_t e = 0; e < d; ++e) {
        gwq[e] += du[u] * f.query[e];
        dq[e] += wqrow[e] * du[u];
      }
    }
    if (!context.empty()) {
      const double inv = 1.0 / static_cast<double>(context.size());
      for (int c : context) {
        double* gc = &grad[off_embed_ + static_cast<std::size_t>(c) * d];
        for (std::size_t e = 0; e < d; ++e) gc[e] += dq[e] * inv;
      }
    }
    return f.nll;
  }

  std::vector<double> gradient(std::span<const int> context, std::span<const int> stream, double scale) const {
    std::vector<double> g(total_, 0.0);
    accumulate_gradient(context, stream, scale, g);
    return g;
  }

  /// Samples `slots` slot fills. A slot closes when the terminator is drawn or
  /// after `max_tokens_per_slot` emitted tokens; a capped slot carries no
  /// terminator and will not assemble.
  SampledProposal sample(std::span<const int> context, std::size_t slots, Rng& rng,
                         std::size_t max_tokens_per_slot = kMaxFillLength + 1) const {
    check_context(context);
    const auto hd = shape_.hidden, no = shape_.outputs;
    const auto u = context_drive(context).second;
    std::vector<double> h(hd, 0.0), next(hd), probs(no);
    SampledProposal out;
    int prev = static_cast<int>(shape_.begin_symbol());
    for (std::size_t s = 0; s < slots; ++s) {
      std::vector<Token> fill;
      for (std::size_t k = 0; k < max_tokens_per_slot; ++k) {
        step(h, static_cast<std::size_t>(prev), u, next, probs);
        h.swap(next);
        const double r = uniform01(rng);
        std::size_t tok = no - 1;
        double acc = 0.0;
        for (std::size_t j = 0; j < no; ++j) {
          acc += probs[j];
          if (r < acc) {
            tok = j;
            break;
          }
        }
        out.log_likelihood += std::log(probs[tok]);
        out.trace.push_back(static_cast<int>(tok));
        fill.push_back(static_cast<Token>(tok));
        prev = static_cast<int>(tok);
        if (tok == shape_.end_token()) break;
      }
      out.proposal.slot_fills.push_back(std::move(fill));
    }
    return out;
  }

  bool operator==(const Policy& o) const { return shape_ == o.shape_ && params_ == o.params_; }

 private:
  struct Forward {
    std::vector<double> query;
    std::vector<double> states;  // (L + 1) x hidden, row 0 is h_0 = 0
    std::vector<std::vector<double>> probs;
    double nll = 0.0;
  };

  void layout() {
    const auto d = shape_.embed, h = shape_.hidden;
    off_embed_ = 0;
    off_wx_ = off_embed_ + shape_.symbols() * d;
    off_wq_ = off_wx_ + h * d;
    off_wh_ = off_wq_ + h * d;
    off_b_ = off_wh_ + h * h;
    off_wo_ = off_b_ + h;
    off_bo_ = off_wo_ + shape_.outputs * h;
    total_ = off_bo_ + shape_.outputs;
  }

  void check_context(std::span<const int> context) const {
    for (int c : context)
      if (c < 0 || static_cast<std::size_t>(c) >= shape_.symbols())
        throw std::invalid_argument("policy: context symbol out of range");
  }

  std::size_t input_symbol(std::span<const int> stream, std::size_t i) const {
    return i == 0 ? shape_.begin_symbol() : static_cast<std::size_t>(stream[i - 1]);
  }

  // Returns (q, Wq q + b).
  std::pair<std::vector<double>, std::vector<double>> context_drive(std::span<const int> context) const {
    const auto d = shape_.embed, hd = shape_.hidden;
    std::vector<double> q(d, 0.0), u(hd);
    for (int c : context)
      for (std::size_t e = 0; e < d; ++e) q[e] += params_[off_embed_ + static_cast<std::size_t>(c) * d + e];
    if (!context.empty())
      for (auto& v : q) v /= static_cast<double>(context.size());
    for (std::size_t k = 0; k < hd; ++k) {
      double s = params_[off_b_ + k];
      for (std::size_t e = 0; e < d; ++e) s += params_[off_wq_ + k * d + e] * q[e];
      u[k] = s;
    }
    return {std::move(q), std::move(u)};
  }

  void step(std::span<const double> h_prev, std::size_t x, std::span<const double> u, std::span<double> h_out,
            std::span<double> probs) const {
    const auto d = shape_.embed, hd = shape_.hidden, no = shape_.outputs;
    const double* ex = &params_[off_embed_ + x * d];
    for (std::size_t k = 0; k < hd; ++k) {
      double s = u[k];
      const double* whrow = &params_[off_wh_ + k * hd];
      for (std::size_t v = 0; v < hd; ++v) s += whrow[v] * h_prev[v];
      const double* wxrow = &params_[off_wx_ + k * d];
      for (std::size_t e = 0; e < d; ++e) s += wxrow[e] * ex[e];
      h_out[k] = std::tanh(s);
    }
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < no; ++j) {
      double z = params_[off_bo_ + j];
      const double* worow = &params_[off_wo_ + j * hd];
      for (std::size_t k = 0; k < hd; ++k) z += worow[k] * h_out[k];
      probs[j] = z;
      zmax = std::max(zmax, z);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < no; ++j) {
      probs[j] = std::exp(probs[j] - zmax);
      sum += probs[j];
    }
    for (std::size_t j = 0; j < no; ++j) probs[j] /= sum;
  }

  Forward forward(std::span<const int> context, std::span<const int> stream) const {
    check_context(context);
    for (int t : stream)
      if (t < 0 || static_cast<std::size_t>(t) >= shape_.outputs)
        throw std::invalid_argument("policy: stream token out of range");
    const auto hd = shape_.hidden;
    Forward f;
    auto [q, u] = context_drive(context);
    f.query = std::move(q);
    f.states.assign((stream.size() + 1) * hd, 0.0);
    f.probs.assign(stream.size(), std::vector<double>(shape_.outputs));
    for (std::size_t i = 0; i < stream.size(); ++i) {
      std::span<const double> h_prev(&f.states[i * hd], hd);
      std::span<double> h(&f.states[(i + 1) * hd], hd);
      step(h_prev, input_symbol(stream, i), u, h, f.probs[i]);
      f.nll -= std::log(f.probs[i][static_cast<std::size_t>(stream[i])]);
    }
    return f;
  }

  PolicyShape shape_;
  std::vector<double> params_;
  std::size_t off_embed_ = 0, off_wx_ = 0, off_wq_ = 0, off_wh_ = 0, off_b_ = 0, off_wo_ = 0, off_bo_ = 0,
              total_ = 0;

  friend void from_json(const nlohmann::json& j, Policy& p);
};

inline void to_json(nlohmann::json& j, const Policy& p) {
  j = nlohmann::json{{"format", "cprl-policy/1"},
                     {"outputs", p.shape().outputs},
                     {"embed", p.shape().embed},
                     {"hidden", p.shape().hidden},
                     {"parameters", std::vector<double>(p.parameters().begin(), p.parameters().end())}};
}

inline void from_json(const nlohmann::json& j, Policy& p) {
  if (j.value("format", "") != "cprl-policy/1") throw std::runtime_error("policy dump: unrecognised format");
  Policy out(PolicyShape{j.at("outputs").get<std::size_t>(), j.at("embed").get<std::size_t>(),
                         j.at("hidden").get<std::size_t>()});
  auto params = j.at("parameters").get<std::vector<double>>();
  if (params.size() != out.parameter_count()) throw std::runtime_error("policy dump: parameter count mismatch");
  out.params_ = std::move(params);
  p = std::move(out);
}

// ---------------------------------------------------------------------------
// Query-level wrappers

/// Template symbols as policy context ids; masked slots use the mask symbol.
inline std::vector<int> encode_context(const Vocabulary& vocab, const QueryTemplate& q) {
  std::vector<int> out;
  out.reserve(q.length());
  for (const auto& p : q.positions) out.push_back(p ? static_cast<int>(*p) : static_cast<int>(vocab.mask_token()));
  return out;
}

inline std::vector<int> flatten_fills(const FillProposal& proposal) {
  std::vector<int> out;
  for (const auto& fill : proposal.slot_fills)
    for (Token t : fill) out.push_back(static_cast<int>(t));
  return out;
}

inline double nll(const Policy& policy, const Vocabulary& vocab, const QueryTemplate& q, const FillProposal& proposal) {
  return policy.nll(encode_context(vocab, q), flatten_fills(proposal));
}

inline SampledProposal sample(const Policy& policy, const Vocabulary& vocab, const QueryTemplate& q, Rng& rng,
                              std::size_t max_tokens_per_slot = kMaxFillLength + 1) {
  return policy.sample(encode_context(vocab, q), q.masked_count(), rng, max_tokens_per_slot);
}

/// Gradient of upstream_scale * NLL with respect to the policy parameters.
inline std::vector<double> gradient(const Policy& policy, const Vocabulary& vocab, const QueryTemplate& q,
                                    const FillProposal& proposal, double upstream_scale) {
  return policy.gradient(encode_context(vocab, q), flatten_fills(proposal), upstream_scale);
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainExample {
  QueryTemplate query;
  FillProposal fills;  // ground truth, each slot terminated
};

/// Masks 1-4 slots of random sequences; a slot covers two consecutive
/// residues with probability `pair_rate`, otherwise one.
inline std::vector<PretrainExample> make_pretraining_corpus(const Vocabulary& vocab, std::size_t n,
                                                            const std::vector<std::size_t>& lengths,
                                                            std::uint64_t seed, double pair_rate = 0.3) {
  if (lengths.empty()) throw std::invalid_argument("pretraining corpus: no lengths");
  Rng rng = make_rng(seed, 31);
  std::vector<PretrainExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = lengths[uniform_index(rng, lengths.size())];
    if (len < 2) throw std::invalid_argument("pretraining corpus: lengths must be >= 2");
    const auto seq = random_sequence(vocab, len, rng);
    const std::size_t slots = 1 + uniform_index(rng, std::min<std::size_t>(kMaxMasked, len - 1));
    std::vector<std::size_t> idx(len);
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::size_t> starts(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(slots));
    std::sort(starts.begin(), starts.end());
    std::vector<bool> covered(len, false);
    for (auto s : starts) covered[s] = true;
    std::size_t n_covered = slots;
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (auto s : starts) {
      std::size_t span = 1;
      const bool extend = uniform01(rng) < pair_rate;
      if (extend && s + 1 < len && !covered[s + 1] && n_covered + 1 < len) {
        covered[s + 1] = true;
        ++n_covered;
        span = 2;
      }
      spans.emplace_back(s, span);
    }
    auto [q, fills] = mask_spans(vocab, seq, spans);
    out.push_back({std::move(q), std::move(fills)});
  }
  return out;
}

struct PretrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 0.05;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double validity_gate = 0.9;
  std::size_t validation_queries = 300;
};

struct PretrainResult {
  Policy policy;
  std::vector<double> epoch_nll;  // mean per-example NLL after each epoch's updates
  double fill_validity = 0.0;     // on held-out queries
};

/// Fraction of sampled proposals that assemble, one sample per query.
inline double fill_validity(const Policy& policy, const Vocabulary& vocab, std::span<const QueryTemplate> queries,
                            Rng& rng) {
  if (queries.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& q : queries)
    if (assemble(vocab, q, sample(policy, vocab, q, rng).proposal).valid()) ++ok;
  return static_cast<double>(ok) / static_cast<double>(queries.size());
}

/// Minibatch SGD on mean NLL over the corpus. Throws if the held-out fill
/// validity stays below the gate.
inline PretrainResult pretrain_prior(const Vocabulary& vocab, std::span<const PretrainExample> corpus,
                                     const PretrainConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("pretrain: corpus is empty");
  if (cfg.batch_size < 1) throw std::invalid_argument("pretrain: batch size must be >= 1");
  PretrainResult res{Policy::random(PolicyShape::for_vocabulary(vocab), cfg.seed), {}, 0.0};
  Policy& policy = res.policy;
  std::vector<std::vector<int>> contexts, streams;
  for (const auto& ex : corpus) {
    contexts.push_back(encode_context(vocab, ex.query));
    streams.push_back(flatten_fills(ex.fills));
  }
  Rng rng = make_rng(cfg.seed, 41);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad(policy.parameter_count());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = start; k < end; ++k)
        policy.accumulate_gradient(contexts[order[k]], streams[order[k]], scale, grad);
      auto p = policy.parameters();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.learning_rate * grad[i];
    }
    double total = 0.0;
    for (std::size_t k = 0; k < corpus.size(); ++k) total += policy.nll(contexts[k], streams[k]);
    res.epoch_nll.push_back(total / static_cast<double>(corpus.size()));
  }
  if (cfg.validation_queries > 0) {
    std::vector<std::size_t> lengths;
    for (std::size_t len = 6; len <= 12; ++len) lengths.push_back(len);
    const auto held_out = make_queries(vocab, cfg.validation_queries, lengths, kMaxMasked, derive_seed(cfg.seed, 51));
    Rng vrng = make_rng(cfg.seed, 52);
    res.fill_validity = fill_validity(policy, vocab, held_out, vrng);
    if (res.fill_validity < cfg.validity_gate)
      throw std::runtime_error("pretrain: held-out fill validity " + std::to_string(res.fill_validity) +
                               " is below the gate");
  }
  return res;
}

}  // namespace cprl
