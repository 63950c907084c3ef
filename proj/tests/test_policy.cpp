#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace cprl;
using cprl::testing::query;
using cprl::testing::vocab;

namespace {

std::vector<int> random_context(const PolicyShape& s, std::size_t len, Rng& rng) {
  std::vector<int> c(len);
  for (auto& v : c) v = static_cast<int>(uniform_index(rng, s.outputs - 1));
  c[uniform_index(rng, len)] = static_cast<int>(s.mask_symbol());
  return c;
}

std::vector<int> random_stream(const PolicyShape& s, std::size_t len, Rng& rng) {
  std::vector<int> t(len);
  for (auto& v : t) v = static_cast<int>(uniform_index(rng, s.outputs));
  return t;
}

// Hidden states recomputed from the flat parameter layout
// [E | Wx | Wq | Wh | b | Wo | bo].
std::vector<std::vector<double>> hidden_states(const Policy& p, std::span<const int> context,
                                               std::span<const int> stream) {
  const auto& s = p.shape();
  const auto w = p.parameters();
  const std::size_t d = s.embed, h = s.hidden;
  const std::size_t oE = 0, oWx = s.symbols() * d, oWq = oWx + h * d, oWh = oWq + h * d, oB = oWh + h * h;
  std::vector<double> q(d, 0.0);
  for (int c : context)
    for (std::size_t e = 0; e < d; ++e) q[e] += w[oE + static_cast<std::size_t>(c) * d + e] / context.size();
  std::vector<std::vector<double>> out;
  std::vector<double> prev(h, 0.0);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const std::size_t x = i == 0 ? s.begin_symbol() : static_cast<std::size_t>(stream[i - 1]);
    std::vector<double> cur(h);
    for (std::size_t k = 0; k < h; ++k) {
      double a = w[oB + k];
      for (std::size_t v = 0; v < h; ++v) a += w[oWh + k * h + v] * prev[v];
      for (std::size_t e = 0; e < d; ++e) a += w[oWx + k * d + e] * w[oE + x * d + e];
      for (std::size_t e = 0; e < d; ++e) a += w[oWq + k * d + e] * q[e];
      cur[k] = std::tanh(a);
    }
    out.push_back(cur);
    prev = cur;
  }
  return out;
}

}  // namespace

TEST(Policy, DegenerateVocabularyHasZeroNll) {
  const auto p = Policy::random(PolicyShape{1, 4, 5}, 1);
  const std::vector<int> ctx{1, 1};
  for (std::size_t len : {1u, 3u, 9u}) EXPECT_EQ(p.nll(ctx, std::vector<int>(len, 0)), 0.0);
}

TEST(Policy, ZeroedHeadIsUniform) {
  auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 2);
  p.zero_output_head();
  Rng rng = make_rng(3);
  for (std::size_t len = 1; len <= 12; ++len) {
    const auto ctx = random_context(p.shape(), 7, rng);
    const auto stream = random_stream(p.shape(), len, rng);
    EXPECT_NEAR(p.nll(ctx, stream), static_cast<double>(len) * std::log(21.0), 1e-12);
  }
}

TEST(Policy, DistributionsNormalised) {
  const auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 4);
  Rng rng = make_rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ctx = random_context(p.shape(), 6 + uniform_index(rng, 7), rng);
    const auto stream = random_stream(p.shape(), 1 + uniform_index(rng, 15), rng);
    for (const auto& dist : p.step_distributions(ctx, stream)) {
      double sum = 0.0;
      for (double v : dist) {
        EXPECT_GT(v, 0.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Policy, SampledLikelihoodMatchesRescoring) {
  const auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 6);
  Rng rng = make_rng(7);
  const auto qs = make_queries(vocab(), 100, {6, 7, 8, 9, 10, 11, 12}, 4, 8);
  for (const auto& q : qs) {
    const auto s = sample(p, vocab(), q, rng);
    EXPECT_EQ(s.proposal.slot_fills.size(), q.masked_count());
    EXPECT_EQ(flatten_fills(s.proposal), s.trace);
    EXPECT_NEAR(-nll(p, vocab(), q, s.proposal), s.log_likelihood, 1e-9);
  }
}

TEST(Policy, SamplingDeterministicAndCapped) {
  const auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 6);
  const auto q = query("AC??GH?");
  Rng a = make_rng(1), b = make_rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto sa = sample(p, vocab(), q, a);
    const auto sb = sample(p, vocab(), q, b);
    EXPECT_EQ(sa.proposal, sb.proposal);
    EXPECT_EQ(sa.log_likelihood, sb.log_likelihood);
    EXPECT_EQ(sa.proposal.slot_fills.size(), 3u);
    for (const auto& f : sa.proposal.slot_fills) {
      EXPECT_LE(f.size(), kMaxFillLength + 1);
      if (f.size() < kMaxFillLength + 1) EXPECT_EQ(f.back(), vocab().end_token());
    }
  }
}

TEST(Policy, UniformFillValidityMatchesSimulation) {
  auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 9);
  p.zero_output_head();
  const auto q = query("A?D?GK");
  const int n = 40000;
  Rng rng = make_rng(10);
  int valid = 0;
  for (int i = 0; i < n; ++i) valid += assemble(vocab(), q, sample(p, vocab(), q, rng).proposal).valid();

  // independent simulation: 21 equally likely outputs, index 20 ends a slot,
  // at most 5 draws per slot, a slot is good when it ends after 1 to 4 residues
  std::mt19937 gen(12345);
  std::uniform_int_distribution<int> tok(0, 20);
  int sim_valid = 0;
  for (int i = 0; i < n; ++i) {
    bool ok = true;
    for (int slot = 0; slot < 2; ++slot) {
      int residues = 0;
      bool ended = false;
      for (int k = 0; k < 5 && !ended; ++k) {
        if (tok(gen) == 20) ended = true;
        else ++residues;
      }
      ok = ok && ended && residues >= 1 && residues <= 4;
    }
    sim_valid += ok;
  }
  const double frac = static_cast<double>(valid) / n, sim = static_cast<double>(sim_valid) / n;
  EXPECT_NEAR(frac, sim, 0.02);
  // closed form as a sanity anchor
  double slot = 0.0;
  for (int k = 1; k <= 4; ++k) slot += std::pow(20.0 / 21.0, k) / 21.0;
  EXPECT_NEAR(sim, slot * slot, 0.01);
}

TEST(Policy, ZeroScaleGivesZeroGradient) {
  const auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 11);
  const auto q = query("AC?GH");
  FillProposal f{{{1, 2, 20}}};
  for (double g : gradient(p, vocab(), q, f, 0.0)) EXPECT_EQ(g, 0.0);
}

TEST(Policy, GradientMatchesFiniteDifferences) {
  auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 12);
  Rng rng = make_rng(13);
  // nonzero output biases so that every block is exercised away from symmetry
  for (std::size_t k = 0; k < p.shape().outputs; ++k) p.parameters()[p.output_bias_index(k)] = 0.3 * normal01(rng);
  const auto ctx = random_context(p.shape(), 8, rng);
  const auto stream = random_stream(p.shape(), 9, rng);
  const double scale = 0.7;
  const auto g = p.gradient(ctx, stream, scale);
  const double h = 1e-4;
  int probes = 0, checked = 0;
  double worst = 0.0;
  while (probes < 300) {
    const std::size_t i = uniform_index(rng, p.parameter_count());
    ++probes;
    const double orig = p.parameters()[i];
    p.parameters()[i] = orig + h;
    const double up = scale * p.nll(ctx, stream);
    p.parameters()[i] = orig - h;
    const double down = scale * p.nll(ctx, stream);
    p.parameters()[i] = orig;
    const double fd = (up - down) / (2 * h);
    if (g[i] == 0.0 && std::fabs(fd) < 1e-10) continue;  // parameter not on the computation path
    ++checked;
    const double rel = std::fabs(fd - g[i]) / std::max(std::fabs(fd), std::fabs(g[i]));
    worst = std::max(worst, rel);
    EXPECT_LE(rel, 1e-4) << "param " << i << " analytic " << g[i] << " fd " << fd;
  }
  EXPECT_GE(checked, 100);
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Policy, UniformHeadGradientIsSoftmaxMinusOnehot) {
  auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 14);
  p.zero_output_head();
  Rng rng = make_rng(15);
  const auto ctx = random_context(p.shape(), 7, rng);
  const auto stream = random_stream(p.shape(), 6, rng);
  const auto g = p.gradient(ctx, stream, 1.0);
  const auto hs = hidden_states(p, ctx, stream);
  const double inv_v = 1.0 / 21.0;
  for (std::size_t k = 0; k < 21; ++k) {
    double bias = 0.0;
    for (int t : stream) bias += inv_v - (static_cast<std::size_t>(t) == k ? 1.0 : 0.0);
    EXPECT_NEAR(g[p.output_bias_index(k)], bias, 1e-12);
    for (std::size_t u = 0; u < p.shape().hidden; ++u) {
      double w = 0.0;
      for (std::size_t i = 0; i < stream.size(); ++i)
        w += (inv_v - (static_cast<std::size_t>(stream[i]) == k ? 1.0 : 0.0)) * hs[i][u];
      EXPECT_NEAR(g[p.output_weight_index(k, u)], w, 1e-12);
    }
  }
}

TEST(Pretrain, SingleExampleOverfits) {
  PretrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 1;
  cfg.learning_rate = 0.1;
  cfg.validation_queries = 0;
  cfg.seed = 3;
  const auto corpus = make_pretraining_corpus(vocab(), 1, {8}, 4);
  const auto res = pretrain_prior(vocab(), corpus, cfg);
  EXPECT_LT(nll(res.policy, vocab(), corpus[0].query, corpus[0].fills), 0.1);
}

TEST(Pretrain, SmoothedNllDecreases) {
  PretrainConfig cfg;
  cfg.epochs = 40;
  cfg.validation_queries = 0;
  cfg.seed = 5;
  const auto corpus = make_pretraining_corpus(vocab(), 400, pretraining_lengths(), 6);
  const auto res = pretrain_prior(vocab(), corpus, cfg);
  ASSERT_EQ(res.epoch_nll.size(), 40u);
  std::vector<double> smooth;
  for (std::size_t i = 9; i < res.epoch_nll.size(); ++i) {
    double s = 0;
    for (std::size_t k = i - 9; k <= i; ++k) s += res.epoch_nll[k];
    smooth.push_back(s / 10.0);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LT(smooth[i], smooth[i - 1]) << "window " << i;
}

TEST(Pretrain, DeterministicAndGated) {
  PretrainConfig cfg;
  cfg.epochs = 3;
  cfg.validation_queries = 0;
  cfg.seed = 8;
  const auto corpus = make_pretraining_corpus(vocab(), 200, pretraining_lengths(), 9);
  EXPECT_EQ(pretrain_prior(vocab(), corpus, cfg).policy, pretrain_prior(vocab(), corpus, cfg).policy);
  cfg.epochs = 1;
  cfg.learning_rate = 1e-6;
  cfg.validation_queries = 200;
  EXPECT_THROW(pretrain_prior(vocab(), corpus, cfg), std::runtime_error);
  EXPECT_THROW(pretrain_prior(vocab(), {}, cfg), std::invalid_argument);
}

TEST(Pretrain, SharedPriorPassesGate) {
  const auto& prior = cprl::testing::prior();
  const auto qs = make_queries(vocab(), 500, {6, 7, 8, 9, 10, 11, 12}, 4, 77);
  Rng rng = make_rng(78);
  EXPECT_GE(fill_validity(prior, vocab(), qs, rng), 0.9);
}

TEST(Policy, SerializationRoundTrip) {
  const auto p = Policy::random(PolicyShape::for_vocabulary(vocab()), 16);
  const nlohmann::json j = p;
  const auto back = nlohmann::json::parse(j.dump()).get<Policy>();
  EXPECT_EQ(back, p);
  nlohmann::json bad = j;
  bad["parameters"].erase(0);
  EXPECT_THROW(bad.get<Policy>(), std::runtime_error);
}
