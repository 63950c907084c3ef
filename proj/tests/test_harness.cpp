#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace cprl;
using cprl::testing::query;
using cprl::testing::vocab;
namespace fs = std::filesystem;

namespace {

// Two-sided exact p by listing all 2^n sign patterns over the midranks.
double brute_force_p(std::span<const double> a, std::span<const double> b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  std::vector<double> mag(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) mag[i] = std::fabs(d[i]);
  // midranks by counting
  std::vector<double> rank(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    double less = 0, equal = 0;
    for (double m : mag) {
      less += m < mag[i];
      equal += m == mag[i];
    }
    rank[i] = less + (equal + 1) / 2.0;
  }
  double obs = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0) obs += rank[i];
  const std::size_t n = d.size();
  double le = 0, ge = 0;
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    double w = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) w += rank[i];
    le += w <= obs + 1e-9;
    ge += w >= obs - 1e-9;
  }
  const double total = static_cast<double>(1ULL << n);
  return std::min(1.0, 2.0 * std::min(le, ge) / total);
}

fs::path fresh_dir(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const auto p = fs::temp_directory_path() / ("cprl_" + std::string(info->name()) + "_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

StepMetrics step_with(std::size_t s, double frac, std::size_t unique) {
  StepMetrics m;
  m.step = s;
  m.frac_conf_eff = frac;
  m.n_unique_valid = unique;
  return m;
}

// Cheap artifacts: a tiny ACP and the shared prior.
CampaignInputs small_inputs(std::vector<QueryTemplate> queries) {
  const auto pool = make_dataset(vocab(), 600, LengthDistribution::standard(), 0.05, 51).subset(Split::train);
  ClassifierConfig cfg;
  cfg.n_rounds = 15;
  auto clf = fit_boosted_trees(pool, cfg);
  auto acp = build_acp(pool, cfg, 3, 52);
  return {std::move(queries), cprl::testing::prior(), std::move(clf), std::move(acp)};
}

CampaignConfig small_config(const fs::path& out) {
  CampaignConfig c;
  c.rl.steps = 6;
  c.rl.batch_size = 8;
  c.seed = 5;
  c.output_dir = out.string();
  return c;
}

// Synthetic runner: a deterministic record derived from (query, kind, seed).
RunRecord fake_run(const CampaignInputs&, std::size_t q, const RLConfig& cfg) {
  RunRecord r;
  r.config = cfg;
  const auto k = static_cast<std::size_t>(cfg.scoring);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    StepMetrics m = step_with(s, std::min(1.0, 0.1 * static_cast<double>(s + k + q)), 3);
    m.n_sampled = cfg.batch_size;
    m.n_valid = 3;
    r.steps.push_back(m);
  }
  for (std::size_t i = 0; i < 4 + q + 2 * k; ++i) {
    TokenSequence seq;
    seq.tokens = {static_cast<Token>(i % 20), static_cast<Token>(i / 20), static_cast<Token>(q)};
    r.unique_valid[seq] = SequenceRecord{0, i % 2 == 0, false};
  }
  return r;
}

}  // namespace

TEST(Wilcoxon, DegenerateWhenAllDifferencesZero) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6};
  EXPECT_THROW(wilcoxon_signed_rank(a, a), std::domain_error);
}

TEST(Wilcoxon, TooFewPairs) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6}, b{1, 2, 0, 0, 0, 0};
  EXPECT_THROW(wilcoxon_signed_rank(a, b), std::invalid_argument);  // only 4 nonzero
  EXPECT_THROW(wilcoxon_signed_rank(std::vector<double>{1, 2}, std::vector<double>{1}), std::invalid_argument);
}

TEST(Wilcoxon, SixPositiveDifferences) {
  const std::vector<double> a{3, 5, 8, 9, 12, 20}, b{1, 2, 3, 4, 5, 6};
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_TRUE(r.exact);
  EXPECT_EQ(r.n, 6u);
  EXPECT_EQ(r.w_minus, 0.0);
  EXPECT_EQ(r.w_plus, 21.0);
  EXPECT_EQ(r.p_value, 0.03125);
  EXPECT_EQ(r.p_value, brute_force_p(a, b));
}

TEST(Wilcoxon, SymmetricDifferences) {
  const std::vector<double> a{1, -1, 2, -2, 3, -3}, b(6, 0.0);
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_GE(r.p_value, 0.5);
  EXPECT_EQ(r.w_plus, r.w_minus);
  EXPECT_DOUBLE_EQ(r.p_value, brute_force_p(a, b));
}

TEST(Wilcoxon, ExactBranchAgreesWithEnumeration) {
  Rng rng = make_rng(71);
  for (int fixture = 0; fixture < 200; ++fixture) {
    const std::size_t n = 5 + uniform_index(rng, 6);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      // small integer range forces ties in |d|
      a[i] = static_cast<double>(uniform_index(rng, 7));
      b[i] = static_cast<double>(uniform_index(rng, 7));
      if (a[i] == b[i]) a[i] += 1;
    }
    const auto r = wilcoxon_signed_rank(a, b);
    ASSERT_TRUE(r.exact);
    EXPECT_NEAR(r.p_value, brute_force_p(a, b), 1e-12) << "fixture " << fixture;
    EXPECT_DOUBLE_EQ(r.w_plus + r.w_minus, r.n * (r.n + 1) / 2.0);
  }
}

TEST(Wilcoxon, NormalApproximationForLargeSamples) {
  Rng rng = make_rng(72);
  std::vector<double> a(40), b(40);
  for (std::size_t i = 0; i < 40; ++i) {
    a[i] = normal01(rng) + 0.5;
    b[i] = normal01(rng);
  }
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_FALSE(r.exact);
  EXPECT_GT(r.p_value, 0.0);
  EXPECT_LE(r.p_value, 1.0);
  // all positive: z = n(n+1)/4 / sd, two-sided tail of it
  std::vector<double> c(30), zero(30, 0.0);
  for (std::size_t i = 0; i < 30; ++i) c[i] = static_cast<double>(i + 1);
  const auto all = wilcoxon_signed_rank(c, zero);
  const double n = 30, z = (n * (n + 1) / 2 - n * (n + 1) / 4) / std::sqrt(n * (n + 1) * (2 * n + 1) / 24);
  EXPECT_NEAR(all.p_value, std::erfc(z / std::sqrt(2.0)), 1e-12);
  // and n = 20 is still exact
  std::vector<double> d(20), z20(20, 0.0);
  for (std::size_t i = 0; i < 20; ++i) d[i] = (i % 3 == 0 ? -1.0 : 1.0) * static_cast<double>(i + 1);
  EXPECT_TRUE(wilcoxon_signed_rank(d, z20).exact);
}

TEST(Stats, MidranksMedianKs) {
  const std::vector<double> v{3, 1, 3, 2};
  EXPECT_EQ(midranks(v), (std::vector<double>{3.5, 1, 3.5, 2}));
  EXPECT_EQ(median({5, 1, 3}), 3.0);
  EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
  EXPECT_THROW(median({}), std::invalid_argument);
  EXPECT_NEAR(ks_distance_uniform({0.5}), 0.5, 1e-15);
  std::vector<double> grid;
  for (int i = 0; i < 1000; ++i) grid.push_back((i + 0.5) / 1000.0);
  EXPECT_NEAR(ks_distance_uniform(grid), 0.0005, 1e-12);
}

TEST(StepsToThreshold, Examples) {
  std::vector<StepMetrics> run;
  for (std::size_t s = 0; s < 350; ++s) run.push_back(step_with(s, s >= 150 ? 0.5 : 0.3, 10));
  EXPECT_EQ(steps_to_threshold(run), 150u);
  std::vector<StepMetrics> never;
  for (std::size_t s = 0; s < 350; ++s) never.push_back(step_with(s, 0.49, 10));
  EXPECT_EQ(steps_to_threshold(never), std::nullopt);
  std::vector<StepMetrics> late_valid{step_with(0, 0.0, 0), step_with(1, 0.0, 0), step_with(2, 0.0, 4)};
  EXPECT_EQ(steps_to_threshold(late_valid, 0.0), 2u);
  RunRecord rec;
  rec.steps = run;
  EXPECT_EQ(steps_to_threshold(rec), 150u);
}

TEST(Stratify, GroupsByLength) {
  std::vector<SummaryRow> rows;
  for (std::size_t q = 0; q < 5; ++q)
    for (auto k : {ScoringKind::rm_p1, ScoringKind::cp_soft}) rows.push_back({q, q < 3 ? 6u : 7u, k});
  const auto groups = stratify_by_length(rows);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups.at(6).size(), 6u);
  EXPECT_EQ(groups.at(7).size(), 4u);
  EXPECT_FALSE(groups.count(10));
  std::size_t total = 0;
  for (const auto& [len, g] : groups) total += g.size();
  EXPECT_EQ(total, rows.size());
}

TEST(Config, ParsesEveryKey) {
  std::istringstream in(R"(# campaign
queries = q.csv
dataset = d.csv
scoring = rm_p1, cp_soft
output_dir = out
seed = 9
sigma = 25
batch_size = 16
steps = 100
significance = 0.1
learning_rate = 0.002
prior = p.json
classifier = c.json
acp = a.json
dataset_size = 3000
noise_rate = 0.01
acp_members = 5
clf_rounds = 50
clf_learning_rate = 0.2
clf_max_depth = 3
clf_subsample = 0.8
pretrain_examples = 100
pretrain_epochs = 4
pretrain_learning_rate = 0.01
)");
  const auto c = parse_campaign_config(in);
  EXPECT_EQ(c.query_file, "q.csv");
  EXPECT_EQ(c.dataset_file, "d.csv");
  EXPECT_EQ(c.kinds, (std::vector<ScoringKind>{ScoringKind::rm_p1, ScoringKind::cp_soft}));
  EXPECT_EQ(c.output_dir, "out");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.rl.sigma, 25.0);
  EXPECT_EQ(c.rl.batch_size, 16u);
  EXPECT_EQ(c.rl.steps, 100u);
  EXPECT_EQ(c.rl.significance, 0.1);
  EXPECT_EQ(c.rl.learning_rate, 0.002);
  EXPECT_EQ(c.prior_file, "p.json");
  EXPECT_EQ(c.classifier_file, "c.json");
  EXPECT_EQ(c.acp_file, "a.json");
  EXPECT_EQ(c.dataset_size, 3000u);
  EXPECT_EQ(c.noise_rate, 0.01);
  EXPECT_EQ(c.acp_members, 5u);
  EXPECT_EQ(c.classifier.n_rounds, 50u);
  EXPECT_EQ(c.classifier.learning_rate, 0.2);
  EXPECT_EQ(c.classifier.max_depth, 3u);
  EXPECT_EQ(c.classifier.subsample, 0.8);
  EXPECT_EQ(c.pretrain_examples, 100u);
  EXPECT_EQ(c.pretrain.epochs, 4u);
  EXPECT_EQ(c.pretrain.learning_rate, 0.01);
}

TEST(Config, RejectsBadInput) {
  std::istringstream unknown("colour = blue\n");
  EXPECT_THROW(parse_campaign_config(unknown), std::invalid_argument);
  std::istringstream noeq("steps 10\n");
  EXPECT_THROW(parse_campaign_config(noeq), std::invalid_argument);
  std::istringstream badnum("steps = ten\n");
  EXPECT_THROW(parse_campaign_config(badnum), std::invalid_argument);
  std::istringstream badkind("scoring = cp_medium\n");
  EXPECT_THROW(parse_campaign_config(badkind), std::invalid_argument);
  std::istringstream nokinds("scoring = \n");
  EXPECT_THROW(parse_campaign_config(nokinds).validate(), std::invalid_argument);
  EXPECT_THROW(load_campaign_config("/nonexistent/config.txt"), std::runtime_error);
}

TEST(Campaign, BookkeepingTwoQueriesSixKinds) {
  const auto dir = fresh_dir("out");
  auto inputs = small_inputs({query("AC?DEF"), query("KLM?NPQ")});
  const auto cfg = small_config(dir);
  const auto summary = run_campaign(inputs, cfg, fake_run);
  ASSERT_EQ(summary.rows.size(), 12u);
  std::size_t csvs = 0;
  for (const auto& e : fs::directory_iterator(dir / "runs")) csvs += e.path().extension() == ".csv";
  EXPECT_EQ(csvs, 12u);
  EXPECT_TRUE(fs::exists(dir / "runs" / "q000_rm_p1.csv"));
  EXPECT_TRUE(fs::exists(dir / "runs" / "q001_cp_soft.csv"));
  EXPECT_TRUE(fs::exists(dir / "summary.csv"));
  EXPECT_TRUE(fs::exists(dir / "wilcoxon.csv"));
  EXPECT_TRUE(fs::exists(dir / "by_length.csv"));
  std::istringstream s(slurp(dir / "summary.csv"));
  std::string header;
  std::getline(s, header);
  EXPECT_EQ(header, "query_id,length,scoring_fn,n_unique_valid,n_conf_eff,steps_to_half,status");
  for (const auto& r : summary.rows) {
    const auto expect = fake_run(inputs, r.query_id, run_config(cfg, r.query_id, r.kind));
    EXPECT_EQ(r.n_unique_valid, expect.n_unique_valid());
    EXPECT_EQ(r.n_conf_eff, expect.n_conf_eff());
    EXPECT_EQ(r.length, r.query_id == 0 ? 6u : 7u);
    if (r.steps_to_half) EXPECT_LE(*r.steps_to_half, cfg.rl.steps);
  }
  EXPECT_EQ(summary.wilcoxon.size(), 10u);  // 5 kinds x 2 metrics
  for (const auto& w : summary.wilcoxon) EXPECT_EQ(w.status, "insufficient");  // 2 pairs
}

TEST(Campaign, SeedsSharedAcrossKindsOfAQuery) {
  CampaignConfig cfg;
  cfg.seed = 3;
  EXPECT_EQ(run_config(cfg, 4, ScoringKind::rm_p1).seed, run_config(cfg, 4, ScoringKind::cp_harsh).seed);
  EXPECT_NE(run_config(cfg, 4, ScoringKind::rm_p1).seed, run_config(cfg, 5, ScoringKind::rm_p1).seed);
  EXPECT_EQ(run_config(cfg, 4, ScoringKind::cp_harsh).scoring, ScoringKind::cp_harsh);
}

TEST(Campaign, FailedRunIsIsolated) {
  const auto inputs = small_inputs({query("AC?DEF"), query("KLM?NPQ"), query("W?YAC?DE")});
  const auto ok_dir = fresh_dir("ok"), bad_dir = fresh_dir("bad");
  const auto clean = run_campaign(inputs, small_config(ok_dir), fake_run);
  const RunFunction failing = [](const CampaignInputs& in, std::size_t q, const RLConfig& c) {
    if (q == 1 && c.scoring == ScoringKind::cp_diff) throw std::runtime_error("boom");
    return fake_run(in, q, c);
  };
  const auto broken = run_campaign(inputs, small_config(bad_dir), failing);
  ASSERT_EQ(broken.rows.size(), clean.rows.size());
  for (std::size_t i = 0; i < clean.rows.size(); ++i) {
    const auto& r = broken.rows[i];
    if (r.query_id == 1 && r.kind == ScoringKind::cp_diff) {
      EXPECT_FALSE(r.ok);
      EXPECT_EQ(r.error, "boom");
    } else {
      EXPECT_EQ(r, clean.rows[i]);
    }
  }
  EXPECT_FALSE(fs::exists(bad_dir / "runs" / "q001_cp_diff.csv"));
  const auto text = slurp(bad_dir / "summary.csv");
  EXPECT_NE(text.find("1,7,cp_diff,,,,error\n"), std::string::npos);
  for (const auto& w : broken.wilcoxon) EXPECT_EQ(w.n_pairs, w.kind == ScoringKind::cp_diff ? 2u : 3u);
}

TEST(Campaign, DeterministicRealRunsAndReportRecomputes) {
  const std::vector<QueryTemplate> qs{query("AC?DEF"), query("KL??NPQ")};
  const auto inputs = small_inputs(qs);
  const auto a = fresh_dir("a"), b = fresh_dir("b");
  const auto sa = run_campaign(inputs, small_config(a));
  const auto sb = run_campaign(inputs, small_config(b));
  for (const auto* name : {"summary.csv", "wilcoxon.csv", "by_length.csv"}) EXPECT_EQ(slurp(a / name), slurp(b / name));
  for (const auto& e : fs::directory_iterator(a / "runs")) {
    EXPECT_EQ(slurp(e.path()), slurp(b / "runs" / e.path().filename())) << e.path();
  }
  const auto rows = summarize_run_files(a, qs, kAllScoringKinds);
  ASSERT_EQ(rows.size(), sa.rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i], sa.rows[i]);
  std::ifstream in(a / "summary.csv");
  EXPECT_EQ(read_summary_csv(in), sa.rows);
}

TEST(Campaign, AbortsOnMissingInputsOrUnwritableOutput) {
  CampaignConfig cfg;
  cfg.query_file = "/nonexistent/queries.csv";
  EXPECT_THROW(prepare_inputs(cfg), std::runtime_error);
  const auto inputs = small_inputs({query("AC?DEF")});
  const auto blocker = fresh_dir("file");
  { std::ofstream(blocker) << "x"; }
  auto c = small_config(blocker / "sub");
  EXPECT_THROW(run_campaign(inputs, c, fake_run), std::exception);
  auto none = inputs;
  none.queries.clear();
  EXPECT_THROW(run_campaign(none, small_config(fresh_dir("none")), fake_run), std::invalid_argument);
}
