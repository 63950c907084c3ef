// Command-line front end: data generation, artifact building, single runs,
// campaigns and report recomputation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cprl/cprl.hpp"

namespace fs = std::filesystem;
using namespace cprl;

namespace {

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

std::vector<std::size_t> parse_lengths(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : detail::split_list(s)) out.push_back(detail::parse_number<std::size_t>("lengths", item));
  if (out.empty()) throw std::invalid_argument("no query lengths given");
  return out;
}

void print_metrics(std::ostream& out, const ConformalMetrics& m) {
  for (int y = 0; y < 2; ++y) {
    out << "label " << y << ": n=" << m.count[y] << " validity=" << detail::fixed(m.validity[y], 4)
        << " efficiency=" << detail::fixed(m.efficiency[y], 4) << " error=" << detail::fixed(m.error_rate[y], 4)
        << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal-scored policy fine-tuning on a surrogate peptide domain"};
  app.require_subcommand(1);
  const auto& vocab = Vocabulary::standard();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a labelled surrogate dataset and optionally query templates");
  std::size_t gen_n = 5000, gen_queries = 0, gen_masked = kMaxMasked;
  double gen_noise = 0.05;
  std::uint64_t gen_seed = 0;
  std::string gen_out, gen_query_out, gen_lengths = "6,7,10";
  gen->add_option("--size", gen_n, "number of unique sequences");
  gen->add_option("--noise", gen_noise, "label flip rate");
  gen->add_option("--seed", gen_seed)->required();
  gen->add_option("--out", gen_out, "dataset CSV")->required();
  gen->add_option("--queries", gen_queries, "number of query templates to write");
  gen->add_option("--query-out", gen_query_out, "query CSV");
  gen->add_option("--query-lengths", gen_lengths, "comma-separated template lengths");
  gen->add_option("--max-masked", gen_masked, "masked positions per template (at most 4)");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "fit the prior policy on masked-span reconstruction");
  std::size_t pre_examples = 3000;
  PretrainConfig pre_cfg;
  std::uint64_t pre_seed = 0;
  std::string pre_out;
  pre->add_option("--examples", pre_examples, "pretraining corpus size");
  pre->add_option("--epochs", pre_cfg.epochs);
  pre->add_option("--learning-rate", pre_cfg.learning_rate);
  pre->add_option("--batch-size", pre_cfg.batch_size);
  pre->add_option("--seed", pre_seed)->required();
  pre->add_option("--out", pre_out, "policy JSON")->required();

  // train-clf
  auto* tc = app.add_subcommand("train-clf", "fit the boosted-tree classifier on the train split");
  ClassifierConfig tc_cfg;
  std::uint64_t tc_seed = 0;
  std::string tc_dataset, tc_out;
  tc->add_option("--dataset", tc_dataset)->required();
  tc->add_option("--rounds", tc_cfg.n_rounds);
  tc->add_option("--learning-rate", tc_cfg.learning_rate);
  tc->add_option("--max-depth", tc_cfg.max_depth);
  tc->add_option("--subsample", tc_cfg.subsample);
  tc->add_option("--seed", tc_seed)->required();
  tc->add_option("--out", tc_out, "classifier JSON")->required();

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "build the aggregated conformal predictor and score it on the test split");
  ClassifierConfig cal_cfg;
  std::size_t cal_members = kDefaultAcpMembers;
  double cal_eps = kDefaultSignificance;
  std::uint64_t cal_seed = 0;
  std::string cal_dataset, cal_out, cal_report;
  cal->add_option("--dataset", cal_dataset)->required();
  cal->add_option("--members", cal_members, "number of ICPs");
  cal->add_option("--significance", cal_eps);
  cal->add_option("--rounds", cal_cfg.n_rounds);
  cal->add_option("--max-depth", cal_cfg.max_depth);
  cal->add_option("--seed", cal_seed)->required();
  cal->add_option("--out", cal_out, "ACP JSON")->required();
  cal->add_option("--report", cal_report, "validity/efficiency JSON");

  // run
  auto* run_cmd = app.add_subcommand("run", "one RL run on one query template");
  std::string run_config_file, run_query, run_out;
  std::size_t run_query_index = 0;
  std::string run_scoring = "rm_p1";
  std::uint64_t run_seed = 0;
  run_cmd->add_option("--config", run_config_file, "campaign config supplying artifacts and RL settings")->required();
  run_cmd->add_option("--query", run_query, "template such as AC??FG (overrides --query-index)");
  run_cmd->add_option("--query-index", run_query_index, "row of the configured query file");
  run_cmd->add_option("--scoring", run_scoring);
  run_cmd->add_option("--seed", run_seed)->required();
  run_cmd->add_option("--out", run_out, "output directory")->required();

  // campaign
  auto* camp = app.add_subcommand("campaign", "all queries x all configured scoring functions");
  std::string camp_config;
  std::uint64_t camp_seed = 0;
  std::string camp_out;
  camp->add_option("--config", camp_config)->required();
  camp->add_option("--seed", camp_seed)->required();
  camp->add_option("--out", camp_out, "output directory (overrides output_dir)");

  // report
  auto* rep = app.add_subcommand("report", "recompute summary tables from a campaign's run outputs");
  std::string rep_config, rep_dir;
  rep->add_option("--config", rep_config)->required();
  rep->add_option("--dir", rep_dir, "campaign output directory (defaults to output_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      const auto ds = make_dataset(vocab, gen_n, LengthDistribution::standard(), gen_noise, gen_seed);
      auto out = open_out(gen_out);
      write_dataset_csv(out, vocab, ds);
      std::cout << "wrote " << ds.records.size() << " records to " << gen_out << '\n';
      if (gen_queries > 0) {
        if (gen_query_out.empty()) throw std::invalid_argument("--queries needs --query-out");
        const auto qs = make_queries(vocab, gen_queries, parse_lengths(gen_lengths), gen_masked, gen_seed);
        auto qout = open_out(gen_query_out);
        write_queries_csv(qout, vocab, qs);
        std::cout << "wrote " << qs.size() << " queries to " << gen_query_out << '\n';
      }
    } else if (*pre) {
      pre_cfg.seed = pre_seed;
      const auto corpus = make_pretraining_corpus(vocab, pre_examples, pretraining_lengths(), derive_seed(pre_seed, 1));
      const auto res = pretrain_prior(vocab, corpus, pre_cfg);
      write_json_file(pre_out, res.policy);
      std::cout << "final nll " << detail::fixed(res.epoch_nll.back(), 4) << ", held-out fill validity "
                << detail::fixed(res.fill_validity, 4) << '\n';
    } else if (*tc) {
      tc_cfg.seed = tc_seed;
      tc_cfg.validate();
      const auto ds = load_dataset(tc_dataset, vocab);
      const auto train = ds.subset(Split::train);
      FitReport report;
      const auto model = fit_boosted_trees(train, tc_cfg, &report);
      write_json_file(tc_out, model);
      const auto test = ds.subset(Split::test);
      if (!test.empty()) {
        std::array<std::size_t, 2> hit{}, n{};
        for (const auto& r : test) {
          ++n[r.label];
          if ((model.predict_probability(fingerprint(r.sequence)) > 0.5 ? 1 : 0) == r.label) ++hit[r.label];
        }
        double bacc = 0.0;
        for (int y = 0; y < 2; ++y) bacc += n[y] ? 0.5 * static_cast<double>(hit[y]) / static_cast<double>(n[y]) : 0.0;
        std::cout << "test balanced accuracy " << detail::fixed(bacc, 4) << '\n';
      }
    } else if (*cal) {
      cal_cfg.validate();
      const auto ds = load_dataset(cal_dataset, vocab);
      const auto train = ds.subset(Split::train);
      const auto acp = build_acp(train, cal_cfg, cal_members, cal_seed);
      write_json_file(cal_out, acp);
      const auto test = ds.subset(Split::test);
      if (!test.empty()) {
        std::vector<PredictionSet> sets;
        std::vector<int> labels;
        for (const auto& r : test) {
          sets.push_back(predict_set(acp.p_values(fingerprint(r.sequence)), cal_eps));
          labels.push_back(r.label);
        }
        const auto m = validity_efficiency(sets, labels);
        print_metrics(std::cout, m);
        if (!cal_report.empty()) {
          nlohmann::json j = {{"significance", cal_eps},
                              {"members", cal_members},
                              {"test_size", test.size()},
                              {"validity", m.validity},
                              {"efficiency", m.efficiency},
                              {"error_rate", m.error_rate},
                              {"count", m.count}};
          write_json_file(cal_report, j);
        }
      }
    } else if (*run_cmd) {
      auto cfg = load_campaign_config(run_config_file);
      cfg.seed = run_seed;
      if (!run_query.empty()) {
        // a one-off template does not need the configured query file
        const auto q = parse_query(vocab, run_query);
        validate_query(q, vocab);
        const fs::path tmp = fs::path(run_out) / "query.csv";
        auto qout = open_out(tmp);
        write_queries_csv(qout, vocab, std::vector<QueryTemplate>{q});
        qout.close();
        cfg.query_file = tmp.string();
        run_query_index = 0;
      }
      const auto inputs = prepare_inputs(cfg, vocab);
      if (run_query_index >= inputs.queries.size()) throw std::invalid_argument("--query-index out of range");
      auto rc = run_config(cfg, run_query_index, parse_scoring_kind(run_scoring));
      const auto rec = default_run(inputs, run_query_index, rc);
      const auto stem = run_file_stem(run_query_index, rc.scoring);
      auto out = open_out(fs::path(run_out) / (stem + ".csv"));
      write_run_csv(out, rec);
      auto seqs = open_out(fs::path(run_out) / (stem + "_sequences.csv"));
      write_sequences_csv(seqs, vocab, rec);
      const auto half = steps_to_threshold(rec);
      std::cout << "unique valid " << rec.n_unique_valid() << ", confident permeable " << rec.n_conf_eff()
                << ", steps to half " << (half ? std::to_string(*half) : std::string("none")) << '\n';
    } else if (*camp) {
      auto cfg = load_campaign_config(camp_config);
      cfg.seed = camp_seed;
      if (!camp_out.empty()) cfg.output_dir = camp_out;
      if (cfg.output_dir.empty()) throw std::invalid_argument("campaign: output_dir is empty");
      const auto inputs = prepare_inputs(cfg, vocab);
      const auto summary = run_campaign(inputs, cfg);
      std::size_t failed = 0;
      for (const auto& r : summary.rows) {
        if (r.ok) continue;
        ++failed;
        std::cerr << "run q" << r.query_id << ' ' << scoring_name(r.kind) << " failed: " << r.error << '\n';
      }
      std::cout << summary.rows.size() << " runs, " << failed << " failed; outputs in " << cfg.output_dir << '\n';
    } else if (*rep) {
      const auto cfg = load_campaign_config(rep_config);
      const fs::path dir = rep_dir.empty() ? fs::path(cfg.output_dir) : fs::path(rep_dir);
      if (!fs::is_directory(dir / "runs")) throw std::runtime_error("report: no campaign outputs under " + dir.string());
      const auto queries = load_queries(cfg.query_file, vocab);
      const auto rows = summarize_run_files(dir, queries, cfg.kinds);
      auto s = open_out(dir / "report_summary.csv");
      write_summary_csv(s, rows);
      const auto wil = compare_to_baseline(rows);
      auto w = open_out(dir / "report_wilcoxon.csv");
      write_wilcoxon_csv(w, wil);
      auto l = open_out(dir / "report_by_length.csv");
      write_by_length_csv(l, rows, cfg.rl.steps);
      if (std::ifstream existing(dir / "summary.csv"); existing) {
        const auto recorded = read_summary_csv(existing);
        bool same = recorded.size() == rows.size();
        for (std::size_t i = 0; same && i < rows.size(); ++i) {
          const auto& a = recorded[i];
          const auto& b = rows[i];
          same = a.query_id == b.query_id && a.kind == b.kind && a.ok == b.ok &&
                 (!a.ok || (a.n_unique_valid == b.n_unique_valid && a.n_conf_eff == b.n_conf_eff &&
                            a.steps_to_half == b.steps_to_half));
        }
        std::cout << "summary.csv " << (same ? "matches" : "DIFFERS FROM") << " the recomputed table\n";
        if (!same) return 3;
      }
      write_wilcoxon_csv(std::cout, wil);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
