#pragma once

// Campaign orchestration: every (query x scoring function) run, per-run CSVs,
// the summary table, Wilcoxon comparisons against the raw-model baseline and
// length-stratified aggregates.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cprl/classifier.hpp"
#include "cprl/conformal.hpp"
#include "cprl/policy.hpp"
#include "cprl/rl.hpp"
#include "cprl/scoring.hpp"
#include "cprl/stats.hpp"
#include "cprl/surrogate.hpp"

namespace cprl {

// ---------------------------------------------------------------------------
// Configuration file: `key = value` lines, `#` starts a comment.

struct CampaignConfig {
  std::string query_file;
  std::string dataset_file;  // generated from dataset_size/noise_rate when empty
  std::vector<ScoringKind> kinds{kAllScoringKinds.begin(), kAllScoringKinds.end()};
  RLConfig rl;
  std::uint64_t seed = 1;
  std::string output_dir = "campaign_out";

  std::string prior_file;       // built when empty
  std::string classifier_file;  // built when empty
  std::string acp_file;         // built when empty

  std::size_t dataset_size = 5000;
  double noise_rate = 0.05;
  std::size_t acp_members = kDefaultAcpMembers;
  ClassifierConfig classifier;
  std::size_t pretrain_examples = 3000;
  PretrainConfig pretrain;

  void validate() const {
    if (kinds.empty()) throw std::invalid_argument("campaign: at least one scoring function is required");
    rl.validate();
    classifier.validate();
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) throw std::invalid_argument("config: bad value for '" + key + "': " + v);
  return out;
}

}  // namespace detail

inline CampaignConfig parse_campaign_config(std::istream& in) {
  CampaignConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key = value at line " + std::to_string(lineno));
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    using detail::parse_number;
    if (key == "queries") c.query_file = value;
    else if (key == "dataset") c.dataset_file = value;
    else if (key == "scoring") {
      c.kinds.clear();
      for (const auto& k : detail::split_list(value)) c.kinds.push_back(parse_scoring_kind(k));
    }
    else if (key == "output_dir") c.output_dir = value;
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "sigma") c.rl.sigma = parse_number<double>(key, value);
    else if (key == "batch_size") c.rl.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "steps") c.rl.steps = parse_number<std::size_t>(key, value);
    else if (key == "significance") c.rl.significance = parse_number<double>(key, value);
    else if (key == "learning_rate") c.rl.learning_rate = parse_number<double>(key, value);
    else if (key == "prior") c.prior_file = value;
    else if (key == "classifier") c.classifier_file = value;
    else if (key == "acp") c.acp_file = value;
    else if (key == "dataset_size") c.dataset_size = parse_number<std::size_t>(key, value);
    else if (key == "noise_rate") c.noise_rate = parse_number<double>(key, value);
    else if (key == "acp_members") c.acp_members = parse_number<std::size_t>(key, value);
    else if (key == "clf_rounds") c.classifier.n_rounds = parse_number<std::size_t>(key, value);
    else if (key == "clf_learning_rate") c.classifier.learning_rate = parse_number<double>(key, value);
    else if (key == "clf_max_depth") c.classifier.max_depth = parse_number<std::size_t>(key, value);
    else if (key == "clf_subsample") c.classifier.subsample = parse_number<double>(key, value);
    else if (key == "pretrain_examples") c.pretrain_examples = parse_number<std::size_t>(key, value);
    else if (key == "pretrain_epochs") c.pretrain.epochs = parse_number<std::size_t>(key, value);
    else if (key == "pretrain_learning_rate") c.pretrain.learning_rate = parse_number<double>(key, value);
    else throw std::invalid_argument("config: unknown key '" + key + "' at line " + std::to_string(lineno));
  }
  return c;
}

inline CampaignConfig load_campaign_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path.string());
  return parse_campaign_config(in);
}

// ---------------------------------------------------------------------------
// Artifacts

struct CampaignInputs {
  std::vector<QueryTemplate> queries;
  Policy prior;
  BoostedTreeModel classifier;
  Acp<BoostedTreeModel> acp;
};

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

inline LabeledDataset load_dataset(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path.string());
  return read_dataset_csv(in, vocab);
}

inline std::vector<QueryTemplate> load_queries(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open query file: " + path.string());
  return read_queries_csv(in, vocab);
}

/// Pretraining corpus lengths: every template length a query may have.
inline std::vector<std::size_t> pretraining_lengths() { return {6, 7, 8, 9, 10, 11, 12}; }

inline Policy build_prior(const Vocabulary& vocab, std::size_t examples, PretrainConfig cfg, std::uint64_t seed) {
  cfg.seed = derive_seed(seed, 103);
  const auto corpus = make_pretraining_corpus(vocab, examples, pretraining_lengths(), derive_seed(seed, 104));
  return pretrain_prior(vocab, corpus, cfg).policy;
}

/// Loads each artifact named in the config and builds the rest from the
/// (loaded or generated) dataset's train split.
inline CampaignInputs prepare_inputs(const CampaignConfig& cfg, const Vocabulary& vocab = Vocabulary::standard()) {
  if (cfg.query_file.empty()) throw std::invalid_argument("campaign: no query file configured");
  auto queries = load_queries(cfg.query_file, vocab);
  if (queries.empty()) throw std::invalid_argument("campaign: query file has no templates");

  std::optional<LabeledDataset> dataset;
  auto train_split = [&]() -> std::vector<LabeledRecord> {
    if (!dataset) {
      dataset = cfg.dataset_file.empty()
                    ? make_dataset(vocab, cfg.dataset_size, LengthDistribution::standard(), cfg.noise_rate,
                                   derive_seed(cfg.seed, 101))
                    : load_dataset(cfg.dataset_file, vocab);
    }
    return dataset->subset(Split::train);
  };

  Policy prior = cfg.prior_file.empty() ? build_prior(vocab, cfg.pretrain_examples, cfg.pretrain, cfg.seed)
                                        : read_json_file(cfg.prior_file).get<Policy>();
  BoostedTreeModel clf;
  if (cfg.classifier_file.empty()) {
    ClassifierConfig c = cfg.classifier;
    c.seed = derive_seed(cfg.seed, 105);
    const auto train = train_split();
    clf = fit_boosted_trees(train, c);
  } else {
    clf = read_json_file(cfg.classifier_file).get<BoostedTreeModel>();
  }
  std::optional<Acp<BoostedTreeModel>> acp;
  if (cfg.acp_file.empty()) {
    const auto train = train_split();
    acp.emplace(build_acp(train, cfg.classifier, cfg.acp_members, derive_seed(cfg.seed, 106)));
  } else {
    acp.emplace(acp_from_json(read_json_file(cfg.acp_file)));
  }
  return {std::move(queries), std::move(prior), std::move(clf), std::move(*acp)};
}

// ---------------------------------------------------------------------------
// Summaries

/// First step whose unique valid batch members reach `threshold` confident
/// permeable fraction; steps with no valid member never qualify.
inline std::optional<std::size_t> steps_to_threshold(std::span<const StepMetrics> steps, double threshold = 0.5) {
  for (const auto& m : steps)
    if (m.n_unique_valid > 0 && m.frac_conf_eff >= threshold) return m.step;
  return std::nullopt;
}

inline std::optional<std::size_t> steps_to_threshold(const RunRecord& rec, double threshold = 0.5) {
  return steps_to_threshold(std::span<const StepMetrics>(rec.steps), threshold);
}

struct SummaryRow {
  std::size_t query_id = 0;
  std::size_t length = 0;
  ScoringKind kind = ScoringKind::rm_p1;
  std::size_t n_unique_valid = 0;
  std::size_t n_conf_eff = 0;
  std::optional<std::size_t> steps_to_half;
  bool ok = true;
  std::string error;
  bool operator==(const SummaryRow&) const = default;
};

struct WilcoxonRow {
  ScoringKind kind = ScoringKind::cp_soft;  // compared against rm_p1
  std::string metric;
  std::size_t n_pairs = 0;
  std::optional<WilcoxonResult> result;
  std::string status;  // ok | degenerate | insufficient
};

struct CampaignSummary {
  std::vector<SummaryRow> rows;
  std::vector<WilcoxonRow> wilcoxon;
};

inline constexpr const char* kSummaryCsvHeader =
    "query_id,length,scoring_fn,n_unique_valid,n_conf_eff,steps_to_half,status";

inline void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows) {
  out << kSummaryCsvHeader << '\n';
  for (const auto& r : rows) {
    out << r.query_id << ',' << r.length << ',' << scoring_name(r.kind) << ',';
    if (r.ok) {
      out << r.n_unique_valid << ',' << r.n_conf_eff << ','
          << (r.steps_to_half ? std::to_string(*r.steps_to_half) : std::string("none")) << ",ok\n";
    } else {
      out << ",,,error\n";
    }
  }
}

inline std::vector<SummaryRow> read_summary_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || detail::trim_line(line) != kSummaryCsvHeader)
    throw std::runtime_error("summary csv: unexpected header");
  std::vector<SummaryRow> rows;
  while (std::getline(in, line)) {
    line = detail::trim_line(line);
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 7) throw std::runtime_error("summary csv: bad row: " + line);
    SummaryRow r;
    r.query_id = std::stoul(f[0]);
    r.length = std::stoul(f[1]);
    r.kind = parse_scoring_kind(f[2]);
    r.ok = f[6] == "ok";
    if (r.ok) {
      r.n_unique_valid = std::stoul(f[3]);
      r.n_conf_eff = std::stoul(f[4]);
      if (f[5] != "none") r.steps_to_half = std::stoul(f[5]);
    }
    rows.push_back(r);
  }
  return rows;
}

/// Pairs each non-baseline scoring function with rm_p1 per query, over queries
/// where both runs succeeded.
inline std::vector<WilcoxonRow> compare_to_baseline(std::span<const SummaryRow> rows) {
  std::map<std::pair<std::size_t, ScoringKind>, const SummaryRow*> cell;
  std::vector<ScoringKind> kinds;
  for (const auto& r : rows) {
    if (!r.ok) continue;
    cell[{r.query_id, r.kind}] = &r;
    if (std::find(kinds.begin(), kinds.end(), r.kind) == kinds.end()) kinds.push_back(r.kind);
  }
  std::sort(kinds.begin(), kinds.end());
  std::vector<WilcoxonRow> out;
  for (auto kind : kinds) {
    if (kind == ScoringKind::rm_p1) continue;
    for (const char* metric : {"n_conf_eff", "n_unique_valid"}) {
      std::vector<double> a, b;
      for (const auto& [key, row] : cell) {
        if (key.second != kind) continue;
        const auto base = cell.find({key.first, ScoringKind::rm_p1});
        if (base == cell.end()) continue;
        const bool conf = std::string_view(metric) == "n_conf_eff";
        a.push_back(static_cast<double>(conf ? row->n_conf_eff : row->n_unique_valid));
        b.push_back(static_cast<double>(conf ? base->second->n_conf_eff : base->second->n_unique_valid));
      }
      WilcoxonRow w{kind, metric, a.size(), std::nullopt, "ok"};
      try {
        w.result = wilcoxon_signed_rank(a, b);
      } catch (const std::domain_error&) {
        w.status = "degenerate";
      } catch (const std::invalid_argument&) {
        w.status = "insufficient";
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

inline void write_wilcoxon_csv(std::ostream& out, std::span<const WilcoxonRow> rows) {
  out << "scoring_fn,baseline,metric,n_pairs,w_statistic,p_value,exact,status\n";
  for (const auto& w : rows) {
    out << scoring_name(w.kind) << ",rm_p1," << w.metric << ',' << w.n_pairs << ',';
    if (w.result)
      out << detail::fixed(w.result->statistic, 1) << ',' << detail::fixed(w.result->p_value, 8) << ','
          << (w.result->exact ? "true" : "false");
    else
      out << ",,";
    out << ',' << w.status << '\n';
  }
}

inline std::map<std::size_t, std::vector<SummaryRow>> stratify_by_length(std::span<const SummaryRow> rows) {
  std::map<std::size_t, std::vector<SummaryRow>> groups;
  for (const auto& r : rows) groups[r.length].push_back(r);
  return groups;
}

inline void write_by_length_csv(std::ostream& out, std::span<const SummaryRow> rows, std::size_t total_steps) {
  out << "length,scoring_fn,n_runs,n_failed,mean_n_unique_valid,mean_n_conf_eff,median_steps_to_half,n_reached_half\n";
  for (const auto& [length, group] : stratify_by_length(rows)) {
    std::map<ScoringKind, std::vector<const SummaryRow*>> by_kind;
    for (const auto& r : group) by_kind[r.kind].push_back(&r);
    for (const auto& [kind, members] : by_kind) {
      std::size_t ok = 0, failed = 0, reached = 0;
      double uv = 0, ce = 0;
      std::vector<double> steps;
      for (const auto* r : members) {
        if (!r->ok) {
          ++failed;
          continue;
        }
        ++ok;
        uv += static_cast<double>(r->n_unique_valid);
        ce += static_cast<double>(r->n_conf_eff);
        // A run that never reaches the threshold counts as one past the end.
        steps.push_back(r->steps_to_half ? static_cast<double>(*r->steps_to_half) : static_cast<double>(total_steps));
        if (r->steps_to_half) ++reached;
      }
      out << length << ',' << scoring_name(kind) << ',' << ok << ',' << failed << ',';
      if (ok) {
        out << detail::fixed(uv / static_cast<double>(ok), 2) << ',' << detail::fixed(ce / static_cast<double>(ok), 2)
            << ',' << detail::fixed(median(steps), 1);
      } else {
        out << ",,";
      }
      out << ',' << reached << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Running

using RunFunction = std::function<RunRecord(const CampaignInputs&, std::size_t query_id, const RLConfig&)>;

inline RunRecord default_run(const CampaignInputs& in, std::size_t query_id, const RLConfig& cfg) {
  ModelScorer scorer(cfg.scoring, in.classifier, in.acp, cfg.significance);
  return run(in.prior, Vocabulary::standard(), in.queries.at(query_id), scorer, cfg);
}

inline std::string run_file_stem(std::size_t query_id, ScoringKind kind) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "q%03zu_", query_id);
  return buf + std::string(scoring_name(kind));
}

/// Seeds depend on the query only, so every scoring function of a query starts
/// from the same random stream.
inline RLConfig run_config(const CampaignConfig& cfg, std::size_t query_id, ScoringKind kind) {
  RLConfig rc = cfg.rl;
  rc.scoring = kind;
  rc.seed = derive_seed(cfg.seed, 1000 + query_id);
  return rc;
}

/// Executes every (query, scoring function) run. Failed runs are recorded with
/// status "error" and left out of every aggregate. When `cfg.output_dir` is
/// non-empty the per-run CSVs, summary.csv, wilcoxon.csv and by_length.csv are
/// written there.
inline CampaignSummary run_campaign(const CampaignInputs& in, const CampaignConfig& cfg,
                                    const RunFunction& runner = default_run,
                                    const Vocabulary& vocab = Vocabulary::standard()) {
  cfg.validate();
  if (in.queries.empty()) throw std::invalid_argument("campaign: no queries");
  namespace fs = std::filesystem;
  const bool write = !cfg.output_dir.empty();
  const fs::path root = cfg.output_dir;
  if (write) {
    std::error_code ec;
    fs::create_directories(root / "runs", ec);
    fs::create_directories(root / "sequences", ec);
    if (ec || !fs::is_directory(root / "runs")) throw std::runtime_error("cannot create output directory " + root.string());
  }
  auto open = [](const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
  };

  CampaignSummary summary;
  for (std::size_t q = 0; q < in.queries.size(); ++q) {
    for (auto kind : cfg.kinds) {
      SummaryRow row{q, in.queries[q].length(), kind};
      try {
        const auto rec = runner(in, q, run_config(cfg, q, kind));
        row.n_unique_valid = rec.n_unique_valid();
        row.n_conf_eff = rec.n_conf_eff();
        row.steps_to_half = steps_to_threshold(rec);
        if (write) {
          auto runs = open(root / "runs" / (run_file_stem(q, kind) + ".csv"));
          write_run_csv(runs, rec);
          auto seqs = open(root / "sequences" / (run_file_stem(q, kind) + ".csv"));
          write_sequences_csv(seqs, vocab, rec);
        }
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
      summary.rows.push_back(std::move(row));
    }
  }
  summary.wilcoxon = compare_to_baseline(summary.rows);
  if (write) {
    auto s = open(root / "summary.csv");
    write_summary_csv(s, summary.rows);
    auto w = open(root / "wilcoxon.csv");
    write_wilcoxon_csv(w, summary.wilcoxon);
    auto l = open(root / "by_length.csv");
    write_by_length_csv(l, summary.rows, cfg.rl.steps);
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Recomputing a summary from run outputs

/// Rebuilds summary rows from runs/ and sequences/ under `dir`; runs whose
/// files are missing are reported as errors.
inline std::vector<SummaryRow> summarize_run_files(const std::filesystem::path& dir,
                                                   std::span<const QueryTemplate> queries,
                                                   std::span<const ScoringKind> kinds) {
  std::vector<SummaryRow> rows;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (auto kind : kinds) {
      SummaryRow row{q, queries[q].length(), kind};
      std::ifstream runs(dir / "runs" / (run_file_stem(q, kind) + ".csv"));
      std::ifstream seqs(dir / "sequences" / (run_file_stem(q, kind) + ".csv"));
      if (!runs || !seqs) {
        row.ok = false;
        row.error = "missing run output";
        rows.push_back(row);
        continue;
      }
      std::string line;
      std::getline(runs, line);
      if (detail::trim_line(line) != kRunCsvHeader) throw std::runtime_error("run csv: unexpected header");
      std::vector<StepMetrics> steps;
      while (std::getline(runs, line)) {
        line = detail::trim_line(line);
        if (line.empty()) continue;
        const auto f = detail::split_csv(line);
        if (f.size() != 10) throw std::runtime_error("run csv: bad row: " + line);
        StepMetrics m;
        m.step = std::stoul(f[0]);
        m.frac_conf_eff = std::stod(f[5]);
        m.n_unique_valid = std::stoul(f[8]);
        steps.push_back(m);
      }
      row.steps_to_half = steps_to_threshold(steps);
      std::getline(seqs, line);
      while (std::getline(seqs, line)) {
        line = detail::trim_line(line);
        if (line.empty()) continue;
        const auto f = detail::split_csv(line);
        if (f.size() != 4) throw std::runtime_error("sequences csv: bad row: " + line);
        ++row.n_unique_valid;
        if (f[2] == "1") ++row.n_conf_eff;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace cprl
