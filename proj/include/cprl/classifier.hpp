#pragma once

// Gradient-boosted regression trees on the logistic loss. The model exposes
// predict_probability() for anything indexable by feature id, which is the only
// surface the conformal layer depends on.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cprl/random.hpp"
#include "cprl/surrogate.hpp"

namespace cprl {

/// Anything that maps a fingerprint to P(label = 1).
template <class M>
concept ProbabilisticClassifier = requires(const M& m, const CountFingerprint& fp) {
  { m.predict_probability(fp) } -> std::convertible_to<double>;
};

struct ClassifierConfig {
  std::size_t n_rounds = 200;
  double learning_rate = 0.3;
  std::size_t max_depth = 2;
  double subsample = 1.0;
  double l2 = 1.0;                // leaf weight regularisation
  double min_child_weight = 1.0;  // minimum hessian mass per child
  double base_score = 0.0;        // initial margin
  std::uint64_t seed = 0;

  void validate() const {
    if (n_rounds < 1) throw std::invalid_argument("classifier: n_rounds must be >= 1");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0))
      throw std::invalid_argument("classifier: learning_rate must be in (0, 1]");
    if (max_depth < 1 || max_depth > 3) throw std::invalid_argument("classifier: max_depth must be in [1, 3]");
    if (!(subsample > 0.0 && subsample <= 1.0))
      throw std::invalid_argument("classifier: subsample must be in (0, 1]");
  }
};

/// Row-compressed sparse feature matrix; absent entries are zero.
class FeatureMatrix {
 public:
  explicit FeatureMatrix(std::size_t cols = kFingerprintBits) : cols_(cols) { row_start_.push_back(0); }

  static FeatureMatrix from_fingerprints(std::span<const CountFingerprint> fps) {
    FeatureMatrix m(kFingerprintBits);
    for (const auto& fp : fps) m.add_row(fp.buckets);
    return m;
  }

  template <class T>
  void add_row(std::span<const T> dense) {
    if (dense.size() != cols_) throw std::invalid_argument("feature matrix: row width mismatch");
    for (std::size_t j = 0; j < dense.size(); ++j) {
      if (dense[j] != T{}) {
        col_.push_back(static_cast<std::uint32_t>(j));
        value_.push_back(static_cast<float>(dense[j]));
      }
    }
    row_start_.push_back(col_.size());
  }
  template <class T>
  void add_row(const std::vector<T>& dense) {
    add_row(std::span<const T>(dense));
  }

  std::size_t rows() const { return row_start_.size() - 1; }
  std::size_t cols() const { return cols_; }
  std::span<const std::uint32_t> row_cols(std::size_t i) const {
    return {col_.data() + row_start_[i], row_start_[i + 1] - row_start_[i]};
  }
  std::span<const float> row_values(std::size_t i) const {
    return {value_.data() + row_start_[i], row_start_[i + 1] - row_start_[i]};
  }
  std::vector<float> dense_row(std::size_t i) const {
    std::vector<float> out(cols_, 0.0f);
    const auto c = row_cols(i);
    const auto v = row_values(i);
    for (std::size_t k = 0; k < c.size(); ++k) out[c[k]] = v[k];
    return out;
  }

 private:
  std::size_t cols_;
  std::vector<std::size_t> row_start_;
  std::vector<std::uint32_t> col_;
  std::vector<float> value_;
};

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;     // x[feature] < threshold goes left
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;  // leaf output, learning rate already applied
  bool operator==(const TreeNode&) const = default;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;

  template <class Features>
  double evaluate(const Features& x) const {
    std::int32_t i = 0;
    while (nodes[i].feature >= 0) {
      const auto& n = nodes[i];
      i = static_cast<double>(x[static_cast<std::size_t>(n.feature)]) < n.threshold ? n.left : n.right;
    }
    return nodes[i].value;
  }
  bool operator==(const RegressionTree&) const = default;
};

inline double sigmoid(double margin) {
  // The clamp keeps the probability strictly inside (0, 1) in double precision.
  margin = std::clamp(margin, -30.0, 30.0);
  return 1.0 / (1.0 + std::exp(-margin));
}

class BoostedTreeModel {
 public:
  BoostedTreeModel() = default;
  explicit BoostedTreeModel(double base_score, std::vector<RegressionTree> trees = {})
      : base_score_(base_score), trees_(std::move(trees)) {}

  template <class Features>
  double margin(const Features& x) const {
    double m = base_score_;
    for (const auto& t : trees_) m += t.evaluate(x);
    return m;
  }

  template <class Features>
  double predict_probability(const Features& x) const {
    return sigmoid(margin(x));
  }

  double base_score() const { return base_score_; }
  const std::vector<RegressionTree>& trees() const { return trees_; }
  void add_tree(RegressionTree t) { trees_.push_back(std::move(t)); }
  bool operator==(const BoostedTreeModel&) const = default;

 private:
  double base_score_ = 0.0;
  std::vector<RegressionTree> trees_;
};

inline void to_json(nlohmann::json& j, const BoostedTreeModel& m) {
  j = nlohmann::json::object();
  j["format"] = "cprl-boosted-trees/1";
  j["base_score"] = m.base_score();
  auto& trees = j["trees"] = nlohmann::json::array();
  for (const auto& t : m.trees()) {
    auto nodes = nlohmann::json::array();
    for (const auto& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
    trees.push_back(std::move(nodes));
  }
}

inline void from_json(const nlohmann::json& j, BoostedTreeModel& m) {
  if (j.value("format", "") != "cprl-boosted-trees/1")
    throw std::runtime_error("classifier dump: unrecognised format");
  std::vector<RegressionTree> trees;
  for (const auto& jt : j.at("trees")) {
    RegressionTree t;
    for (const auto& jn : jt)
      t.nodes.push_back({jn.at(0).get<std::int32_t>(), jn.at(1).get<double>(), jn.at(2).get<std::int32_t>(),
                         jn.at(3).get<std::int32_t>(), jn.at(4).get<double>()});
    trees.push_back(std::move(t));
  }
  m = BoostedTreeModel(j.at("base_score").get<double>(), std::move(trees));
}

struct FitReport {
  /// Mean logistic loss on the training rows; entry 0 is before the first round.
  std::vector<double> training_loss;
};

namespace detail {

inline double logistic_loss(double margin, int label) {
  // log(1 + exp(-z)) for label 1, log(1 + exp(z)) for label 0, computed stably.
  const double z = label == 1 ? margin : -margin;
  return z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

struct ColumnEntry {
  std::uint32_t row;  // position within the training sample
  float value;
};

struct SplitCandidate {
  double gain = 0.0;
  std::int32_t feature = -1;
  double threshold = 0.0;
};

class TreeGrower {
 public:
  TreeGrower(std::size_t n_rows, std::size_t n_cols, const std::vector<std::vector<ColumnEntry>>& columns,
             const ClassifierConfig& cfg)
      : n_rows_(n_rows), n_cols_(n_cols), columns_(columns), cfg_(cfg) {}

  // rows with in_sample[i] == false take no part in the fit
  RegressionTree grow(std::span<const double> grad, std::span<const double> hess,
                      const std::vector<bool>& in_sample, std::vector<std::int32_t>& leaf_of) {
    RegressionTree tree;
    std::vector<std::int32_t> node_of(n_rows_, -1);
    tree.nodes.push_back({});
    double g0 = 0, h0 = 0;
    for (std::size_t i = 0; i < n_rows_; ++i) {
      if (!in_sample[i]) continue;
      node_of[i] = 0;
      g0 += grad[i];
      h0 += hess[i];
    }
    std::vector<NodeStats> frontier{{0, g0, h0}};
    for (std::size_t depth = 0; depth < cfg_.max_depth && !frontier.empty(); ++depth) {
      const auto splits = best_splits(frontier, node_of, grad, hess);
      std::vector<NodeStats> next;
      std::vector<std::int32_t> remap(tree.nodes.size(), -1);
      for (std::size_t k = 0; k < frontier.size(); ++k) {
        const auto& s = splits[k];
        if (s.feature < 0) continue;
        const auto id = frontier[k].node;
        const auto l = static_cast<std::int32_t>(tree.nodes.size());
        tree.nodes.push_back({});
        tree.nodes.push_back({});
        tree.nodes[id].feature = s.feature;
        tree.nodes[id].threshold = s.threshold;
        tree.nodes[id].left = l;
        tree.nodes[id].right = l + 1;
        next.push_back({l, 0, 0});
        next.push_back({l + 1, 0, 0});
      }
      if (next.empty()) break;
      // Route rows of split nodes to their children.
      std::vector<std::int32_t> child_slot(tree.nodes.size(), -1);
      for (std::size_t k = 0; k < next.size(); ++k) child_slot[next[k].node] = static_cast<std::int32_t>(k);
      for (std::size_t i = 0; i < n_rows_; ++i) {
        const auto id = node_of[i];
        if (id < 0 || tree.nodes[id].feature < 0) continue;
        const auto& n = tree.nodes[id];
        const double x = row_value(i, n.feature);
        const auto child = x < n.threshold ? n.left : n.right;
        node_of[i] = child;
        auto& ns = next[child_slot[child]];
        ns.g += grad[i];
        ns.h += hess[i];
      }
      for (auto& ns : next) stats_[ns.node] = {ns.g, ns.h};
      frontier = std::move(next);
    }
    // Leaf values from the final node statistics.
    stats_[0] = {g0, h0};
    for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
      if (tree.nodes[id].feature >= 0) continue;
      const auto [g, h] = stats_[static_cast<std::int32_t>(id)];
      tree.nodes[id].value = -cfg_.learning_rate * g / (h + cfg_.l2);
    }
    stats_.clear();
    leaf_of = std::move(node_of);
    return tree;
  }

  void set_dense_lookup(std::vector<std::vector<std::pair<std::uint32_t, float>>> rows) {
    row_lookup_ = std::move(rows);
  }

 private:
  struct NodeStats {
    std::int32_t node;
    double g, h;
  };

  double row_value(std::size_t i, std::int32_t feature) const {
    const auto& r = row_lookup_[i];
    const auto it = std::lower_bound(r.begin(), r.end(), static_cast<std::uint32_t>(feature),
                                     [](const auto& e, std::uint32_t f) { return e.first < f; });
    return (it != r.end() && it->first == static_cast<std::uint32_t>(feature)) ? it->second : 0.0;
  }

  double score(double g, double h) const { return g * g / (h + cfg_.l2); }

  std::vector<SplitCandidate> best_splits(const std::vector<NodeStats>& frontier,
                                          const std::vector<std::int32_t>& node_of,
                                          std::span<const double> grad, std::span<const double> hess) {
    std::vector<SplitCandidate> best(frontier.size());
    std::vector<std::int32_t> slot_of_node;
    for (std::size_t k = 0; k < frontier.size(); ++k) {
      const auto id = static_cast<std::size_t>(frontier[k].node);
      if (slot_of_node.size() <= id) slot_of_node.resize(id + 1, -1);
      slot_of_node[id] = static_cast<std::int32_t>(k);
      stats_[frontier[k].node] = {frontier[k].g, frontier[k].h};
    }
    struct Entry {
      float value;
      double g, h;
    };
    std::vector<std::vector<Entry>> per_node(frontier.size());
    for (std::size_t j = 0; j < n_cols_; ++j) {
      for (auto& v : per_node) v.clear();
      for (const auto& e : columns_[j]) {
        const auto id = node_of[e.row];
        if (id < 0 || static_cast<std::size_t>(id) >= slot_of_node.size() || slot_of_node[id] < 0) continue;
        per_node[slot_of_node[id]].push_back({e.value, grad[e.row], hess[e.row]});
      }
      for (std::size_t k = 0; k < frontier.size(); ++k) {
        auto& entries = per_node[k];
        if (entries.empty()) continue;
        double gz = frontier[k].g, hz = frontier[k].h;
        for (const auto& e : entries) {
          gz -= e.g;
          hz -= e.h;
        }
        // Implicit zeros join the sweep as one more value group.
        entries.push_back({0.0f, gz, hz});
        std::stable_sort(entries.begin(), entries.end(),
                         [](const Entry& a, const Entry& b) { return a.value < b.value; });
        const double parent = score(frontier[k].g, frontier[k].h);
        double gl = 0, hl = 0;
        for (std::size_t i = 0; i + 1 < entries.size(); ++i) {
          gl += entries[i].g;
          hl += entries[i].h;
          if (entries[i + 1].value == entries[i].value) continue;
          const double gr = frontier[k].g - gl, hr = frontier[k].h - hl;
          if (hl < cfg_.min_child_weight || hr < cfg_.min_child_weight) continue;
          const double gain = score(gl, hl) + score(gr, hr) - parent;
          if (gain > best[k].gain + 1e-12) {
            best[k] = {gain, static_cast<std::int32_t>(j),
                       0.5 * (static_cast<double>(entries[i].value) + static_cast<double>(entries[i + 1].value))};
          }
        }
      }
    }
    return best;
  }

  std::size_t n_rows_, n_cols_;
  const std::vector<std::vector<ColumnEntry>>& columns_;
  const ClassifierConfig& cfg_;
  std::vector<std::vector<std::pair<std::uint32_t, float>>> row_lookup_;
  struct GH {
    double g = 0, h = 0;
  };
  struct GHMap {
    std::vector<GH> v;
    GH& operator[](std::int32_t id) {
      if (v.size() <= static_cast<std::size_t>(id)) v.resize(static_cast<std::size_t>(id) + 1);
      return v[static_cast<std::size_t>(id)];
    }
    void clear() { v.clear(); }
  } stats_;
};

}  // namespace detail

/// Fits on the rows listed in `sample` (duplicates allowed, as produced by a
/// bootstrap); an empty `sample` means every row once.
inline BoostedTreeModel fit_boosted_trees(const FeatureMatrix& x, std::span<const int> labels,
                                          const ClassifierConfig& cfg, std::span<const std::size_t> sample = {},
                                          FitReport* report = nullptr) {
  cfg.validate();
  if (labels.size() != x.rows()) throw std::invalid_argument("classifier: label count mismatch");
  std::vector<std::size_t> rows(sample.begin(), sample.end());
  if (rows.empty()) {
    rows.resize(x.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  }
  if (rows.size() < 2) throw std::invalid_argument("classifier: need at least 2 training examples");
  std::vector<int> y(rows.size());
  bool has0 = false, has1 = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw std::out_of_range("classifier: sample index out of range");
    y[i] = labels[rows[i]];
    if (y[i] != 0 && y[i] != 1) throw std::invalid_argument("classifier: labels must be 0 or 1");
    (y[i] == 1 ? has1 : has0) = true;
  }
  if (!has0 || !has1) throw std::invalid_argument("classifier: training data must contain both labels");

  const std::size_t n = rows.size();
  std::vector<std::vector<detail::ColumnEntry>> columns(x.cols());
  std::vector<std::vector<std::pair<std::uint32_t, float>>> lookup(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = x.row_cols(rows[i]);
    const auto v = x.row_values(rows[i]);
    for (std::size_t k = 0; k < c.size(); ++k) {
      columns[c[k]].push_back({static_cast<std::uint32_t>(i), v[k]});
      lookup[i].emplace_back(c[k], v[k]);
    }
  }

  BoostedTreeModel model(cfg.base_score);
  std::vector<double> margin(n, cfg.base_score), grad(n), hess(n);
  auto mean_loss = [&] {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += detail::logistic_loss(margin[i], y[i]);
    return s / static_cast<double>(n);
  };
  if (report) report->training_loss = {mean_loss()};

  Rng rng = make_rng(cfg.seed, 11);
  detail::TreeGrower grower(n, x.cols(), columns, cfg);
  grower.set_dense_lookup(std::move(lookup));
  std::vector<bool> in_sample(n, true);
  std::vector<std::int32_t> leaf_of;
  for (std::size_t round = 0; round < cfg.n_rounds; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(margin[i]);
      grad[i] = p - y[i];
      hess[i] = std::max(p * (1.0 - p), 1e-16);
    }
    if (cfg.subsample < 1.0)
      for (std::size_t i = 0; i < n; ++i) in_sample[i] = uniform01(rng) < cfg.subsample;
    auto tree = grower.grow(grad, hess, in_sample, leaf_of);
    // Rows outside the subsample still need their margins advanced.
    for (std::size_t i = 0; i < n; ++i) {
      if (leaf_of[i] >= 0) {
        margin[i] += tree.nodes[static_cast<std::size_t>(leaf_of[i])].value;
      } else {
        margin[i] += tree.evaluate(x.dense_row(rows[i]));
      }
    }
    model.add_tree(std::move(tree));
    if (report) report->training_loss.push_back(mean_loss());
  }
  return model;
}

/// Convenience overload over a labelled record list.
inline BoostedTreeModel fit_boosted_trees(std::span<const LabeledRecord> records, const ClassifierConfig& cfg,
                                          FitReport* report = nullptr) {
  FeatureMatrix x;
  std::vector<int> y;
  for (const auto& r : records) {
    x.add_row(fingerprint(r.sequence).buckets);
    y.push_back(r.label);
  }
  return fit_boosted_trees(x, y, cfg, {}, report);
}

}  // namespace cprl
