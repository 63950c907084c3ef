#pragma once

// Mondrian (label-conditional) inductive conformal prediction and its
// bootstrap-aggregated form over any ProbabilisticClassifier.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cprl/classifier.hpp"
#include "cprl/random.hpp"
#include "cprl/surrogate.hpp"

namespace cprl {

/// Binary-class nonconformity: 0.5 - (P(correct) - max P(wrong)) / 2.
inline double nonconformity(double p_correct, double p_wrong_max) {
  return 0.5 - (p_correct - p_wrong_max) / 2.0;
}

/// Nonconformity of hypothesised `label` given the classifier's P(label = 1).
inline double nonconformity_for_label(double p1, int label) {
  const double p_correct = label == 1 ? p1 : 1.0 - p1;
  return nonconformity(p_correct, 1.0 - p_correct);
}

struct PValuePair {
  double p0 = 0.0;
  double p1 = 0.0;
  bool operator==(const PValuePair&) const = default;
};

enum class PredictionSet { class0, class1, both, none };

inline std::string_view prediction_set_name(PredictionSet s) {
  switch (s) {
    case PredictionSet::class0: return "{0}";
    case PredictionSet::class1: return "{1}";
    case PredictionSet::both: return "both";
    case PredictionSet::none: return "none";
  }
  return "none";
}

inline constexpr double kDefaultSignificance = 0.2;

/// Label y is included iff p_y >= significance.
inline PredictionSet predict_set(PValuePair pv, double significance) {
  if (!(significance > 0.0 && significance < 1.0))
    throw std::invalid_argument("predict_set: significance must be in (0, 1)");
  const bool in0 = pv.p0 >= significance;
  const bool in1 = pv.p1 >= significance;
  if (in0 && in1) return PredictionSet::both;
  if (in0) return PredictionSet::class0;
  if (in1) return PredictionSet::class1;
  return PredictionSet::none;
}

/// The hit definition used throughout: p1 >= eps and p0 <= eps, inclusive.
inline bool is_confident_permeable(PValuePair pv, double significance = kDefaultSignificance) {
  return pv.p1 >= significance && pv.p0 <= significance;
}

/// p = (#{calibration scores >= test score} + 1) / (n + 1) over a sorted list.
inline double conformal_p_value(std::span<const double> sorted_scores, double test_score) {
  const auto it = std::lower_bound(sorted_scores.begin(), sorted_scores.end(), test_score);
  const auto at_least = static_cast<double>(sorted_scores.end() - it);
  return (at_least + 1.0) / (static_cast<double>(sorted_scores.size()) + 1.0);
}

struct CalibrationPoint {
  CountFingerprint features;
  int label = 0;
};

template <ProbabilisticClassifier Model>
class Icp {
 public:
  Icp(Model model, std::vector<double> scores0, std::vector<double> scores1)
      : model_(std::move(model)), scores_{std::move(scores0), std::move(scores1)} {
    for (auto& s : scores_) {
      if (s.empty()) throw std::invalid_argument("icp: each label needs at least one calibration point");
      std::sort(s.begin(), s.end());
    }
  }

  /// Scores each calibration point against its own true label and files it
  /// under that label.
  static Icp calibrate(Model model, std::span<const CalibrationPoint> points) {
    std::vector<double> s0, s1;
    for (const auto& pt : points) {
      if (pt.label != 0 && pt.label != 1) throw std::invalid_argument("icp: labels must be 0 or 1");
      const double a = nonconformity_for_label(model.predict_probability(pt.features), pt.label);
      (pt.label == 0 ? s0 : s1).push_back(a);
    }
    if (s0.empty() || s1.empty()) throw std::invalid_argument("icp: calibration set must contain both labels");
    return Icp(std::move(model), std::move(s0), std::move(s1));
  }

  /// Same underlying model, new calibration lists.
  Icp recalibrated(std::span<const CalibrationPoint> points) const { return calibrate(model_, points); }

  PValuePair p_values_from_probability(double p1) const {
    return {conformal_p_value(scores_[0], nonconformity_for_label(p1, 0)),
            conformal_p_value(scores_[1], nonconformity_for_label(p1, 1))};
  }

  template <class Features>
  PValuePair p_values(const Features& x) const {
    return p_values_from_probability(model_.predict_probability(x));
  }

  const Model& model() const { return model_; }
  const std::vector<double>& calibration_scores(int label) const { return scores_.at(label); }
  std::size_t calibration_size(int label) const { return scores_.at(label).size(); }

 private:
  Model model_;
  std::array<std::vector<double>, 2> scores_;
};

/// Aggregated conformal predictor: arithmetic mean of member ICP p-values.
template <ProbabilisticClassifier Model>
class Acp {
 public:
  explicit Acp(std::vector<Icp<Model>> members) : members_(std::move(members)) {
    if (members_.empty()) throw std::invalid_argument("acp: needs at least one ICP");
  }

  template <class Features>
  PValuePair p_values(const Features& x) const {
    PValuePair sum;
    for (const auto& icp : members_) {
      const auto pv = icp.p_values(x);
      sum.p0 += pv.p0;
      sum.p1 += pv.p1;
    }
    const double k = static_cast<double>(members_.size());
    return {sum.p0 / k, sum.p1 / k};
  }

  std::size_t size() const { return members_.size(); }
  const std::vector<Icp<Model>>& members() const { return members_; }

 private:
  std::vector<Icp<Model>> members_;
};

inline constexpr std::size_t kDefaultAcpMembers = 10;

struct AcpBuildTrace {
  std::vector<std::vector<std::size_t>> proper_training;  // bootstrap multiset per ICP
  std::vector<std::vector<std::size_t>> calibration;      // out-of-bag rows per ICP
};

/// Bootstrap-aggregated construction: for each member, draw |pool| rows with
/// replacement as the proper training sample, fit on it and calibrate on the
/// out-of-bag rows. `fit(x, labels, sample_rows, seed)` must return a Model.
template <class FitFn>
auto build_acp(const FeatureMatrix& x, std::span<const int> labels, std::size_t members, std::uint64_t seed,
               FitFn&& fit, AcpBuildTrace* trace = nullptr) {
  using Model = std::invoke_result_t<FitFn&, const FeatureMatrix&, std::span<const int>,
                                     std::span<const std::size_t>, std::uint64_t>;
  static_assert(ProbabilisticClassifier<Model>);
  if (members < 1) throw std::invalid_argument("acp: needs at least one ICP");
  const std::size_t n = x.rows();
  if (labels.size() != n) throw std::invalid_argument("acp: label count mismatch");
  if (std::find(labels.begin(), labels.end(), 0) == labels.end() ||
      std::find(labels.begin(), labels.end(), 1) == labels.end())
    throw std::invalid_argument("acp: training pool must contain both labels");

  constexpr int kMaxRetries = 10;
  std::vector<Icp<Model>> icps;
  icps.reserve(members);
  for (std::size_t m = 0; m < members; ++m) {
    bool built = false;
    for (int attempt = 0; attempt <= kMaxRetries && !built; ++attempt) {
      const std::uint64_t sub_seed = derive_seed(derive_seed(seed, m), static_cast<std::uint64_t>(attempt));
      Rng rng(sub_seed);
      std::vector<std::size_t> sample(n);
      std::vector<bool> drawn(n, false);
      for (auto& s : sample) {
        s = uniform_index(rng, n);
        drawn[s] = true;
      }
      std::vector<std::size_t> oob;
      std::array<bool, 2> oob_has{false, false}, bag_has{false, false};
      for (std::size_t i = 0; i < n; ++i) {
        if (!drawn[i]) {
          oob.push_back(i);
          oob_has[labels[i]] = true;
        }
      }
      for (auto s : sample) bag_has[labels[s]] = true;
      if (!oob_has[0] || !oob_has[1] || !bag_has[0] || !bag_has[1]) continue;

      Model model = fit(x, labels, std::span<const std::size_t>(sample), sub_seed);
      std::vector<double> s0, s1;
      for (auto i : oob) {
        const double p1 = model.predict_probability(x.dense_row(i));
        (labels[i] == 0 ? s0 : s1).push_back(nonconformity_for_label(p1, labels[i]));
      }
      icps.emplace_back(std::move(model), std::move(s0), std::move(s1));
      if (trace) {
        trace->proper_training.push_back(std::move(sample));
        trace->calibration.push_back(std::move(oob));
      }
      built = true;
    }
    if (!built) throw std::runtime_error("acp: bootstrap kept producing an out-of-bag set missing a label");
  }
  return Acp<Model>(std::move(icps));
}

/// ACP over boosted trees trained on the records' fingerprints.
inline Acp<BoostedTreeModel> build_acp(std::span<const LabeledRecord> pool, const ClassifierConfig& cfg,
                                       std::size_t members, std::uint64_t seed, AcpBuildTrace* trace = nullptr) {
  FeatureMatrix x;
  std::vector<int> y;
  for (const auto& r : pool) {
    x.add_row(fingerprint(r.sequence).buckets);
    y.push_back(r.label);
  }
  auto fit = [&cfg](const FeatureMatrix& xm, std::span<const int> labels, std::span<const std::size_t> rows,
                    std::uint64_t sub_seed) {
    ClassifierConfig c = cfg;
    c.seed = sub_seed;
    return fit_boosted_trees(xm, labels, c, rows);
  };
  return build_acp(x, y, members, seed, fit, trace);
}

// ---------------------------------------------------------------------------
// Validity and efficiency

struct ConformalMetrics {
  std::array<double, 2> validity{};    // (correct singletons + Both) / n_y
  std::array<double, 2> efficiency{};  // singletons (right or wrong) / n_y
  std::array<double, 2> error_rate{};  // true label excluded from the set / n_y
  std::array<std::size_t, 2> count{};
};

inline ConformalMetrics validity_efficiency(std::span<const PredictionSet> sets, std::span<const int> labels) {
  if (sets.size() != labels.size()) throw std::invalid_argument("validity_efficiency: length mismatch");
  ConformalMetrics m;
  std::array<std::size_t, 2> valid{}, single{};
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const int y = labels[i];
    if (y != 0 && y != 1) throw std::invalid_argument("validity_efficiency: labels must be 0 or 1");
    ++m.count[y];
    const auto s = sets[i];
    const auto correct = y == 0 ? PredictionSet::class0 : PredictionSet::class1;
    if (s == correct || s == PredictionSet::both) ++valid[y];
    if (s == PredictionSet::class0 || s == PredictionSet::class1) ++single[y];
  }
  for (int y = 0; y < 2; ++y) {
    if (m.count[y] == 0) throw std::invalid_argument("validity_efficiency: a label is absent");
    const double n = static_cast<double>(m.count[y]);
    m.validity[y] = static_cast<double>(valid[y]) / n;
    m.efficiency[y] = static_cast<double>(single[y]) / n;
    m.error_rate[y] = 1.0 - m.validity[y];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Serialization

inline void to_json(nlohmann::json& j, const Acp<BoostedTreeModel>& acp) {
  j = nlohmann::json::object();
  j["format"] = "cprl-acp/1";
  auto& arr = j["icps"] = nlohmann::json::array();
  for (const auto& icp : acp.members()) {
    arr.push_back({{"model", icp.model()},
                   {"scores0", icp.calibration_scores(0)},
                   {"scores1", icp.calibration_scores(1)}});
  }
}

inline Acp<BoostedTreeModel> acp_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cprl-acp/1") throw std::runtime_error("acp dump: unrecognised format");
  std::vector<Icp<BoostedTreeModel>> icps;
  for (const auto& ji : j.at("icps"))
    icps.emplace_back(ji.at("model").get<BoostedTreeModel>(), ji.at("scores0").get<std::vector<double>>(),
                      ji.at("scores1").get<std::vector<double>>());
  return Acp<BoostedTreeModel>(std::move(icps));
}

}  // namespace cprl
