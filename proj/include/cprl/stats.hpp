#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace cprl {

struct WilcoxonResult {
  std::size_t n = 0;  // pairs left after dropping zero differences
  double w_plus = 0.0;
  double w_minus = 0.0;
  double statistic = 0.0;  // min(W+, W-)
  double p_value = 1.0;    // two-sided
  bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactMax = 20;
inline constexpr std::size_t kWilcoxonMinPairs = 5;

/// Midranks of `values` (1-based), ties share the mean of their positions.
inline std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Paired two-sided signed-rank test. Exact null distribution for n <= 20
/// (counted over all 2^n sign assignments of the midranks), tie-corrected
/// normal approximation above that.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: samples must be paired");
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] - b[i] != 0.0) diff.push_back(a[i] - b[i]);
  if (diff.empty()) throw std::domain_error("wilcoxon: all differences are zero");
  if (diff.size() < kWilcoxonMinPairs) throw std::invalid_argument("wilcoxon: need at least 5 nonzero differences");

  std::vector<double> abs_diff(diff.size());
  std::transform(diff.begin(), diff.end(), abs_diff.begin(), [](double d) { return std::fabs(d); });
  const auto ranks = midranks(abs_diff);
  WilcoxonResult r;
  r.n = diff.size();
  for (std::size_t i = 0; i < diff.size(); ++i) (diff[i] > 0 ? r.w_plus : r.w_minus) += ranks[i];
  r.statistic = std::min(r.w_plus, r.w_minus);

  if (r.n <= kWilcoxonExactMax) {
    // Midranks are multiples of 1/2, so doubled ranks count subsets exactly.
    std::vector<std::size_t> doubled(r.n);
    std::size_t total = 0;
    for (std::size_t i = 0; i < r.n; ++i) {
      doubled[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
      total += doubled[i];
    }
    std::vector<double> ways(total + 1, 0.0);
    ways[0] = 1.0;
    for (auto d : doubled)
      for (std::size_t s = total; s >= d; --s) {
        ways[s] += ways[s - d];
        if (s == d) break;
      }
    const auto obs = static_cast<std::size_t>(std::llround(2.0 * r.w_plus));
    double le = 0.0, ge = 0.0, all = 0.0;
    for (std::size_t s = 0; s <= total; ++s) {
      all += ways[s];
      if (s <= obs) le += ways[s];
      if (s >= obs) ge += ways[s];
    }
    r.p_value = std::min(1.0, 2.0 * std::min(le, ge) / all);
    r.exact = true;
  } else {
    const double n = static_cast<double>(r.n);
    double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    std::vector<double> sorted = abs_diff;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      var -= (t * t * t - t) / 48.0;
      i = j + 1;
    }
    const double z = (r.w_plus - n * (n + 1.0) / 4.0) / std::sqrt(var);
    r.p_value = std::min(1.0, std::erfc(std::fabs(z) / std::sqrt(2.0)));
    r.exact = false;
  }
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty sample");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Kolmogorov-Smirnov distance between a sample and Uniform[0, 1].
inline double ks_distance_uniform(std::vector<double> sample) {
  if (sample.empty()) throw std::invalid_argument("ks: empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double x = std::clamp(sample[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - x, x - static_cast<double>(i) / n});
  }
  return d;
}

}  // namespace cprl
