#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <string_view>

#include "cprl/conformal.hpp"

namespace cprl {

enum class ScoringKind { rm_p1, cp_p1, cp_one_minus_p0, cp_diff, cp_harsh, cp_soft };

inline constexpr std::array<ScoringKind, 6> kAllScoringKinds{
    ScoringKind::rm_p1,   ScoringKind::cp_p1,    ScoringKind::cp_one_minus_p0,
    ScoringKind::cp_diff, ScoringKind::cp_harsh, ScoringKind::cp_soft};

inline std::string_view scoring_name(ScoringKind k) {
  switch (k) {
    case ScoringKind::rm_p1: return "rm_p1";
    case ScoringKind::cp_p1: return "cp_p1";
    case ScoringKind::cp_one_minus_p0: return "cp_1mp0";
    case ScoringKind::cp_diff: return "cp_diff";
    case ScoringKind::cp_harsh: return "cp_harsh";
    case ScoringKind::cp_soft: return "cp_soft";
  }
  return "rm_p1";
}

inline ScoringKind parse_scoring_kind(std::string_view s) {
  for (auto k : kAllScoringKinds)
    if (scoring_name(k) == s) return k;
  throw std::invalid_argument("unknown scoring function: " + std::string(s));
}

inline double score_rm(double p1_raw) { return p1_raw; }
inline double score_p1(PValuePair pv) { return pv.p1; }
inline double score_one_minus_p0(PValuePair pv) { return 1.0 - pv.p0; }

/// Maps p1 - p0 from [-1, 1] onto [0, 1].
inline double score_diff(PValuePair pv) { return ((pv.p1 - pv.p0) + 1.0) / 2.0; }

inline double score_harsh(PValuePair pv, double significance = kDefaultSignificance) {
  return (pv.p0 <= significance && pv.p1 >= significance) ? 1.0 : 0.0;
}

/// Half credit when only one of the two conformal-efficiency conditions holds.
inline double score_soft(PValuePair pv, double significance = kDefaultSignificance) {
  const bool low0 = pv.p0 <= significance;
  const bool high1 = pv.p1 >= significance;
  if (low0 && high1) return 1.0;
  if (low0 || high1) return 0.5;
  return 0.0;
}

inline double apply_scoring(ScoringKind kind, double p1_raw, PValuePair pv,
                            double significance = kDefaultSignificance) {
  switch (kind) {
    case ScoringKind::rm_p1: return score_rm(p1_raw);
    case ScoringKind::cp_p1: return score_p1(pv);
    case ScoringKind::cp_one_minus_p0: return score_one_minus_p0(pv);
    case ScoringKind::cp_diff: return score_diff(pv);
    case ScoringKind::cp_harsh: return score_harsh(pv, significance);
    case ScoringKind::cp_soft: return score_soft(pv, significance);
  }
  return 0.0;
}

}  // namespace cprl
