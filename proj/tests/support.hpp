#pragma once

// Artifacts shared across test files, built once per process.

#include "cprl/cprl.hpp"

namespace cprl::testing {

inline const Vocabulary& vocab() { return Vocabulary::standard(); }

inline TokenSequence seq(std::string_view s) { return parse_sequence(vocab(), s); }
inline QueryTemplate query(std::string_view s) { return parse_query(vocab(), s); }

inline const LabeledDataset& dataset5000() {
  static const auto ds = make_dataset(vocab(), 5000, LengthDistribution::standard(), 0.05, 11);
  return ds;
}

inline const BoostedTreeModel& classifier5000() {
  static const auto m = [] {
    ClassifierConfig cfg;
    cfg.seed = 3;
    return fit_boosted_trees(dataset5000().subset(Split::train), cfg);
  }();
  return m;
}

inline const Acp<BoostedTreeModel>& acp5000() {
  static const auto acp = build_acp(dataset5000().subset(Split::train), ClassifierConfig{}, kDefaultAcpMembers, 5);
  return acp;
}

inline const Policy& prior() {
  static const Policy p = [] {
    PretrainConfig cfg;
    cfg.seed = 9;
    const auto corpus = make_pretraining_corpus(vocab(), 3000, pretraining_lengths(), 10);
    return pretrain_prior(vocab(), corpus, cfg).policy;
  }();
  return p;
}

}  // namespace cprl::testing
