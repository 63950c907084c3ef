#pragma once

// Surrogate sequence domain: a 20-letter residue alphabet, masked query
// templates, fill assembly, a ground-truth permeability rule, hashed bigram
// count fingerprints and seeded dataset/query generators.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cprl/random.hpp"

namespace cprl {

using Token = std::uint8_t;

class Vocabulary {
 public:
  Vocabulary(std::string residues, std::string hydrophobic, char end_symbol = '|',
             char mask_symbol = '?')
      : residues_(std::move(residues)),
        hydrophobic_(residues_.size(), false),
        end_symbol_(end_symbol),
        mask_symbol_(mask_symbol) {
    if (residues_.empty()) throw std::invalid_argument("vocabulary: no residue tokens");
    if (residues_.size() > 250) throw std::invalid_argument("vocabulary: too many residues");
    std::string all = residues_ + end_symbol_ + mask_symbol_;
    std::string sorted = all;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw std::invalid_argument("vocabulary: symbols must be distinct");
    for (char c : hydrophobic) {
      const auto t = token(c);
      if (!t) throw std::invalid_argument("vocabulary: hydrophobic symbol not a residue");
      hydrophobic_[*t] = true;
    }
  }

  /// The twenty standard one-letter residue codes; A C F I L M V W are the
  /// hydrophobic subset used by the permeability rule.
  static const Vocabulary& standard() {
    static const Vocabulary v{"ACDEFGHIKLMNPQRSTVWY", "ACFILMVW"};
    return v;
  }

  std::size_t residue_count() const { return residues_.size(); }
  // Token ordinals: residues 0..R-1, then the slot terminator. The generator
  // additionally uses R+1 (mask) and R+2 (begin) as input-only symbols.
  Token end_token() const { return static_cast<Token>(residues_.size()); }
  Token mask_token() const { return static_cast<Token>(residues_.size() + 1); }
  Token begin_token() const { return static_cast<Token>(residues_.size() + 2); }
  std::size_t output_size() const { return residues_.size() + 1; }
  std::size_t symbol_count() const { return residues_.size() + 3; }

  bool is_residue(Token t) const { return t < residues_.size(); }
  bool is_hydrophobic(Token t) const { return is_residue(t) && hydrophobic_[t]; }
  std::size_t hydrophobic_count() const {
    return static_cast<std::size_t>(std::count(hydrophobic_.begin(), hydrophobic_.end(), true));
  }

  char symbol(Token t) const {
    if (is_residue(t)) return residues_[t];
    if (t == end_token()) return end_symbol_;
    if (t == mask_token()) return mask_symbol_;
    throw std::out_of_range("vocabulary: token has no printable symbol");
  }

  std::optional<Token> token(char c) const {
    const auto pos = residues_.find(c);
    if (pos != std::string::npos) return static_cast<Token>(pos);
    if (c == end_symbol_) return end_token();
    return std::nullopt;
  }

  char mask_symbol() const { return mask_symbol_; }
  const std::string& residues() const { return residues_; }

 private:
  std::string residues_;
  std::vector<bool> hydrophobic_;
  char end_symbol_;
  char mask_symbol_;
};

struct TokenSequence {
  std::vector<Token> tokens;

  std::size_t size() const { return tokens.size(); }
  auto operator<=>(const TokenSequence&) const = default;
};

struct TokenSequenceHash {
  std::size_t operator()(const TokenSequence& s) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (Token t : s.tokens) {
      h ^= t;
      h *= 1099511628211ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

/// A template where std::nullopt marks a masked slot.
struct QueryTemplate {
  std::vector<std::optional<Token>> positions;

  std::size_t length() const { return positions.size(); }
  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(positions.begin(), positions.end(), std::nullopt));
  }
  bool operator==(const QueryTemplate&) const = default;
};

inline constexpr std::size_t kMaxMasked = 4;
inline constexpr std::size_t kMaxFillLength = 4;

inline void validate_query(const QueryTemplate& q, const Vocabulary& vocab) {
  const auto masked = q.masked_count();
  if (masked < 1 || masked > kMaxMasked)
    throw std::invalid_argument("query: masked count must be in [1, 4]");
  if (masked >= q.length()) throw std::invalid_argument("query: needs at least one fixed residue");
  for (const auto& p : q.positions)
    if (p && !vocab.is_residue(*p)) throw std::invalid_argument("query: fixed entry is not a residue");
}

/// Per-slot emitted token streams. A slot may end with the terminator token;
/// the generator records fills exactly as emitted.
struct FillProposal {
  std::vector<std::vector<Token>> slot_fills;
  bool operator==(const FillProposal&) const = default;
};

enum class AssemblyFailure { none, slot_count_mismatch, empty_fill, fill_too_long, foreign_symbol };

struct AssemblyResult {
  std::optional<TokenSequence> sequence;
  AssemblyFailure failure = AssemblyFailure::none;

  bool valid() const { return sequence.has_value(); }
};

inline AssemblyResult assemble(const Vocabulary& vocab, const QueryTemplate& query,
                               const FillProposal& proposal,
                               std::size_t max_fill_length = kMaxFillLength) {
  if (proposal.slot_fills.size() != query.masked_count())
    return {std::nullopt, AssemblyFailure::slot_count_mismatch};
  TokenSequence out;
  out.tokens.reserve(query.length() + proposal.slot_fills.size() * max_fill_length);
  std::size_t slot = 0;
  for (const auto& p : query.positions) {
    if (p) {
      out.tokens.push_back(*p);
      continue;
    }
    std::span<const Token> fill = proposal.slot_fills[slot++];
    if (!fill.empty() && fill.back() == vocab.end_token()) fill = fill.first(fill.size() - 1);
    if (fill.empty()) return {std::nullopt, AssemblyFailure::empty_fill};
    if (fill.size() > max_fill_length) return {std::nullopt, AssemblyFailure::fill_too_long};
    for (Token t : fill) {
      if (!vocab.is_residue(t)) return {std::nullopt, AssemblyFailure::foreign_symbol};
      out.tokens.push_back(t);
    }
  }
  return {std::move(out), AssemblyFailure::none};
}

/// Masks each [start, start+length) span of `seq` into one slot and returns the
/// template together with the fills (terminator appended) that rebuild `seq`.
inline std::pair<QueryTemplate, FillProposal> mask_spans(
    const Vocabulary& vocab, const TokenSequence& seq,
    std::vector<std::pair<std::size_t, std::size_t>> spans) {
  std::sort(spans.begin(), spans.end());
  QueryTemplate q;
  FillProposal fills;
  std::size_t i = 0;
  for (const auto& [start, len] : spans) {
    if (start < i || len == 0 || start + len > seq.size())
      throw std::invalid_argument("mask_spans: spans must be nonempty, in range and disjoint");
    for (; i < start; ++i) q.positions.emplace_back(seq.tokens[i]);
    q.positions.emplace_back(std::nullopt);
    std::vector<Token> fill(seq.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                            seq.tokens.begin() + static_cast<std::ptrdiff_t>(start + len));
    fill.push_back(vocab.end_token());
    fills.slot_fills.push_back(std::move(fill));
    i = start + len;
  }
  for (; i < seq.size(); ++i) q.positions.emplace_back(seq.tokens[i]);
  return {std::move(q), std::move(fills)};
}

// ---------------------------------------------------------------------------
// Ground truth

/// Label 1 iff the hydrophobic fraction lies in [0.4, 0.7] and the sequence has
/// at most 10 residues. Evaluated in integers so the window edges are exact.
inline int oracle_label(const Vocabulary& vocab, const TokenSequence& seq) {
  const std::size_t n = seq.size();
  if (n == 0) return 0;
  const auto h = static_cast<std::size_t>(
      std::count_if(seq.tokens.begin(), seq.tokens.end(),
                    [&](Token t) { return vocab.is_hydrophobic(t); }));
  return (10 * h >= 4 * n && 10 * h <= 7 * n && n <= 10) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Fingerprint

inline constexpr std::size_t kFingerprintBits = 2048;

struct CountFingerprint {
  std::vector<std::uint16_t> buckets = std::vector<std::uint16_t>(kFingerprintBits, 0);

  std::size_t size() const { return buckets.size(); }
  std::uint16_t operator[](std::size_t i) const { return buckets[i]; }
  bool operator==(const CountFingerprint&) const = default;
};

/// 64-bit FNV-1a over the two token ordinals of a bigram.
inline constexpr std::uint64_t bigram_hash(Token first, Token second) {
  std::uint64_t h = 14695981039346656037ULL;
  h ^= first;
  h *= 1099511628211ULL;
  h ^= second;
  h *= 1099511628211ULL;
  return h;
}

inline constexpr std::size_t bigram_bucket(Token first, Token second) {
  return static_cast<std::size_t>(bigram_hash(first, second) % kFingerprintBits);
}

inline CountFingerprint fingerprint(const TokenSequence& seq) {
  CountFingerprint fp;
  for (std::size_t i = 1; i < seq.size(); ++i)
    ++fp.buckets[bigram_bucket(seq.tokens[i - 1], seq.tokens[i])];
  return fp;
}

// ---------------------------------------------------------------------------
// Datasets and queries

enum class Split { train, calibration, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::calibration: return "calibration";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "calibration") return Split::calibration;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split tag: " + std::string(s));
}

struct LabeledRecord {
  TokenSequence sequence;
  int label = 0;
  Split split = Split::train;
  bool operator==(const LabeledRecord&) const = default;
};

struct LabeledDataset {
  std::vector<LabeledRecord> records;

  std::vector<LabeledRecord> subset(Split s) const {
    std::vector<LabeledRecord> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(r);
    return out;
  }
  bool operator==(const LabeledDataset&) const = default;
};

struct LengthDistribution {
  std::vector<std::pair<std::size_t, double>> weights;

  /// Lengths 6, 7 and 10 weighted 40/30/30.
  static LengthDistribution standard() { return {{{6, 40.0}, {7, 30.0}, {10, 30.0}}}; }

  std::size_t draw(Rng& rng) const {
    double total = 0.0;
    for (const auto& [len, w] : weights) total += w;
    double u = uniform01(rng) * total;
    for (const auto& [len, w] : weights) {
      if (u < w) return len;
      u -= w;
    }
    return weights.back().first;
  }
};

inline TokenSequence random_sequence(const Vocabulary& vocab, std::size_t length, Rng& rng) {
  TokenSequence s;
  s.tokens.resize(length);
  for (auto& t : s.tokens) t = static_cast<Token>(uniform_index(rng, vocab.residue_count()));
  return s;
}

/// Number of distinct sequences reachable under `dist`, saturating at `cap`.
inline std::size_t distinct_sequences(const Vocabulary& vocab, const LengthDistribution& dist,
                                      std::size_t cap) {
  std::size_t total = 0;
  for (const auto& [len, w] : dist.weights) {
    if (w <= 0.0) continue;
    std::size_t count = 1;
    for (std::size_t i = 0; i < len && count < cap; ++i) count *= vocab.residue_count();
    total += std::min(count, cap);
    if (total >= cap) return cap;
  }
  return total;
}

/// `n` unique random sequences labelled by the oracle, each label flipped with
/// probability `noise_rate`; the last tenth (rounded) is tagged as test.
inline LabeledDataset make_dataset(const Vocabulary& vocab, std::size_t n,
                                   const LengthDistribution& dist, double noise_rate,
                                   std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("make_dataset: n must be >= 1");
  if (dist.weights.empty()) throw std::invalid_argument("make_dataset: empty length distribution");
  if (noise_rate < 0.0 || noise_rate > 1.0) throw std::invalid_argument("make_dataset: bad noise rate");
  if (n > distinct_sequences(vocab, dist, n + 1))
    throw std::invalid_argument("make_dataset: n exceeds the number of distinct sequences");

  Rng rng = make_rng(seed, 0);
  Rng noise = make_rng(seed, 1);
  std::unordered_set<TokenSequence, TokenSequenceHash> seen;
  LabeledDataset ds;
  ds.records.reserve(n);
  const std::size_t n_test = (n + 5) / 10;
  while (ds.records.size() < n) {
    auto seq = random_sequence(vocab, dist.draw(rng), rng);
    if (!seen.insert(seq).second) continue;
    int label = oracle_label(vocab, seq);
    if (uniform01(noise) < noise_rate) label = 1 - label;
    const Split split = ds.records.size() + n_test >= n ? Split::test : Split::train;
    ds.records.push_back({std::move(seq), label, split});
  }
  return ds;
}

inline QueryTemplate random_query(const Vocabulary& vocab, std::size_t length,
                                  std::size_t max_masked, Rng& rng) {
  const auto seq = random_sequence(vocab, length, rng);
  const std::size_t upper = std::min(max_masked, length - 1);
  const std::size_t masked = 1 + uniform_index(rng, upper);
  std::vector<std::size_t> idx(length);
  for (std::size_t i = 0; i < length; ++i) idx[i] = i;
  shuffle(idx.begin(), idx.end(), rng);
  QueryTemplate q;
  for (Token t : seq.tokens) q.positions.emplace_back(t);
  for (std::size_t i = 0; i < masked; ++i) q.positions[idx[i]] = std::nullopt;
  return q;
}

inline std::vector<QueryTemplate> make_queries(const Vocabulary& vocab, std::size_t n,
                                               const std::vector<std::size_t>& lengths,
                                               std::size_t max_masked, std::uint64_t seed) {
  if (lengths.empty()) throw std::invalid_argument("make_queries: no lengths given");
  if (max_masked < 1 || max_masked > kMaxMasked)
    throw std::invalid_argument("make_queries: max_masked must be in [1, 4]");
  for (auto len : lengths)
    if (len < 6 || len > 12) throw std::invalid_argument("make_queries: lengths must lie in [6, 12]");
  Rng rng = make_rng(seed, 2);
  std::vector<QueryTemplate> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(random_query(vocab, lengths[uniform_index(rng, lengths.size())], max_masked, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Text forms and CSV files

inline std::string to_string(const Vocabulary& vocab, const TokenSequence& s) {
  std::string out;
  for (Token t : s.tokens) out.push_back(vocab.symbol(t));
  return out;
}

inline std::string to_string(const Vocabulary& vocab, const QueryTemplate& q) {
  std::string out;
  for (const auto& p : q.positions) out.push_back(p ? vocab.symbol(*p) : vocab.mask_symbol());
  return out;
}

inline TokenSequence parse_sequence(const Vocabulary& vocab, std::string_view text) {
  TokenSequence s;
  for (char c : text) {
    const auto t = vocab.token(c);
    if (!t || !vocab.is_residue(*t))
      throw std::invalid_argument("sequence contains a non-residue symbol: " + std::string(text));
    s.tokens.push_back(*t);
  }
  return s;
}

inline QueryTemplate parse_query(const Vocabulary& vocab, std::string_view text) {
  QueryTemplate q;
  for (char c : text) {
    if (c == vocab.mask_symbol()) {
      q.positions.emplace_back(std::nullopt);
      continue;
    }
    const auto t = vocab.token(c);
    if (!t || !vocab.is_residue(*t))
      throw std::invalid_argument("query contains a non-residue symbol: " + std::string(text));
    q.positions.emplace_back(*t);
  }
  validate_query(q, vocab);
  return q;
}

namespace detail {

inline std::string trim_line(std::string line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n' || line.back() == ' '))
    line.pop_back();
  return line;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline void write_dataset_csv(std::ostream& out, const Vocabulary& vocab, const LabeledDataset& ds) {
  out << "sequence,label,split\n";
  for (const auto& r : ds.records)
    out << to_string(vocab, r.sequence) << ',' << r.label << ',' << split_name(r.split) << '\n';
}

inline LabeledDataset read_dataset_csv(std::istream& in, const Vocabulary& vocab) {
  std::string line;
  if (!std::getline(in, line) || detail::trim_line(line) != "sequence,label,split")
    throw std::runtime_error("dataset csv: expected header 'sequence,label,split'");
  LabeledDataset ds;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim_line(line);
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 3) throw std::runtime_error("dataset csv: bad row at line " + std::to_string(lineno));
    if (f[1] != "0" && f[1] != "1")
      throw std::runtime_error("dataset csv: label must be 0 or 1 at line " + std::to_string(lineno));
    ds.records.push_back({parse_sequence(vocab, f[0]), f[1] == "1" ? 1 : 0, parse_split(f[2])});
  }
  return ds;
}

inline void write_queries_csv(std::ostream& out, const Vocabulary& vocab,
                              const std::vector<QueryTemplate>& queries) {
  out << "template\n";
  for (const auto& q : queries) out << to_string(vocab, q) << '\n';
}

inline std::vector<QueryTemplate> read_queries_csv(std::istream& in, const Vocabulary& vocab) {
  std::string line;
  if (!std::getline(in, line) || detail::trim_line(line) != "template")
    throw std::runtime_error("query csv: expected header 'template'");
  std::vector<QueryTemplate> out;
  while (std::getline(in, line)) {
    line = detail::trim_line(line);
    if (!line.empty()) out.push_back(parse_query(vocab, line));
  }
  return out;
}

}  // namespace cprl
