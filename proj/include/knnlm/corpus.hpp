#pragma once

// Whitespace tokenization, vocabulary construction and the prefix/suffix
// evaluation set.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "knnlm/common.hpp"

namespace knnlm {

inline constexpr TokenId kUnkId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<bos>";

namespace detail {

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

/// Calls fn(token) for each whitespace-separated token of text.
template <typename Fn>
void for_each_token(std::string_view text, Fn&& fn) {
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) fn(text.substr(i, j - i));
    i = j;
  }
}

}  // namespace detail

/// Closed word-level vocabulary. Ids 0 and 1 are reserved for the unknown
/// and beginning-of-stream tokens; real tokens follow in descending count.
class Vocab {
 public:
  Vocab() { reset_reserved(); }

  std::size_t size() const { return strings_.size(); }
  TokenId unk_id() const { return kUnkId; }
  TokenId bos_id() const { return kBosId; }

  const std::string& token(TokenId id) const { return strings_.at(id); }
  std::uint64_t count(TokenId id) const { return counts_.at(id); }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  TokenId id(std::string_view s) const {
    auto it = index_.find(std::string(s));
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view s) const { return index_.contains(std::string(s)); }

  /// Appends a real token; used by the builder and the loader.
  TokenId add(std::string s, std::uint64_t count) {
    if (s.empty() || std::any_of(s.begin(), s.end(), detail::is_space))
      throw InvalidArgument("vocab token must be non-empty and contain no whitespace");
    auto [it, inserted] = index_.emplace(s, static_cast<TokenId>(strings_.size()));
    if (!inserted) throw InvalidArgument("duplicate vocab token: " + s);
    strings_.push_back(std::move(s));
    counts_.push_back(count);
    return it->second;
  }

  void set_count(TokenId id, std::uint64_t c) { counts_.at(id) = c; }

  /// One `<token>\t<count>` line per id.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + path);
    for (std::size_t i = 0; i < strings_.size(); ++i) out << strings_[i] << '\t' << counts_[i] << '\n';
    if (!out) throw Error("write failed: " + path);
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open for reading: " + path);
    Vocab v;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError(path + ":" + std::to_string(lineno) + ": missing tab");
      std::string tok = line.substr(0, tab);
      std::uint64_t c = 0;
      try {
        c = std::stoull(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": bad count");
      }
      if (lineno == 1 || lineno == 2) {
        if (tok != (lineno == 1 ? kUnkToken : kBosToken))
          throw FormatError(path + ": reserved tokens must occupy ids 0 and 1");
        v.counts_[lineno - 1] = c;
        continue;
      }
      v.add(std::move(tok), c);
    }
    if (lineno < 2) throw FormatError(path + ": missing reserved tokens");
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.strings_ == b.strings_ && a.counts_ == b.counts_;
  }

 private:
  void reset_reserved() {
    strings_ = {std::string(kUnkToken), std::string(kBosToken)};
    counts_ = {0, 0};
    index_.clear();
    index_.emplace(std::string(kUnkToken), kUnkId);
    // A literal "<bos>" in text is not a stream boundary; it encodes to unk.
    index_.emplace(std::string(kBosToken), kUnkId);
  }

  std::vector<std::string> strings_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Counts whitespace tokens; tokens seen fewer than min_count times are
/// folded into unk. Ids are assigned by descending count, ties by first
/// occurrence.
inline Vocab build_vocab(std::string_view corpus_text, std::uint64_t min_count) {
  if (min_count < 1) throw InvalidArgument("build_vocab: min_count must be >= 1");
  struct Entry {
    std::uint64_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string_view, Entry> counts;
  std::size_t n = 0;
  detail::for_each_token(corpus_text, [&](std::string_view t) {
    auto [it, inserted] = counts.try_emplace(t, Entry{0, n});
    ++it->second.count;
    ++n;
  });
  if (n == 0) throw InvalidArgument("build_vocab: empty corpus");

  std::vector<std::pair<std::string_view, Entry>> order(counts.begin(), counts.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });

  Vocab v;
  std::uint64_t unk = 0;
  for (const auto& [tok, e] : order) {
    if (e.count < min_count || tok == kUnkToken || tok == kBosToken) {
      unk += e.count;
      continue;
    }
    v.add(std::string(tok), e.count);
  }
  v.set_count(kUnkId, unk);
  return v;
}

inline std::vector<TokenId> encode(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  detail::for_each_token(text, [&](std::string_view t) { ids.push_back(vocab.id(t)); });
  return ids;
}

inline std::string decode(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct EvalExample {
  std::vector<TokenId> prefix;
  std::vector<TokenId> gold_suffix;
  std::size_t source_offset = 0;

  friend bool operator==(const EvalExample&, const EvalExample&) = default;
};

struct EvalSetOptions {
  std::size_t n_examples = 1;
  std::size_t prefix_len = 100;
  std::size_t cont_len = 150;
  std::uint64_t seed = 0;
  /// When fewer non-overlapping windows exist than requested, draw
  /// independent offsets (with a warning) instead of failing.
  bool allow_overlap = false;
};

/// Draws evaluation windows at seeded uniform offsets. Without overlap the
/// free slack L - n*w is split into n+1 random gaps, so windows are disjoint
/// and returned in offset order.
inline std::vector<EvalExample> build_eval_set(std::span<const TokenId> split, const EvalSetOptions& opt) {
  const std::size_t w = opt.prefix_len + opt.cont_len;
  if (opt.n_examples < 1) throw InvalidArgument("build_eval_set: n_examples must be >= 1");
  if (opt.prefix_len < 1 || opt.cont_len < 1) throw InvalidArgument("build_eval_set: window lengths must be >= 1");
  if (split.size() < w)
    throw InvalidArgument("build_eval_set: split has " + std::to_string(split.size()) + " tokens, need at least " +
                          std::to_string(w));

  Rng rng(opt.seed);
  std::vector<std::size_t> offsets;
  const std::size_t capacity = split.size() / w;
  if (opt.n_examples <= capacity) {
    const std::size_t slack = split.size() - opt.n_examples * w;
    std::vector<std::size_t> cuts(opt.n_examples);
    for (auto& c : cuts) c = rng.uniform_index(slack + 1);
    std::sort(cuts.begin(), cuts.end());
    for (std::size_t i = 0; i < cuts.size(); ++i) offsets.push_back(cuts[i] + i * w);
  } else if (opt.allow_overlap) {
    std::cerr << "warning: " << opt.n_examples << " examples requested but only " << capacity
              << " disjoint windows fit; windows may overlap\n";
    for (std::size_t i = 0; i < opt.n_examples; ++i) offsets.push_back(rng.uniform_index(split.size() - w + 1));
  } else {
    throw InvalidArgument("build_eval_set: " + std::to_string(opt.n_examples) + " examples requested but only " +
                          std::to_string(capacity) + " non-overlapping windows fit");
  }

  std::vector<EvalExample> out;
  out.reserve(offsets.size());
  for (std::size_t off : offsets) {
    EvalExample ex;
    ex.source_offset = off;
    ex.prefix.assign(split.begin() + off, split.begin() + off + opt.prefix_len);
    ex.gold_suffix.assign(split.begin() + off + opt.prefix_len, split.begin() + off + w);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace knnlm
