#pragma once

// Reference-free repetition and reference-based entity overlap metrics.

#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "knnlm/common.hpp"
#include "knnlm/corpus.hpp"

namespace knnlm {

/// 1 - distinct/total over unigrams; higher means more repetition.
inline double seq_rep_1(std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InvalidArgument("seq_rep_1: empty token sequence");
  const std::unordered_set<TokenId> distinct(tokens.begin(), tokens.end());
  // Repeats over total, rather than 1 - distinct/total, so exact fractions stay exact.
  return static_cast<double>(tokens.size() - distinct.size()) / static_cast<double>(tokens.size());
}

using EntitySet = std::set<std::string>;

inline bool starts_uppercase(std::string_view tok) { return !tok.empty() && tok[0] >= 'A' && tok[0] <= 'Z'; }

/// Maximal runs of consecutive whitespace tokens starting with an ASCII
/// uppercase letter, joined by single spaces. No sentence segmentation, so a
/// capitalized sentence-initial word forms its own run.
inline EntitySet extract_entities(std::string_view text) {
  EntitySet out;
  std::string run;
  auto flush = [&] {
    if (!run.empty()) out.insert(run);
    run.clear();
  };
  detail::for_each_token(text, [&](std::string_view tok) {
    if (starts_uppercase(tok)) {
      if (!run.empty()) run.push_back(' ');
      run.append(tok);
    } else {
      flush();
    }
  });
  flush();
  return out;
}

struct EntityScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool vacuous = false;  // both sets empty
  std::size_t n_common = 0;
  std::size_t n_generated = 0;
  std::size_t n_reference = 0;
};

/// Set-based F1. Both empty scores 1 (flagged vacuous); exactly one empty
/// scores 0.
inline EntityScore entity_f1(const EntitySet& generated, const EntitySet& reference) {
  EntityScore s;
  s.n_generated = generated.size();
  s.n_reference = reference.size();
  for (const auto& e : generated) s.n_common += reference.count(e);
  if (generated.empty() && reference.empty()) {
    s.precision = s.recall = s.f1 = 1.0;
    s.vacuous = true;
    return s;
  }
  if (generated.empty() || reference.empty()) return s;
  s.precision = static_cast<double>(s.n_common) / static_cast<double>(s.n_generated);
  s.recall = static_cast<double>(s.n_common) / static_cast<double>(s.n_reference);
  if (s.n_common > 0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

/// Corpus-pooled (micro) F1 over many example scores.
inline double pooled_entity_f1(std::span<const EntityScore> scores) {
  std::size_t common = 0, gen = 0, ref = 0;
  for (const auto& s : scores) {
    common += s.n_common;
    gen += s.n_generated;
    ref += s.n_reference;
  }
  if (gen == 0 && ref == 0) return 1.0;
  if (gen == 0 || ref == 0 || common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(gen);
  const double r = static_cast<double>(common) / static_cast<double>(ref);
  return 2.0 * p * r / (p + r);
}

}  // namespace knnlm
