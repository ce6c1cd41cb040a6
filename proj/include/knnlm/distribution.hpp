#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "knnlm/common.hpp"

namespace knnlm {

/// Normalized probability vector over the vocabulary, indexed by TokenId.
struct NextTokenDistribution {
  std::vector<double> probs;

  NextTokenDistribution() = default;
  explicit NextTokenDistribution(std::vector<double> p) : probs(std::move(p)) {}

  std::size_t size() const { return probs.size(); }
  double operator[](TokenId id) const { return probs[id]; }
  std::span<const double> view() const { return probs; }

  static NextTokenDistribution uniform(std::size_t n) {
    return NextTokenDistribution(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }
  static NextTokenDistribution one_hot(std::size_t n, TokenId id) {
    std::vector<double> p(n, 0.0);
    p.at(id) = 1.0;
    return NextTokenDistribution(std::move(p));
  }
};

inline double total_mass(std::span<const double> p) {
  double s = 0.0;
  for (double x : p) s += x;
  return s;
}

/// True when every entry is finite and non-negative and the mass is 1
/// within tol.
inline bool is_valid_distribution(std::span<const double> p, double tol = 1e-6) {
  if (p.empty()) return false;
  for (double x : p)
    if (!std::isfinite(x) || x < 0.0) return false;
  return std::abs(total_mass(p) - 1.0) <= tol;
}

inline void require_distribution(std::span<const double> p, const char* what, double tol = 1e-6) {
  if (!is_valid_distribution(p, tol))
    throw InvalidArgument(std::string(what) + ": not a valid probability distribution");
}

/// Max-shifted softmax; the output always sums to 1 up to rounding.
template <typename T>
NextTokenDistribution softmax(std::span<const T> logits) {
  std::vector<double> p(logits.size());
  double mx = -INFINITY;
  for (T x : logits) mx = std::max(mx, static_cast<double>(x));
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return NextTokenDistribution(std::move(p));
}

}  // namespace knnlm
