#pragma once

// Retrieval distribution from neighbor distances and its linear
// interpolation with the base LM distribution:
//
//   P_knn(w)  proportional to  sum over neighbors with value w of exp(-d / tau)
//   P'(w)     = lambda * P_knn(w) + (1 - lambda) * P_lm(w)

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "knnlm/datastore.hpp"
#include "knnlm/distribution.hpp"

namespace knnlm {

struct InterpConfig {
  double lambda = 0.25;
  double tau = 1.0;
  std::size_t k = 1024;
  DistanceMode distance = DistanceMode::squared;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("lambda must be in [0, 1]");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be positive");
    if (k < 1) throw InvalidArgument("k must be >= 1");
  }
};

/// Softmax over negative neighbor distances, aggregated by neighbor value.
/// Weights are shifted by the smallest distance before exponentiating; if
/// they still all vanish (infinite distances), every neighbor gets weight 1.
inline NextTokenDistribution knn_distribution(std::span<const Neighbor> neighbors, double tau, std::size_t vocab_size) {
  if (neighbors.empty()) throw InvalidArgument("knn_distribution: empty neighbor list");
  if (!(tau > 0.0)) throw InvalidArgument("knn_distribution: tau must be positive");
  double dmin = INFINITY;
  for (const auto& n : neighbors) {
    if (n.value >= vocab_size) throw InvalidArgument("knn_distribution: neighbor value outside vocabulary");
    dmin = std::min(dmin, n.distance);
  }
  std::vector<double> p(vocab_size, 0.0);
  double total = 0.0;
  if (std::isfinite(dmin)) {
    for (const auto& n : neighbors) {
      const double w = std::exp(-(n.distance - dmin) / tau);
      p[n.value] += w;
      total += w;
    }
  }
  if (!(total > 0.0) || !std::isfinite(total)) {
    std::fill(p.begin(), p.end(), 0.0);
    for (const auto& n : neighbors) p[n.value] += 1.0;
    total = static_cast<double>(neighbors.size());
  }
  for (double& x : p) x /= total;
  return NextTokenDistribution(std::move(p));
}

inline NextTokenDistribution interpolate(const NextTokenDistribution& p_knn, const NextTokenDistribution& p_lm,
                                         double lambda) {
  if (p_knn.size() != p_lm.size()) throw InvalidArgument("interpolate: dimension mismatch");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("interpolate: lambda must be in [0, 1]");
  std::vector<double> out(p_lm.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * p_knn.probs[i] + (1.0 - lambda) * p_lm.probs[i];
  return NextTokenDistribution(std::move(out));
}

}  // namespace knnlm
