#pragma once

// Entropy and Jensen-Shannon divergence, natural log throughout.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>

#include "knnlm/common.hpp"

namespace knnlm {

/// H(p) = -sum p_i ln p_i with 0 ln 0 = 0.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return std::max(h, 0.0);
}

/// D_JS(p, q) = 1/2 KL(p || m) + 1/2 KL(q || m), m = (p + q) / 2.
///
/// Each coordinate's contribution is symmetric in (p_i, q_i) and terms are
/// summed in index order, so js_divergence(p, q) == js_divergence(q, p)
/// bit for bit. Clamped to [0, ln 2] against rounding.
inline double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("js_divergence: dimension mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p[i], b = q[i];
    const double m = 0.5 * (a + b);
    if (m <= 0.0) continue;
    const double ta = a > 0.0 ? a * std::log(a / m) : 0.0;
    const double tb = b > 0.0 ? b * std::log(b / m) : 0.0;
    d += 0.5 * (ta + tb);
  }
  return std::clamp(d, 0.0, std::numbers::ln2);
}

}  // namespace knnlm
