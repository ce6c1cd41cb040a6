#pragma once

// Token-level key/value datastore: one (context vector, next token) entry per
// corpus position, with exact Euclidean top-k search.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnlm/binary_io.hpp"
#include "knnlm/common.hpp"
#include "knnlm/reflm.hpp"

namespace knnlm {

enum class DistanceMode { squared, plain };

inline std::string_view to_string(DistanceMode m) { return m == DistanceMode::squared ? "squared" : "plain"; }

inline DistanceMode parse_distance_mode(std::string_view s) {
  if (s == "squared") return DistanceMode::squared;
  if (s == "plain") return DistanceMode::plain;
  throw InvalidArgument("unknown distance mode '" + std::string(s) + "' (expected squared or plain)");
}

struct Neighbor {
  double distance = 0.0;
  TokenId value = 0;
  std::uint64_t index = 0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Squared L2 distance with double accumulation in a fixed order. Eight
/// independent lanes let the compiler vectorize without reassociating.
inline double squared_l2(const float* a, const float* b, std::size_t dim) {
  double s[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= dim; i += 8)
    for (std::size_t j = 0; j < 8; ++j) {
      const double d = double(a[i + j]) - double(b[i + j]);
      s[j] += d * d;
    }
  for (; i < dim; ++i) {
    const double d = double(a[i]) - double(b[i]);
    s[0] += d * d;
  }
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

inline double reported_distance(double squared, DistanceMode mode) {
  return mode == DistanceMode::squared ? squared : std::sqrt(squared);
}

/// Immutable parallel arrays of keys (row-major, count x dim) and values.
class Datastore {
 public:
  Datastore() = default;

  Datastore(std::uint32_t dim, std::vector<float> keys, std::vector<TokenId> values)
      : dim_(dim), keys_(std::move(keys)), values_(std::move(values)) {
    if (dim_ == 0) throw InvalidArgument("datastore dimension must be positive");
    if (keys_.size() != values_.size() * dim_) throw InvalidArgument("datastore keys/values size mismatch");
    for (float x : keys_)
      if (!std::isfinite(x)) throw InvalidArgument("datastore key is not finite");
  }

  std::uint32_t dim() const { return dim_; }
  std::size_t count() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::span<const float> key(std::size_t i) const { return std::span<const float>(keys_).subspan(i * dim_, dim_); }
  TokenId value(std::size_t i) const { return values_[i]; }
  std::span<const float> keys() const { return keys_; }
  std::span<const TokenId> values() const { return values_; }

  friend bool operator==(const Datastore&, const Datastore&) = default;

 private:
  std::uint32_t dim_ = 0;
  std::vector<float> keys_;
  std::vector<TokenId> values_;
};

/// One entry per corpus position t: key = context vector of the bos-padded
/// window before t, value = corpus[t].
template <std::floating_point T>
Datastore build_datastore(const ModelParams<T>& params, std::span<const TokenId> corpus) {
  if (corpus.empty()) throw InvalidArgument("build_datastore: empty corpus");
  const std::uint32_t dim = params.shape.d_h;
  std::vector<float> keys;
  keys.reserve(corpus.size() * dim);
  std::vector<TokenId> values(corpus.begin(), corpus.end());
  Workspace<T> ws(params.shape);
  for (std::size_t t = 0; t < corpus.size(); ++t) {
    if (corpus[t] >= params.shape.vocab_size)
      throw InvalidArgument("build_datastore: token id " + std::to_string(corpus[t]) + " exceeds model vocabulary");
    const auto window = context_window(corpus, t, params.shape.n_ctx);
    for (T x : context_vector(params, window, ws)) keys.push_back(static_cast<float>(x));
  }
  return Datastore(dim, std::move(keys), std::move(values));
}

namespace detail {

inline bool neighbor_less(const Neighbor& a, const Neighbor& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
}

/// Keeps the k smallest (squared distance, index) candidates in ascending
/// order, converting distances to the requested mode at the end.
inline std::vector<Neighbor> select_top_k(std::vector<Neighbor> cand, std::size_t k, DistanceMode mode) {
  k = std::min(k, cand.size());
  if (k < cand.size()) {
    std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), neighbor_less);
    cand.resize(k);
  }
  std::sort(cand.begin(), cand.end(), neighbor_less);
  for (auto& n : cand) n.distance = reported_distance(n.distance, mode);
  return cand;
}

inline void check_query(const Datastore& ds, std::span<const float> q, std::size_t k) {
  if (ds.empty()) throw InvalidArgument("query on empty datastore");
  if (k < 1) throw InvalidArgument("query: k must be >= 1");
  if (q.size() != ds.dim())
    throw InvalidArgument("query dimension " + std::to_string(q.size()) + " != datastore dimension " +
                          std::to_string(ds.dim()));
}

}  // namespace detail

/// The min(k, count) nearest entries, ascending by distance then index.
inline std::vector<Neighbor> query_exact(const Datastore& ds, std::span<const float> q, std::size_t k,
                                         DistanceMode mode = DistanceMode::squared) {
  detail::check_query(ds, q, k);
  std::vector<Neighbor> cand(ds.count());
  for (std::size_t i = 0; i < ds.count(); ++i)
    cand[i] = Neighbor{squared_l2(ds.key(i).data(), q.data(), ds.dim()), ds.value(i), i};
  return detail::select_top_k(std::move(cand), k, mode);
}

inline constexpr std::string_view kDatastoreMagic = "KNDS";
inline constexpr std::uint32_t kDatastoreVersion = 1;

/// magic "KNDS", version u32, count u64, dim u32, keys float32 row-major,
/// values u32.
inline void save_datastore(const Datastore& ds, const std::string& path) {
  io::Writer w(path);
  w.magic(kDatastoreMagic);
  w.scalar<std::uint32_t>(kDatastoreVersion);
  w.scalar<std::uint64_t>(ds.count());
  w.scalar<std::uint32_t>(ds.dim());
  w.array<float>(ds.keys());
  w.array<TokenId>(ds.values());
  w.finish();
}

inline std::uint64_t datastore_file_size(std::uint64_t count, std::uint32_t dim) {
  return 4 + 4 + 8 + 4 + 4 * count * dim + 4 * count;
}

inline Datastore load_datastore(const std::string& path) {
  io::Reader r(path);
  r.expect_magic(kDatastoreMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kDatastoreVersion) throw FormatError(path + ": unsupported datastore version " + std::to_string(version));
  const auto count = r.scalar<std::uint64_t>();
  const auto dim = r.scalar<std::uint32_t>();
  if (dim == 0) throw FormatError(path + ": zero dimension");
  if (r.size() != datastore_file_size(count, dim)) throw FormatError(path + ": file size does not match header");
  auto keys = r.array<float>(count * dim);
  auto values = r.array<TokenId>(count);
  r.expect_end();
  try {
    return Datastore(dim, std::move(keys), std::move(values));
  } catch (const InvalidArgument& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace knnlm
