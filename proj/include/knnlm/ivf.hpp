#pragma once

// Inverted-file approximate search: a k-means coarse quantizer whose
// n_probe nearest lists are scanned exactly at query time.

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "knnlm/binary_io.hpp"
#include "knnlm/common.hpp"
#include "knnlm/datastore.hpp"

namespace knnlm {

struct ApproxIndex {
  std::uint32_t dim = 0;
  std::uint32_t n_clusters = 0;
  std::vector<float> centroids;                   // n_clusters x dim
  std::vector<std::vector<std::uint64_t>> lists;  // ascending entry indices

  std::span<const float> centroid(std::size_t c) const {
    return std::span<const float>(centroids).subspan(c * dim, dim);
  }

  /// Every entry of ds appears in exactly one list.
  void validate(const Datastore& ds) const {
    if (dim != ds.dim()) throw InvalidArgument("index dimension does not match datastore");
    if (n_clusters < 1 || lists.size() != n_clusters || centroids.size() != std::size_t{n_clusters} * dim)
      throw InvalidArgument("index shape is inconsistent");
    std::vector<char> seen(ds.count(), 0);
    std::size_t total = 0;
    for (const auto& l : lists)
      for (auto i : l) {
        if (i >= ds.count() || seen[i]) throw InvalidArgument("index lists are not a partition of the datastore");
        seen[i] = 1;
        ++total;
      }
    if (total != ds.count()) throw InvalidArgument("index lists do not cover the datastore");
  }

  friend bool operator==(const ApproxIndex&, const ApproxIndex&) = default;
};

struct IndexBuildOptions {
  std::uint32_t n_clusters = 64;
  std::uint64_t seed = 0;
  std::uint32_t max_iterations = 25;
  /// k-means runs on a seeded sample of this many entries (0 = all); every
  /// entry is still assigned to its nearest centroid afterwards.
  std::size_t max_training_points = 0;
};

namespace detail {

inline std::uint32_t nearest_centroid(std::span<const float> centroids, std::uint32_t n, std::uint32_t dim,
                                      const float* x) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::uint32_t c = 0; c < n; ++c) {
    const double d = squared_l2(centroids.data() + std::size_t{c} * dim, x, dim);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace detail

/// Lloyd's k-means with k-means++ seeding (centroids start at sampled
/// entries), capped at max_iterations; stops early once assignments settle.
inline ApproxIndex build_index(const Datastore& ds, const IndexBuildOptions& opt) {
  if (opt.n_clusters < 1) throw InvalidArgument("build_index: n_clusters must be >= 1");
  if (opt.n_clusters > ds.count()) throw InvalidArgument("build_index: n_clusters exceeds datastore size");
  const std::uint32_t dim = ds.dim();
  const std::uint32_t nc = opt.n_clusters;
  Rng rng(opt.seed);

  std::vector<std::uint64_t> sample(ds.count());
  std::iota(sample.begin(), sample.end(), std::uint64_t{0});
  if (opt.max_training_points > 0 && opt.max_training_points < ds.count()) {
    const std::size_t m = std::max<std::size_t>(opt.max_training_points, nc);
    for (std::size_t i = 0; i < m; ++i) std::swap(sample[i], sample[i + rng.uniform_index(sample.size() - i)]);
    sample.resize(m);
    std::sort(sample.begin(), sample.end());
  }
  const std::size_t n = sample.size();
  auto point = [&](std::size_t s) { return ds.key(sample[s]).data(); };

  ApproxIndex idx;
  idx.dim = dim;
  idx.n_clusters = nc;
  idx.centroids.resize(std::size_t{nc} * dim);

  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.uniform_index(n);
  for (std::uint32_t c = 0; c < nc; ++c) {
    std::copy(point(pick), point(pick) + dim, idx.centroids.begin() + std::size_t{c} * dim);
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      d2[s] = std::min(d2[s], squared_l2(point(s), idx.centroids.data() + std::size_t{c} * dim, dim));
      total += d2[s];
    }
    if (c + 1 == nc) break;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t s = 0; s < n; ++s) {
        u -= d2[s];
        if (u < 0.0) {
          pick = s;
          break;
        }
      }
    } else {
      pick = rng.uniform_index(n);  // all points coincide with chosen centroids
    }
  }

  std::vector<std::uint32_t> assign(n, std::numeric_limits<std::uint32_t>::max());
  std::vector<double> sums(std::size_t{nc} * dim);
  std::vector<std::size_t> sizes(nc);
  for (std::uint32_t it = 0; it < opt.max_iterations; ++it) {
    bool changed = false;
    for (std::size_t s = 0; s < n; ++s) {
      const auto c = detail::nearest_centroid(idx.centroids, nc, dim, point(s));
      changed = changed || c != assign[s];
      assign[s] = c;
    }
    if (!changed) break;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t s = 0; s < n; ++s) {
      double* acc = sums.data() + std::size_t{assign[s]} * dim;
      const float* x = point(s);
      for (std::uint32_t k = 0; k < dim; ++k) acc[k] += x[k];
      ++sizes[assign[s]];
    }
    for (std::uint32_t c = 0; c < nc; ++c) {
      if (sizes[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::uint32_t k = 0; k < dim; ++k)
        idx.centroids[std::size_t{c} * dim + k] =
            static_cast<float>(sums[std::size_t{c} * dim + k] / static_cast<double>(sizes[c]));
    }
  }

  idx.lists.assign(nc, {});
  for (std::size_t i = 0; i < ds.count(); ++i)
    idx.lists[detail::nearest_centroid(idx.centroids, nc, dim, ds.key(i).data())].push_back(i);
  return idx;
}

/// The n_probe clusters nearest to q, nearest first (ties to smaller id).
inline std::vector<std::uint32_t> probe_order(const ApproxIndex& idx, std::span<const float> q, std::size_t n_probe) {
  if (n_probe < 1 || n_probe > idx.n_clusters)
    throw InvalidArgument("n_probe must be in [1, n_clusters]; got " + std::to_string(n_probe));
  std::vector<std::pair<double, std::uint32_t>> d(idx.n_clusters);
  for (std::uint32_t c = 0; c < idx.n_clusters; ++c) d[c] = {squared_l2(idx.centroid(c).data(), q.data(), idx.dim), c};
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n_probe), d.end());
  std::vector<std::uint32_t> out(n_probe);
  for (std::size_t i = 0; i < n_probe; ++i) out[i] = d[i].second;
  return out;
}

/// Exact search restricted to the n_probe nearest lists. Reported distances
/// are true distances; only recall is approximate.
inline std::vector<Neighbor> query_approx(const ApproxIndex& idx, const Datastore& ds, std::span<const float> q,
                                          std::size_t k, std::size_t n_probe,
                                          DistanceMode mode = DistanceMode::squared) {
  detail::check_query(ds, q, k);
  if (idx.dim != ds.dim()) throw InvalidArgument("index dimension does not match datastore");
  std::vector<Neighbor> cand;
  for (auto c : probe_order(idx, q, n_probe))
    for (auto i : idx.lists[c]) cand.push_back(Neighbor{squared_l2(ds.key(i).data(), q.data(), ds.dim()), ds.value(i), i});
  return detail::select_top_k(std::move(cand), k, mode);
}

/// Keys and values copied into list order so a probe reads each list as one
/// contiguous block instead of gathering rows scattered across the store.
struct PackedLists {
  std::uint32_t dim = 0;
  std::vector<std::vector<float>> keys;
  std::vector<std::vector<TokenId>> values;
  ApproxIndex index;

  PackedLists(const ApproxIndex& idx, const Datastore& ds) : dim(ds.dim()), index(idx) {
    idx.validate(ds);
    keys.resize(idx.n_clusters);
    values.resize(idx.n_clusters);
    for (std::size_t c = 0; c < idx.n_clusters; ++c) {
      keys[c].reserve(idx.lists[c].size() * dim);
      for (auto i : idx.lists[c]) {
        const auto k = ds.key(i);
        keys[c].insert(keys[c].end(), k.begin(), k.end());
        values[c].push_back(ds.value(i));
      }
    }
  }
};

/// Same result as query_approx on the index and datastore the lists came from.
inline std::vector<Neighbor> query_approx(const PackedLists& packed, std::span<const float> q, std::size_t k,
                                          std::size_t n_probe, DistanceMode mode = DistanceMode::squared) {
  if (k < 1) throw InvalidArgument("query: k must be >= 1");
  if (q.size() != packed.dim)
    throw InvalidArgument("query dimension " + std::to_string(q.size()) + " != datastore dimension " +
                          std::to_string(packed.dim));
  const auto& idx = packed.index;
  const auto probes = probe_order(idx, q, n_probe);
  std::size_t total = 0;
  for (auto c : probes) total += idx.lists[c].size();
  std::vector<Neighbor> cand;
  cand.reserve(total);
  for (auto c : probes) {
    const float* key = packed.keys[c].data();
    for (std::size_t j = 0; j < idx.lists[c].size(); ++j, key += packed.dim)
      cand.push_back(Neighbor{squared_l2(key, q.data(), packed.dim), packed.values[c][j], idx.lists[c][j]});
  }
  return detail::select_top_k(std::move(cand), k, mode);
}

inline constexpr std::string_view kIndexMagic = "KNIX";
inline constexpr std::uint32_t kIndexVersion = 1;

/// magic "KNIX", version u32, n_clusters u32, dim u32, centroids float32,
/// then for each cluster: list length u64 followed by its entry indices u64.
inline void save_index(const ApproxIndex& idx, const std::string& path) {
  io::Writer w(path);
  w.magic(kIndexMagic);
  w.scalar<std::uint32_t>(kIndexVersion);
  w.scalar<std::uint32_t>(idx.n_clusters);
  w.scalar<std::uint32_t>(idx.dim);
  w.array<float>(idx.centroids);
  for (const auto& l : idx.lists) {
    w.scalar<std::uint64_t>(l.size());
    w.array<std::uint64_t>(l);
  }
  w.finish();
}

inline ApproxIndex load_index(const std::string& path) {
  io::Reader r(path);
  r.expect_magic(kIndexMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kIndexVersion) throw FormatError(path + ": unsupported index version " + std::to_string(version));
  ApproxIndex idx;
  idx.n_clusters = r.scalar<std::uint32_t>();
  idx.dim = r.scalar<std::uint32_t>();
  if (idx.n_clusters == 0 || idx.dim == 0) throw FormatError(path + ": empty index header");
  idx.centroids = r.array<float>(std::uint64_t{idx.n_clusters} * idx.dim);
  idx.lists.resize(idx.n_clusters);
  for (auto& l : idx.lists) l = r.array<std::uint64_t>(r.scalar<std::uint64_t>());
  r.expect_end();
  return idx;
}

inline double recall_at_k(std::span<const Neighbor> approx, std::span<const Neighbor> exact) {
  if (exact.empty()) return 1.0;
  std::vector<std::uint64_t> a, e;
  for (const auto& n : approx) a.push_back(n.index);
  for (const auto& n : exact) e.push_back(n.index);
  std::sort(a.begin(), a.end());
  std::sort(e.begin(), e.end());
  std::vector<std::uint64_t> both;
  std::set_intersection(a.begin(), a.end(), e.begin(), e.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(e.size());
}

/// Datastore search through an optional approximate index.
struct Retriever {
  const Datastore* datastore = nullptr;
  const ApproxIndex* index = nullptr;
  std::size_t n_probe = 8;
  const PackedLists* packed = nullptr;  // optional faster layout of index

  std::vector<Neighbor> search(std::span<const float> q, std::size_t k, DistanceMode mode) const {
    if (datastore == nullptr) throw InvalidArgument("retriever has no datastore");
    if (packed != nullptr) return query_approx(*packed, q, k, std::min<std::size_t>(n_probe, packed->index.n_clusters), mode);
    if (index != nullptr) return query_approx(*index, *datastore, q, k, std::min<std::size_t>(n_probe, index->n_clusters), mode);
    return query_exact(*datastore, q, k, mode);
  }
};

}  // namespace knnlm
