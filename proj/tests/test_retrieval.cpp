#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "knnlm/datastore.hpp"
#include "knnlm/ivf.hpp"
#include "support/synthetic.hpp"

using namespace knnlm;
using namespace knnlm::fixtures;

namespace {

// Full sort of every (distance, index) pair.
std::vector<std::pair<double, std::uint64_t>> brute_force(const Datastore& ds, const std::vector<float>& q) {
  std::vector<std::pair<double, std::uint64_t>> all;
  for (std::size_t i = 0; i < ds.count(); ++i) {
    double d = 0;
    for (std::size_t j = 0; j < ds.dim(); ++j) {
      const double diff = double(ds.key(i)[j]) - double(q[j]);
      d += diff * diff;
    }
    all.emplace_back(d, i);
  }
  std::sort(all.begin(), all.end());
  return all;
}

std::string temp_path(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

ModelShape small_shape() {
  ModelShape s;
  s.vocab_size = 17;
  s.n_ctx = 3;
  s.d_emb = 4;
  s.d_h = 6;
  return s;
}

}  // namespace

TEST(Datastore, BuildOneEntryPerTokenWithForwardKeys) {
  const auto p = random_model<float>(small_shape(), 3);
  const std::vector<TokenId> corpus = {2, 5, 16, 0, 1, 3, 3, 9, 12, 4};
  const auto ds = build_datastore(p, corpus);
  ASSERT_EQ(ds.count(), 10u);
  for (std::size_t t = 0; t < corpus.size(); ++t) {
    EXPECT_EQ(ds.value(t), corpus[t]);
    const auto fwd = forward(p, context_window(corpus, t, 3));
    const auto key = ds.key(t);
    ASSERT_TRUE(std::equal(key.begin(), key.end(), fwd.context.begin())) << t;
  }
  EXPECT_THROW(build_datastore(p, std::vector<TokenId>{}), InvalidArgument);
  EXPECT_THROW(build_datastore(p, std::vector<TokenId>{17}), InvalidArgument);
}

TEST(QueryExact, SelfMatchAndTruncation) {
  Rng rng(1);
  const auto ds = uniform_datastore(50, 8, 20, rng);
  const std::vector<float> q(ds.key(7).begin(), ds.key(7).end());
  const auto r = query_exact(ds, q, 5);
  EXPECT_EQ(r[0].index, 7u);
  EXPECT_EQ(r[0].distance, 0.0);
  EXPECT_EQ(r[0].value, ds.value(7));
  EXPECT_EQ(query_exact(ds, q, 500).size(), 50u);
  EXPECT_THROW(query_exact(ds, q, 0), InvalidArgument);
  EXPECT_THROW(query_exact(ds, std::vector<float>(3), 1), InvalidArgument);
}

TEST(QueryExact, MatchesFullSortOracle) {
  for (std::size_t n : {1000u, 10000u}) {
    Rng rng(n);
    const auto ds = uniform_datastore(n, 16, 100, rng);
    for (std::size_t k : {1u, 32u, 1024u}) {
      for (int trial = 0; trial < 3; ++trial) {
        const auto q = uniform_vector(16, rng);
        const auto oracle = brute_force(ds, q);
        const auto got = query_exact(ds, q, k);
        ASSERT_EQ(got.size(), std::min(k, n));
        for (std::size_t i = 0; i < got.size(); ++i) {
          ASSERT_EQ(got[i].index, oracle[i].second);
          ASSERT_NEAR(got[i].distance, oracle[i].first, 1e-9 * std::max(1.0, oracle[i].first));
        }
      }
    }
  }
}

TEST(QueryExact, DuplicatedKeysTieBreakByIndex) {
  Rng rng(5);
  std::vector<float> keys;
  std::vector<TokenId> values;
  const auto base = uniform_vector(4, rng);
  for (int i = 0; i < 200; ++i) {
    // Every key appears four times: three exact duplicates in a row.
    const auto v = (i % 4 == 0) ? uniform_vector(4, rng) : std::vector<float>(keys.end() - 4, keys.end());
    keys.insert(keys.end(), v.begin(), v.end());
    values.push_back(static_cast<TokenId>(i));
  }
  const Datastore ds(4, keys, values);
  for (std::size_t k : {1u, 3u, 32u, 150u}) {
    const auto got = query_exact(ds, base, k);
    const auto oracle = brute_force(ds, base);
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_EQ(got[i].index, oracle[i].second);
  }
}

TEST(QueryExact, PlainDistanceIsRootOfSquared) {
  Rng rng(2);
  const auto ds = uniform_datastore(100, 5, 10, rng);
  const auto q = uniform_vector(5, rng);
  const auto sq = query_exact(ds, q, 10, DistanceMode::squared);
  const auto pl = query_exact(ds, q, 10, DistanceMode::plain);
  for (std::size_t i = 0; i < sq.size(); ++i) {
    EXPECT_EQ(sq[i].index, pl[i].index);
    EXPECT_DOUBLE_EQ(pl[i].distance, std::sqrt(sq[i].distance));
  }
  EXPECT_EQ(parse_distance_mode("plain"), DistanceMode::plain);
  EXPECT_THROW(parse_distance_mode("cosine"), InvalidArgument);
}

TEST(DatastoreFile, RoundTripSizeAndCorruption) {
  Rng rng(3);
  const auto ds = uniform_datastore(123, 7, 50, rng);
  const auto path = temp_path("knnlm_ds_test.bin");
  save_datastore(ds, path);
  // magic 4 + version 4 + count 8 + dim 4, then keys and values.
  EXPECT_EQ(std::filesystem::file_size(path), 20u + 4u * 123 * 7 + 4u * 123);
  EXPECT_EQ(datastore_file_size(123, 7), std::filesystem::file_size(path));
  EXPECT_EQ(load_datastore(path), ds);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint64_t bogus = 124;
    f.write(reinterpret_cast<const char*>(&bogus), 8);
  }
  EXPECT_THROW(load_datastore(path), FormatError);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("ABCD", 4);
  }
  EXPECT_THROW(load_datastore(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Index, SingleClusterEqualsExact) {
  Rng rng(4);
  const auto ds = uniform_datastore(300, 6, 20, rng);
  IndexBuildOptions opt;
  opt.n_clusters = 1;
  const auto idx = build_index(ds, opt);
  ASSERT_EQ(idx.lists.size(), 1u);
  EXPECT_EQ(idx.lists[0].size(), 300u);
  for (int t = 0; t < 10; ++t) {
    const auto q = uniform_vector(6, rng);
    EXPECT_EQ(query_approx(idx, ds, q, 20, 1), query_exact(ds, q, 20));
  }
}

TEST(Index, SeparatedBlobsGetOneListEach) {
  Rng rng(6);
  const BlobSource src(8, 3, 50.0, rng);
  std::vector<float> keys;
  std::vector<TokenId> values;
  std::vector<std::size_t> labels;
  for (int i = 0; i < 600; ++i) {
    std::size_t b = 0;
    const auto v = src.sample(rng, &b);
    keys.insert(keys.end(), v.begin(), v.end());
    values.push_back(0);
    labels.push_back(b);
  }
  const Datastore ds(8, keys, values);
  IndexBuildOptions opt;
  opt.n_clusters = 3;
  opt.seed = 1;
  const auto idx = build_index(ds, opt);
  std::set<std::size_t> seen;
  for (const auto& list : idx.lists) {
    ASSERT_FALSE(list.empty());
    const auto label = labels[list[0]];
    EXPECT_TRUE(seen.insert(label).second);
    for (auto i : list) EXPECT_EQ(labels[i], label);
  }
  EXPECT_EQ(build_index(ds, opt), idx);
}

TEST(Index, FullProbeEqualsExactAndDistancesAreExact) {
  Rng rng(7);
  const auto ds = uniform_datastore(2000, 12, 30, rng);
  IndexBuildOptions opt;
  opt.n_clusters = 16;
  opt.seed = 3;
  const auto idx = build_index(ds, opt);
  idx.validate(ds);
  for (int t = 0; t < 10; ++t) {
    const auto q = uniform_vector(12, rng);
    EXPECT_EQ(query_approx(idx, ds, q, 64, 16), query_exact(ds, q, 64));
    const auto oracle = brute_force(ds, q);
    std::vector<double> exact_dist(ds.count());
    for (const auto& [d, i] : oracle) exact_dist[i] = d;
    for (const auto& n : query_approx(idx, ds, q, 64, 2)) EXPECT_NEAR(n.distance, exact_dist[n.index], 1e-9);
  }
}

TEST(Index, PackedListsGiveIdenticalResults) {
  Rng rng(10);
  const auto ds = uniform_datastore(3000, 16, 40, rng);
  IndexBuildOptions opt;
  opt.n_clusters = 12;
  const auto idx = build_index(ds, opt);
  const PackedLists packed(idx, ds);
  for (int t = 0; t < 20; ++t) {
    const auto q = uniform_vector(16, rng);
    for (std::size_t probe : {1u, 3u, 12u})
      for (auto mode : {DistanceMode::squared, DistanceMode::plain})
        EXPECT_EQ(query_approx(packed, q, 50, probe, mode), query_approx(idx, ds, q, 50, probe, mode));
  }
  const Retriever with{&ds, &idx, 3, &packed}, without{&ds, &idx, 3};
  const auto q = uniform_vector(16, rng);
  EXPECT_EQ(with.search(q, 10, DistanceMode::squared), without.search(q, 10, DistanceMode::squared));
}

TEST(Index, QueryAtCentroidProbesItsClusterFirst) {
  Rng rng(8);
  const auto ds = uniform_datastore(500, 4, 10, rng);
  IndexBuildOptions opt;
  opt.n_clusters = 8;
  const auto idx = build_index(ds, opt);
  for (std::uint32_t c = 0; c < idx.n_clusters; ++c) {
    const std::vector<float> q(idx.centroid(c).begin(), idx.centroid(c).end());
    EXPECT_EQ(probe_order(idx, q, 1)[0], c);
  }
}

TEST(Index, CalibratedRecallFloor) {
  Rng rng(kCalibSeed);
  const BlobSource src(kCalibDim, kCalibBlobs, kCalibSpread, rng);
  const auto ds = blob_datastore(src, kCalibEntries, 1000, rng);
  IndexBuildOptions opt;
  opt.n_clusters = kCalibClusters;
  opt.seed = kCalibSeed;
  const auto idx = build_index(ds, opt);
  double sum = 0;
  for (std::size_t q = 0; q < kCalibQueries; ++q) {
    const auto query = src.sample(rng);
    sum += recall_at_k(query_approx(idx, ds, query, kCalibK, kCalibProbe), query_exact(ds, query, kCalibK));
  }
  EXPECT_GE(sum / kCalibQueries, kIvfRecallFloor);
}

TEST(IndexFile, RoundTripAndValidation) {
  Rng rng(9);
  const auto ds = uniform_datastore(400, 5, 10, rng);
  IndexBuildOptions opt;
  opt.n_clusters = 10;
  opt.max_training_points = 100;
  const auto idx = build_index(ds, opt);
  std::size_t total = 0;
  for (const auto& l : idx.lists) total += l.size();
  EXPECT_EQ(total, 400u);
  const auto path = temp_path("knnlm_index_test.bin");
  save_index(idx, path);
  EXPECT_EQ(load_index(path), idx);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(load_index(path), FormatError);
  std::filesystem::remove(path);
  const auto other = uniform_datastore(401, 5, 10, rng);
  EXPECT_THROW(idx.validate(other), Error);
}

TEST(Recall, SetOverlap) {
  const std::vector<Neighbor> exact = {{0, 0, 1}, {0, 0, 2}, {0, 0, 3}, {0, 0, 4}};
  const std::vector<Neighbor> approx = {{0, 0, 2}, {0, 0, 9}, {0, 0, 4}, {0, 0, 1}};
  EXPECT_DOUBLE_EQ(recall_at_k(approx, exact), 0.75);
}
