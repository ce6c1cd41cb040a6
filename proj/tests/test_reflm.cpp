#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "knnlm/reflm.hpp"
#include "support/synthetic.hpp"

using namespace knnlm;
using knnlm::fixtures::random_model;
using knnlm::fixtures::random_tokens;

namespace {

// Straight-line forward pass, written independently of the library's
// kernels: returns (hidden, probs).
std::pair<std::vector<double>, std::vector<double>> scalar_forward(const ModelParams<double>& p,
                                                                   const std::vector<TokenId>& window) {
  const auto& s = p.shape;
  std::vector<double> x;
  for (TokenId w : window)
    for (std::uint32_t k = 0; k < s.d_emb; ++k) x.push_back(p.embedding[w * s.d_emb + k]);
  std::vector<double> h(s.d_h);
  for (std::uint32_t j = 0; j < s.d_h; ++j) {
    double a = p.hidden_b[j];
    for (std::size_t i = 0; i < x.size(); ++i) a += x[i] * p.hidden_w[i * s.d_h + j];
    h[j] = std::tanh(a);
  }
  std::vector<double> z(s.vocab_size);
  double zmax = -INFINITY;
  for (std::uint32_t v = 0; v < s.vocab_size; ++v) {
    double a = p.output_b[v];
    for (std::uint32_t j = 0; j < s.d_h; ++j) a += h[j] * p.output_w[j * s.vocab_size + v];
    z[v] = a;
    zmax = std::max(zmax, a);
  }
  double total = 0;
  for (auto& a : z) total += (a = std::exp(a - zmax));
  for (auto& a : z) a /= total;
  return {h, z};
}

ModelShape shape(std::uint32_t v, std::uint32_t n, std::uint32_t e, std::uint32_t h) {
  ModelShape s;
  s.vocab_size = v;
  s.n_ctx = n;
  s.d_emb = e;
  s.d_h = h;
  return s;
}

double max_relative_gradient_error(ModelParams<double> p, const std::vector<TokenId>& window, TokenId target,
                                   const std::vector<std::size_t>& coords) {
  auto analytic = loss_and_gradients(p, window, target).gradients;
  const double eps = 1e-4;
  double worst = 0.0;
  for (std::size_t c : coords) {
    const double orig = p.at(c);
    p.at(c) = orig + eps;
    const double up = loss_and_gradients(p, window, target).loss;
    p.at(c) = orig - eps;
    const double down = loss_and_gradients(p, window, target).loss;
    p.at(c) = orig;
    const double numeric = (up - down) / (2 * eps);
    const double a = analytic.at(c);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace

TEST(ContextWindow, PadsWithBos) {
  const std::vector<TokenId> toks = {5, 6, 7};
  EXPECT_EQ(context_window(toks, 0, 3), (std::vector<TokenId>{kBosId, kBosId, kBosId}));
  EXPECT_EQ(context_window(toks, 2, 3), (std::vector<TokenId>{kBosId, 5, 6}));
  EXPECT_EQ(context_window(toks, 3, 2), (std::vector<TokenId>{6, 7}));
}

TEST(Forward, ZeroParamsGiveUniform) {
  const auto p = ModelParams<float>::zeros(shape(7, 2, 3, 4));
  const auto r = forward(p, std::vector<TokenId>{1, 3});
  for (double x : r.dist.probs) EXPECT_DOUBLE_EQ(x, 1.0 / 7.0);
}

TEST(Forward, MatchesScalarLoopOracle) {
  const auto p = random_model<double>(shape(23, 4, 5, 6), 99);
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto window = random_tokens(4, 23, rng);
    const auto [h, probs] = scalar_forward(p, window);
    const auto r = forward(p, window);
    ASSERT_EQ(r.context.size(), h.size());
    for (std::size_t j = 0; j < h.size(); ++j) EXPECT_NEAR(r.context[j], h[j], 1e-12);
    for (std::size_t v = 0; v < probs.size(); ++v) EXPECT_NEAR(r.dist[v], probs[v], 1e-12);
    EXPECT_NEAR(total_mass(r.dist.probs), 1.0, 1e-12);
  }
}

TEST(Forward, DistributionNormalizedForLargeWeights) {
  const auto p = random_model<float>(shape(50, 3, 4, 8), 5, 30.0);
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto r = forward(p, random_tokens(3, 50, rng));
    EXPECT_TRUE(is_valid_distribution(r.dist.probs));
  }
}

TEST(Forward, RejectsBadWindow) {
  const auto p = ModelParams<float>::zeros(shape(5, 2, 2, 2));
  EXPECT_THROW(forward(p, std::vector<TokenId>{1}), InvalidArgument);
  EXPECT_THROW(forward(p, std::vector<TokenId>{1, 5}), InvalidArgument);
}

TEST(Gradients, UniformModelLossIsLogV) {
  const auto p = ModelParams<double>::zeros(shape(11, 2, 3, 4));
  EXPECT_NEAR(loss_and_gradients(p, std::vector<TokenId>{1, 2}, 4).loss, std::log(11.0), 1e-12);
}

TEST(Gradients, ConfidentModelLossNearZero) {
  auto p = ModelParams<double>::zeros(shape(5, 1, 1, 1));
  p.output_b[3] = 50.0;
  EXPECT_LT(loss_and_gradients(p, std::vector<TokenId>{2}, 3).loss, 1e-20);
}

TEST(Gradients, ToyModelMatchesFiniteDifferencesOnEveryCoordinate) {
  const auto s = shape(3, 1, 2, 2);
  ASSERT_EQ(s.parameter_count(), 21u);
  const auto p = random_model<double>(s, 12, 1.0);
  std::vector<std::size_t> all(s.parameter_count());
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_LT(max_relative_gradient_error(p, {2}, 1, all), 1e-4);
}

TEST(Gradients, RandomCoordinatesMatchFiniteDifferences) {
  const auto s = shape(20, 3, 4, 6);
  const auto p = random_model<double>(s, 31, 0.8);
  Rng rng(8);
  std::vector<std::size_t> coords;
  for (int i = 0; i < 200; ++i) coords.push_back(rng.uniform_index(s.parameter_count()));
  EXPECT_LT(max_relative_gradient_error(p, {4, 4, 17}, 9, coords), 1e-4);
}

TEST(Gradients, BatchEqualsSumOfSingleExamples) {
  const auto s = shape(30, 3, 4, 5);
  const auto p = random_model<double>(s, 2);
  Rng rng(3);
  const auto tokens = random_tokens(40, 30, rng);
  const std::vector<std::size_t> positions = {0, 1, 5, 5, 17, 39};
  auto expected = Gradients<double>::zeros(s);
  Workspace<double> ws(s);
  std::vector<double> expected_losses;
  for (auto t : positions)
    expected_losses.push_back(
        accumulate_gradients(p, context_window(tokens, t, s.n_ctx), tokens[t], ws, expected, 0.5));
  BatchWorkspace<double> bws(s, positions.size());
  auto got = Gradients<double>::zeros(s);
  got.output_b[0] = 123.0;  // must be overwritten
  const auto losses = batch_gradients(p, tokens, positions, bws, got, 0.5);
  for (std::size_t i = 0; i < positions.size(); ++i) EXPECT_NEAR(losses[i], expected_losses[i], 1e-12);
  for (std::size_t c = 0; c < s.parameter_count(); ++c) ASSERT_NEAR(got.at(c), expected.at(c), 1e-12) << c;
}

TEST(Perplexity, UniformModelGivesVocabSize) {
  const auto p = ModelParams<float>::zeros(shape(9, 2, 2, 2));
  EXPECT_NEAR(perplexity(p, std::vector<TokenId>{2, 3, 4, 5}), 9.0, 1e-9);
  EXPECT_THROW(perplexity(p, std::vector<TokenId>{}), InvalidArgument);
}

TEST(Perplexity, MatchesIndependentAccumulator) {
  const auto s = shape(40, 3, 4, 5);
  const auto p = random_model<double>(s, 77);
  Rng rng(4);
  const auto tokens = random_tokens(1000, 40, rng);
  double nll = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    std::vector<TokenId> window;
    for (std::size_t c = 0; c < 3; ++c) window.push_back(t + c < 3 ? kBosId : tokens[t + c - 3]);
    nll -= std::log(scalar_forward(p, window).second[tokens[t]]);
  }
  const double expected = std::exp(nll / 1000.0);
  EXPECT_NEAR(perplexity(p, tokens) / expected, 1.0, 1e-9);
}

namespace {

std::vector<TokenId> cycle(std::size_t n, std::size_t period) {
  std::vector<TokenId> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<TokenId>(2 + i % period);
  return out;
}

}  // namespace

TEST(Train, RepeatedPatternReachesLowPerplexity) {
  const auto corpus = cycle(500, 10);
  const auto held_out = cycle(120, 10);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 8;
  const auto r = train<float>(corpus, held_out, shape(12, 3, 8, 16), cfg, 5);
  EXPECT_TRUE(r.params.all_finite());
  EXPECT_LE(perplexity(r.params, held_out), 2.0);
  ASSERT_EQ(r.log.size(), 30u);
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
}

TEST(Train, SingleTokenCorpusApproachesOne) {
  const std::vector<TokenId> corpus(300, 2);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 10;
  const auto r = train<float>(corpus, {}, shape(4, 2, 4, 4), cfg, 1);
  EXPECT_LT(perplexity(r.params, std::vector<TokenId>(50, 2)), 1.05);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  const auto corpus = cycle(100, 4);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto s = shape(8, 2, 3, 3);
  std::vector<std::uint64_t> counts(8, 0);
  for (auto t : corpus) ++counts[t];
  EXPECT_EQ(train<float>(corpus, {}, s, cfg, 3).params, init_params<float>(s, 3, counts));
}

TEST(Train, SameSeedBitwiseIdentical) {
  Rng rng(6);
  const auto corpus = random_tokens(400, 15, rng);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 7;
  const auto s = shape(15, 3, 4, 5);
  const auto a = train<float>(corpus, corpus, s, cfg, 11);
  const auto b = train<float>(corpus, corpus, s, cfg, 11);
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, train<float>(corpus, corpus, s, cfg, 12).params);
}

TEST(Train, LearningRateHalvesOnPlateau) {
  Rng rng(9);
  const auto corpus = random_tokens(200, 10, rng);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.learning_rate = 5.0;  // large enough to overshoot
  const auto r = train<float>(corpus, random_tokens(100, 10, rng), shape(10, 2, 3, 3), cfg, 1);
  for (std::size_t e = 1; e < r.log.size(); ++e) {
    const bool improved = r.log[e - 1].valid_ppl < [&] {
      double best = INFINITY;
      for (std::size_t i = 0; i + 1 < e; ++i) best = std::min(best, r.log[i].valid_ppl);
      return best;
    }();
    EXPECT_DOUBLE_EQ(r.log[e].learning_rate, r.log[e - 1].learning_rate * (improved ? 1.0 : 0.5));
  }
}

TEST(ModelFile, RoundTripSizeAndCorruption) {
  const auto s = shape(13, 3, 4, 5);
  const auto p = random_model<float>(s, 4);
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "knnlm_model_test.bin").string();
  save_model(p, path);
  EXPECT_EQ(std::filesystem::file_size(path), 4 + 5 * 4 + 4 * s.parameter_count());
  EXPECT_EQ(load_model(path), p);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(load_model(path), FormatError);
  save_model(p, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  EXPECT_THROW(load_model(path), FormatError);
  std::filesystem::remove(path);
}
