#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "knnlm/cli.hpp"
#include "knnlm/config.hpp"
#include "support/synthetic.hpp"

using namespace knnlm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

struct RunResult {
  int code;
  std::string err;
};

RunResult run_cli(const std::string& args) {
  const auto err = fs::temp_directory_path() / "knnlm_cli_stderr.txt";
  const std::string cmd = std::string(KNNLM_CLI_PATH) + " " + args + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

// Text from a small stochastic grammar, so the model has something to learn.
std::string grammar_text(std::size_t sentences, std::uint64_t seed) {
  const std::vector<std::string> subj = {"the President", "Congress", "the nation", "our people", "America"};
  const std::vector<std::string> verb = {"must act", "will build", "can protect", "shall defend", "has met"};
  const std::vector<std::string> obj = {"the economy", "our schools", "the Union", "every family", "the future"};
  Rng rng(seed);
  std::string out;
  for (std::size_t i = 0; i < sentences; ++i) {
    out += subj[rng.uniform_index(subj.size())] + " " + verb[rng.uniform_index(verb.size())] + " " +
           obj[rng.uniform_index(obj.size())] + " .";
    out += (i % 10 == 9) ? "\n" : " ";
  }
  return out;
}

class CliPipeline : public ::testing::Test {
 protected:
  static inline fs::path dir;

  static std::string common() {
    return "--config " + (dir / "run.ini").string();
  }

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / "knnlm_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "train.txt") << grammar_text(1500, 1);
    std::ofstream(dir / "valid.txt") << grammar_text(100, 2);
    std::ofstream(dir / "test.txt") << grammar_text(300, 3);
    std::ofstream(dir / "run.ini") << "seed = 5\nthreads = 1\n[paths]\ntrain = " << (dir / "train.txt").string()
                                   << "\nvalid = " << (dir / "valid.txt").string()
                                   << "\ntest = " << (dir / "test.txt").string()
                                   << "\noutput_dir = " << (dir / "a").string()
                                   << "\n[vocab]\nmin_count = 1\n[model]\nn_ctx = 4\nd_emb = 8\nd_h = 16\nepochs = 2"
                                      "\nbatch_size = 16\n[retrieval]\nk = 64\nn_clusters = 8\nn_probe = 2"
                                      "\n[eval]\nn_examples = 3\nprefix_len = 20\ncont_len = 30\n";
    ASSERT_EQ(run_cli("train " + common()).code, 0);
    ASSERT_EQ(run_cli("build-datastore " + common()).code, 0);
    ASSERT_EQ(run_cli("generate " + common()).code, 0);
  }

  static fs::path a(const std::string& name) { return dir / "a" / name; }
};

}  // namespace

TEST(Config, ParsesSectionsCommentsAndRejectsDuplicates) {
  const auto m = parse_config_text("seed = 3 # trailing\n; comment\n[model]\nd_h = 32\n\n[retrieval]\nlambda=0.5\n");
  EXPECT_EQ(m.at("seed"), "3");
  EXPECT_EQ(m.at("model.d_h"), "32");
  EXPECT_EQ(m.at("retrieval.lambda"), "0.5");
  EXPECT_THROW(parse_config_text("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[unterminated\n"), ConfigError);
  EXPECT_THROW(parse_config_text("novalue\n"), ConfigError);
}

TEST(Config, AppliesKnownKeysAndRejectsBadOnes) {
  ExperimentConfig cfg;
  apply_config(cfg, parse_config_text("[retrieval]\nlambda_grid = 0, 0.3\ndistance = plain\n[decode]\nstrategy = "
                                      "top_k\ntopk = 7\n[model]\nepochs = 9\n"));
  EXPECT_EQ(cfg.lambda_grid, (std::vector<double>{0.0, 0.3}));
  EXPECT_EQ(cfg.interp.distance, DistanceMode::plain);
  EXPECT_EQ(cfg.strategy.kind, StrategyKind::top_k);
  EXPECT_EQ(cfg.strategy.k, 7u);
  EXPECT_EQ(cfg.train.epochs, 9u);
  EXPECT_THROW(apply_config(cfg, parse_config_text("bogus = 1\n")), ConfigError);
  EXPECT_THROW(apply_config(cfg, parse_config_text("[model]\nd_h = -3\n")), ConfigError);
  EXPECT_THROW(apply_config(cfg, parse_config_text("[decode]\nstrategy = magic\n")), ConfigError);
  cfg.interp.lambda = 2.0;
  EXPECT_THROW(validate_config(cfg), ConfigError);
}

TEST(Config, RenderedConfigReparsesToSameValues) {
  ExperimentConfig cfg;
  cfg.seed = 9;
  cfg.interp.tau = 0.3;
  cfg.lambda_grid = {0.0, 0.7};
  ExperimentConfig back;
  apply_config(back, parse_config_text(render_config(cfg)));
  EXPECT_EQ(render_config(back), render_config(cfg));
}

TEST(CliExit, UsageAndConfigErrorsExitTwo) {
  auto r = run_cli("train");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("paths.train"), std::string::npos) << r.err;
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("train --no-such-flag").code, 2);
  EXPECT_EQ(run_cli("train --lambda 3 --train /dev/null").code, 2);
  r = run_cli("train --train /nonexistent/file.txt");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("paths.train"), std::string::npos) << r.err;
}

TEST_F(CliPipeline, TrainWritesLoadableModelIdenticalAcrossRuns) {
  const auto p = load_model(a("model.bin").string());
  const auto v = Vocab::load(a("vocab.txt").string());
  EXPECT_EQ(p.shape.vocab_size, v.size());
  EXPECT_EQ(p.shape.d_h, 16u);
  EXPECT_EQ(lines_of(a("train_log.csv")).size(), 3u);
  ASSERT_EQ(run_cli("train " + common() + " --output-dir " + (dir / "b").string()).code, 0);
  EXPECT_EQ(slurp(a("model.bin")), slurp(dir / "b" / "model.bin"));
  EXPECT_EQ(slurp(a("train_log.csv")), slurp(dir / "b" / "train_log.csv"));
}

TEST_F(CliPipeline, DatastoreCountAndRebuild) {
  const auto vocab = Vocab::load(a("vocab.txt").string());
  const auto corpus = encode(read_text_file((dir / "train.txt").string()), vocab);
  const auto ds = load_datastore(a("datastore.bin").string());
  EXPECT_EQ(ds.count(), corpus.size());
  load_index(a("index.bin").string()).validate(ds);
  const auto before = slurp(a("datastore.bin"));
  ASSERT_EQ(run_cli("build-datastore " + common() + " --no-index").code, 0);
  EXPECT_EQ(slurp(a("datastore.bin")), before);
}

TEST_F(CliPipeline, GenerateLinesLambdaZeroAndRerun) {
  auto lines = read_records(a("generations.jsonl").string());
  ASSERT_EQ(lines.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(lines[i].example_id, i / 2);
    EXPECT_EQ(lines[i].mode, i % 2 ? "retrieval" : "baseline");
    EXPECT_EQ(lines[i].record.continuation.size(), 30u);
  }
  const auto first = slurp(a("generations.jsonl"));
  ASSERT_EQ(run_cli("generate " + common()).code, 0);
  EXPECT_EQ(slurp(a("generations.jsonl")), first);

  const auto zero_dir = dir / "zero";
  fs::create_directories(zero_dir);
  for (auto f : {"model.bin", "vocab.txt", "datastore.bin", "index.bin"})
    fs::copy_file(a(f), zero_dir / f, fs::copy_options::overwrite_existing);
  ASSERT_EQ(run_cli("generate " + common() + " --lambda 0 --output-dir " + zero_dir.string()).code, 0);
  lines = read_records((zero_dir / "generations.jsonl").string());
  for (std::size_t i = 0; i < 6; i += 2) EXPECT_EQ(lines[i].record.continuation, lines[i + 1].record.continuation);

  ASSERT_EQ(run_cli("generate " + common() + " --mode baseline --output-dir " + zero_dir.string()).code, 0);
  EXPECT_EQ(read_records((zero_dir / "generations.jsonl").string()).size(), 3u);
}

TEST_F(CliPipeline, EvaluateSchemaAndRecomputation) {
  ASSERT_EQ(run_cli("evaluate " + common()).code, 0);
  const auto rows = lines_of(a("metrics.csv"));
  ASSERT_EQ(rows.size(), 7u);
  const auto header = split_csv(rows[0]);
  for (auto col : {"seq_rep_1", "entity_f1", "ppl_base", "ppl_interp"})
    EXPECT_NE(std::find(header.begin(), header.end(), col), header.end()) << col;
  const auto recs = read_records(a("generations.jsonl").string());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto cells = split_csv(rows[i + 1]);
    EXPECT_EQ(std::stod(cells[2]), seq_rep_1(recs[i].record.continuation));
    EXPECT_GT(std::stod(cells[7]), 1.0);
  }
  EXPECT_EQ(lines_of(a("metrics_summary.csv")).size(), 3u);
}

TEST_F(CliPipeline, EvaluateRejectsEmptyAndMalformedInput) {
  const auto empty = dir / "empty.jsonl";
  std::ofstream(empty).close();
  const auto out = dir / "eval_empty";
  fs::create_directories(out);
  for (auto f : {"model.bin", "vocab.txt", "datastore.bin", "index.bin"})
    fs::copy_file(a(f), out / f, fs::copy_options::overwrite_existing);
  auto r = run_cli("evaluate " + common() + " --output-dir " + out.string() + " --generations " + empty.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(out / "metrics.csv"));

  const auto bad = dir / "bad.jsonl";
  std::ofstream(bad) << slurp(a("generations.jsonl")) << "{not json\n";
  r = run_cli("evaluate " + common() + " --output-dir " + out.string() + " --generations " + bad.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find(":7:"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(out / "metrics.csv"));
}

TEST_F(CliPipeline, DiagnoseReports) {
  ASSERT_EQ(run_cli("diagnose " + common() + " --lambdas 0,0.25,0.5").code, 0);
  const auto win = lines_of(a("winrate.csv"));
  ASSERT_EQ(win.size(), 4u);
  const auto header = split_csv(win[0]);
  const auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  EXPECT_EQ(std::stod(split_csv(win[1])[col("win_rate")]), 0.0);
  for (std::size_t i = 1; i < win.size(); ++i)
    EXPECT_LT(std::stod(split_csv(win[i])[col("decomposition_residual")]), 1e-6);
  EXPECT_EQ(lines_of(a("trajectory.csv")).size(), 31u);
  EXPECT_GE(lines_of(a("buckets.csv")).size(), 2u);
  EXPECT_TRUE(fs::exists(a("run_config.resolved")));
}

TEST_F(CliPipeline, FlagsOverrideConfigInResolvedOutput) {
  const auto out = dir / "flags";
  fs::create_directories(out);
  for (auto f : {"model.bin", "vocab.txt", "datastore.bin", "index.bin"})
    fs::copy_file(a(f), out / f, fs::copy_options::overwrite_existing);
  ASSERT_EQ(
      run_cli("generate " + common() + " --tau 0.5 --strategy top_k --topk 3 --output-dir " + out.string()).code, 0);
  const auto resolved = parse_config_text(slurp(out / "run_config.resolved"));
  EXPECT_EQ(resolved.at("retrieval.tau"), "0.5");
  EXPECT_EQ(resolved.at("decode.strategy"), "top_k");
  EXPECT_EQ(resolved.at("decode.topk"), "3");
  EXPECT_EQ(resolved.at("model.d_h"), "16");
}

TEST_F(CliPipeline, LockAndMismatchAreRuntimeErrors) {
  std::ofstream(a(".lock")).close();
  EXPECT_EQ(run_cli("generate " + common()).code, 1);
  fs::remove(a(".lock"));

  const auto other = dir / "other";
  fs::create_directories(other);
  fs::copy_file(a("model.bin"), other / "model.bin", fs::copy_options::overwrite_existing);
  std::ofstream(other / "vocab.txt") << "<unk>\t0\n<bos>\t0\nonly\t3\n";
  const auto r = run_cli("build-datastore " + common() + " --output-dir " + other.string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("mismatch"), std::string::npos) << r.err;
}
