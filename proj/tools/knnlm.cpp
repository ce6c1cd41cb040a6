// knnlm: command-line driver for the retrieval-augmented LM experiments.
//
//   knnlm train           --config run.ini
//   knnlm build-datastore --config run.ini [--no-index]
//   knnlm generate        --config run.ini [--mode retrieval --lambda 0.25]
//   knnlm evaluate        --config run.ini [--generations FILE]
//   knnlm diagnose        --config run.ini [--generations FILE]
//
// Flags override the config file. Exit codes: 0 ok, 2 configuration error,
// 1 runtime failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "knnlm/cli.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::size_t> threads;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda, tau, p;
  std::optional<std::size_t> k, topk, beam, n_examples, epochs;
  std::optional<std::string> strategy, mode, output_dir, train, valid, test, annotations, lambdas, distance;
  std::optional<bool> index;
  std::string generations;
};

knnlm::ExperimentConfig resolve(const Overrides& o) {
  using namespace knnlm;
  ExperimentConfig cfg;
  if (!o.config_path.empty()) apply_config(cfg, load_config_file(o.config_path));
  ConfigMap flags;
  auto put = [&](const char* key, const auto& v) {
    if (v) {
      std::ostringstream s;
      s.precision(17);
      s << *v;
      flags[key] = s.str();
    }
  };
  put("threads", o.threads);
  put("seed", o.seed);
  put("retrieval.lambda", o.lambda);
  put("retrieval.tau", o.tau);
  put("retrieval.k", o.k);
  put("retrieval.distance", o.distance);
  put("retrieval.lambda_grid", o.lambdas);
  put("decode.strategy", o.strategy);
  put("decode.p", o.p);
  put("decode.topk", o.topk);
  put("decode.beam", o.beam);
  put("decode.mode", o.mode);
  put("eval.n_examples", o.n_examples);
  put("model.epochs", o.epochs);
  put("paths.output_dir", o.output_dir);
  put("paths.train", o.train);
  put("paths.valid", o.valid);
  put("paths.test", o.test);
  put("paths.annotations", o.annotations);
  if (o.index) flags["retrieval.index"] = *o.index ? "true" : "false";
  apply_config(cfg, flags);
  validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kNN-LM desk-scale laboratory"};
  app.require_subcommand(1);
  app.fallthrough();
  Overrides o;
  app.add_option("--config", o.config_path, "experiment config file");
  app.add_option("--threads", o.threads, "worker threads (1 = deterministic reference mode)");
  app.add_option("--seed", o.seed, "global seed");
  app.add_option("--lambda", o.lambda, "interpolation weight on the retrieval distribution");
  app.add_option("--lambdas", o.lambdas, "comma-separated lambda grid for diagnose");
  app.add_option("--tau", o.tau, "retrieval temperature");
  app.add_option("--k", o.k, "neighbors per query");
  app.add_option("--distance", o.distance, "squared or plain Euclidean distance");
  app.add_option("--strategy", o.strategy, "greedy, ancestral, top_k, nucleus or beam");
  app.add_option("--p", o.p, "nucleus mass");
  app.add_option("--topk", o.topk, "top-k truncation");
  app.add_option("--beam", o.beam, "beam width");
  app.add_option("--mode", o.mode, "baseline, retrieval or both");
  app.add_option("--n-examples", o.n_examples, "evaluation examples");
  app.add_option("--epochs", o.epochs, "training epochs");
  app.add_option("--output-dir", o.output_dir, "artifact directory");
  app.add_option("--train", o.train, "training split");
  app.add_option("--valid", o.valid, "validation split");
  app.add_option("--test", o.test, "test split");
  app.add_option("--annotations", o.annotations, "per-token bucket labels for the test split");
  app.add_flag("--index,!--no-index", o.index, "use the approximate index");

  auto* train = app.add_subcommand("train", "train the reference LM");
  auto* build = app.add_subcommand("build-datastore", "build datastore (and index) from the training split");
  auto* gen = app.add_subcommand("generate", "generate continuations for the evaluation set");
  auto* eval = app.add_subcommand("evaluate", "score a generations file");
  auto* diag = app.add_subcommand("diagnose", "win-rate, buckets and trajectories");
  for (auto* sub : {eval, diag}) sub->add_option("--generations", o.generations, "generations JSONL");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const auto cfg = resolve(o);
    const std::string generations = o.generations.empty() ? cfg.generations_path() : o.generations;
    if (*train) knnlm::cli::cmd_train(cfg);
    else if (*build) knnlm::cli::cmd_build_datastore(cfg);
    else if (*gen) knnlm::cli::cmd_generate(cfg);
    else if (*eval) knnlm::cli::cmd_evaluate(cfg, generations);
    else if (*diag) knnlm::cli::cmd_diagnose(cfg, generations);
  } catch (const knnlm::ConfigError& e) {
    std::cerr << "knnlm: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "knnlm: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
