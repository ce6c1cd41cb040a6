#pragma once

// Experiment configuration: `key = value` lines grouped under `[section]`
// headers. Keys are addressed as "section.key"; keys before the first
// header live at the top level. `#` and `;` start comments.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "knnlm/common.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/decode.hpp"
#include "knnlm/interp.hpp"
#include "knnlm/reflm.hpp"

namespace knnlm {

/// Bad or missing configuration; the CLI maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config_text(std::string_view text, const std::string& origin = "<config>") {
  ConfigMap out;
  std::string section;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    auto cut = raw.find_first_of("#;");
    std::string line = detail::trim(raw.substr(0, cut));
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    const auto full = section.empty() ? key : section + "." + key;
    if (out.contains(full)) throw ConfigError(where + ": duplicate key " + full);
    out[full] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  // paths
  std::string train_path, valid_path, test_path, annotations_path;
  std::string output_dir = "run";

  std::uint64_t min_count = 3;
  ModelShape shape;  // vocab_size filled from the vocabulary
  TrainConfig train;

  InterpConfig interp;
  std::vector<double> lambda_grid = {0.0, 0.1, 0.25, 0.5};
  bool use_index = true;
  std::uint32_t n_clusters = 64;
  std::size_t n_probe = 8;
  std::size_t index_train_points = 0;

  DecodingStrategy strategy;
  std::string mode = "both";

  EvalSetOptions eval;
  /// Cap on test-split tokens scored by the win-rate pass (0 = all).
  std::size_t winrate_max_tokens = 0;

  std::string path_in_output(const std::string& name) const {
    return (std::filesystem::path(output_dir) / name).string();
  }
  std::string model_path() const { return path_in_output("model.bin"); }
  std::string vocab_path() const { return path_in_output("vocab.txt"); }
  std::string datastore_path() const { return path_in_output("datastore.bin"); }
  std::string index_path() const { return path_in_output("index.bin"); }
  std::string generations_path() const { return path_in_output("generations.jsonl"); }

  bool wants_baseline() const { return mode == "baseline" || mode == "both"; }
  bool wants_retrieval() const { return mode == "retrieval" || mode == "both"; }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) throw ConfigError("config key " + key + ": not a number: '" + v + "'");
    return static_cast<T>(out);
  } else {
    T out{};
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size())
      throw ConfigError("config key " + key + ": not a non-negative integer: '" + v + "'");
    return out;
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + key + ": not a boolean: '" + v + "'");
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key " + key + ": empty list");
  return out;
}

}  // namespace detail

/// Applies every entry of m to cfg. Unknown keys are rejected.
inline void apply_config(ExperimentConfig& cfg, const ConfigMap& m) {
  using namespace detail;
  for (const auto& [k, v] : m) {
    try {
      if (k == "seed") cfg.seed = parse_number<std::uint64_t>(k, v);
      else if (k == "threads") cfg.threads = parse_number<std::size_t>(k, v);
      else if (k == "paths.train") cfg.train_path = v;
      else if (k == "paths.valid") cfg.valid_path = v;
      else if (k == "paths.test") cfg.test_path = v;
      else if (k == "paths.annotations") cfg.annotations_path = v;
      else if (k == "paths.output_dir") cfg.output_dir = v;
      else if (k == "vocab.min_count") cfg.min_count = parse_number<std::uint64_t>(k, v);
      else if (k == "model.n_ctx") cfg.shape.n_ctx = parse_number<std::uint32_t>(k, v);
      else if (k == "model.d_emb") cfg.shape.d_emb = parse_number<std::uint32_t>(k, v);
      else if (k == "model.d_h") cfg.shape.d_h = parse_number<std::uint32_t>(k, v);
      else if (k == "model.epochs") cfg.train.epochs = parse_number<std::uint32_t>(k, v);
      else if (k == "model.batch_size") cfg.train.batch_size = parse_number<std::uint32_t>(k, v);
      else if (k == "model.learning_rate") cfg.train.learning_rate = parse_number<double>(k, v);
      else if (k == "model.clip_norm") cfg.train.clip_norm = parse_number<double>(k, v);
      else if (k == "model.positions_per_epoch") cfg.train.positions_per_epoch = parse_number<std::size_t>(k, v);
      else if (k == "model.valid_max_tokens") cfg.train.valid_max_tokens = parse_number<std::size_t>(k, v);
      else if (k == "retrieval.lambda") cfg.interp.lambda = parse_number<double>(k, v);
      else if (k == "retrieval.lambda_grid") cfg.lambda_grid = parse_list(k, v);
      else if (k == "retrieval.tau") cfg.interp.tau = parse_number<double>(k, v);
      else if (k == "retrieval.k") cfg.interp.k = parse_number<std::size_t>(k, v);
      else if (k == "retrieval.distance") cfg.interp.distance = parse_distance_mode(v);
      else if (k == "retrieval.index") cfg.use_index = parse_bool(k, v);
      else if (k == "retrieval.n_clusters") cfg.n_clusters = parse_number<std::uint32_t>(k, v);
      else if (k == "retrieval.n_probe") cfg.n_probe = parse_number<std::size_t>(k, v);
      else if (k == "retrieval.index_train_points") cfg.index_train_points = parse_number<std::size_t>(k, v);
      else if (k == "decode.strategy") cfg.strategy.kind = parse_strategy_kind(v);
      else if (k == "decode.p") cfg.strategy.p = parse_number<double>(k, v);
      else if (k == "decode.topk") cfg.strategy.k = parse_number<std::size_t>(k, v);
      else if (k == "decode.beam") cfg.strategy.beam_size = parse_number<std::size_t>(k, v);
      else if (k == "decode.mode") cfg.mode = v;
      else if (k == "eval.n_examples") cfg.eval.n_examples = parse_number<std::size_t>(k, v);
      else if (k == "eval.prefix_len") cfg.eval.prefix_len = parse_number<std::size_t>(k, v);
      else if (k == "eval.cont_len") cfg.eval.cont_len = parse_number<std::size_t>(k, v);
      else if (k == "eval.allow_overlap") cfg.eval.allow_overlap = parse_bool(k, v);
      else if (k == "eval.winrate_max_tokens") cfg.winrate_max_tokens = parse_number<std::size_t>(k, v);
      else throw ConfigError("unknown config key: " + k);
    } catch (const ConfigError&) {
      throw;
    } catch (const InvalidArgument& e) {
      throw ConfigError("config key " + k + ": " + e.what());
    }
  }
}

/// Bounds owned by the component types, reported as configuration errors.
inline void validate_config(const ExperimentConfig& cfg) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(cfg.threads >= 1, "threads must be >= 1");
  need(cfg.min_count >= 1, "vocab.min_count must be >= 1");
  need(cfg.shape.n_ctx >= 1 && cfg.shape.d_emb >= 1 && cfg.shape.d_h >= 1, "model dimensions must be >= 1");
  need(cfg.train.batch_size >= 1, "model.batch_size must be >= 1");
  need(cfg.train.learning_rate > 0, "model.learning_rate must be positive");
  need(cfg.train.clip_norm > 0, "model.clip_norm must be positive");
  need(cfg.mode == "baseline" || cfg.mode == "retrieval" || cfg.mode == "both",
       "decode.mode must be baseline, retrieval or both");
  need(cfg.n_clusters >= 1, "retrieval.n_clusters must be >= 1");
  need(cfg.n_probe >= 1 && cfg.n_probe <= cfg.n_clusters, "retrieval.n_probe must be in [1, n_clusters]");
  need(cfg.eval.n_examples >= 1, "eval.n_examples must be >= 1");
  need(cfg.eval.prefix_len >= 1 && cfg.eval.cont_len >= 1, "eval.prefix_len and eval.cont_len must be >= 1");
  for (double l : cfg.lambda_grid) need(l >= 0.0 && l <= 1.0, "retrieval.lambda_grid values must be in [0, 1]");
  try {
    cfg.interp.validate();
    cfg.strategy.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
}

/// Fails with a message naming the config field when a required input path
/// is unset or missing.
inline void require_input(const std::string& field, const std::string& path) {
  if (path.empty()) throw ConfigError("missing required path: " + field);
  if (!std::filesystem::exists(path)) throw ConfigError(field + ": file does not exist: " + path);
}

/// The fully resolved configuration in the same `key = value` format.
inline std::string render_config(const ExperimentConfig& c) {
  std::ostringstream o;
  auto num = [](double x) {
    std::ostringstream s;
    s.precision(17);
    s << x;
    return s.str();
  };
  std::string grid;
  for (std::size_t i = 0; i < c.lambda_grid.size(); ++i) grid += (i ? ", " : "") + num(c.lambda_grid[i]);
  o << "seed = " << c.seed << "\nthreads = " << c.threads << "\n\n[paths]\ntrain = " << c.train_path
    << "\nvalid = " << c.valid_path << "\ntest = " << c.test_path << "\nannotations = " << c.annotations_path
    << "\noutput_dir = " << c.output_dir << "\n\n[vocab]\nmin_count = " << c.min_count << "\n\n[model]\nn_ctx = "
    << c.shape.n_ctx << "\nd_emb = " << c.shape.d_emb << "\nd_h = " << c.shape.d_h << "\nepochs = " << c.train.epochs
    << "\nbatch_size = " << c.train.batch_size << "\nlearning_rate = " << num(c.train.learning_rate)
    << "\nclip_norm = " << num(c.train.clip_norm) << "\npositions_per_epoch = " << c.train.positions_per_epoch
    << "\nvalid_max_tokens = " << c.train.valid_max_tokens << "\n\n[retrieval]\nlambda = " << num(c.interp.lambda)
    << "\nlambda_grid = " << grid << "\ntau = " << num(c.interp.tau) << "\nk = " << c.interp.k
    << "\ndistance = " << to_string(c.interp.distance) << "\nindex = " << (c.use_index ? "true" : "false")
    << "\nn_clusters = " << c.n_clusters << "\nn_probe = " << c.n_probe
    << "\nindex_train_points = " << c.index_train_points << "\n\n[decode]\nstrategy = " << to_string(c.strategy.kind)
    << "\np = " << num(c.strategy.p) << "\ntopk = " << c.strategy.k << "\nbeam = " << c.strategy.beam_size
    << "\nmode = " << c.mode << "\n\n[eval]\nn_examples = " << c.eval.n_examples
    << "\nprefix_len = " << c.eval.prefix_len << "\ncont_len = " << c.eval.cont_len
    << "\nallow_overlap = " << (c.eval.allow_overlap ? "true" : "false")
    << "\nwinrate_max_tokens = " << c.winrate_max_tokens << "\n";
  return o.str();
}

}  // namespace knnlm
