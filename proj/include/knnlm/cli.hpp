#pragma once

// Experiment driver: the train / build-datastore / generate / evaluate /
// diagnose subcommands. Every artifact lives in cfg.output_dir under a fixed
// file name.

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "knnlm/config.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/decode.hpp"
#include "knnlm/diagnostics.hpp"
#include "knnlm/ivf.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/records.hpp"
#include "knnlm/reflm.hpp"
#include "knnlm/textmetrics.hpp"

namespace knnlm::cli {

inline void log(const std::string& msg) { std::cerr << "[knnlm] " << msg << std::endl; }

/// Exclusive per-directory lock held for the lifetime of a subcommand.
class RunLock {
 public:
  explicit RunLock(const std::string& dir) : path_((std::filesystem::path(dir) / ".lock").string()) {
    std::filesystem::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST)
        throw Error("output directory is locked by another run (remove " + path_ + " if no run is active)");
      throw Error("cannot create lock file " + path_ + ": " + std::strerror(errno));
    }
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

inline void write_text_atomically(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + tmp);
    out << content;
    if (!out) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void write_resolved_config(const ExperimentConfig& cfg) {
  write_text_atomically(cfg.path_in_output("run_config.resolved"), render_config(cfg));
}

inline std::vector<TokenId> load_split(const std::string& path, const Vocab& vocab) {
  return encode(read_text_file(path), vocab);
}

/// Model, vocabulary and (optionally) datastore + index from output_dir.
struct Artifacts {
  Vocab vocab;
  ModelParams<float> model;
  std::optional<Datastore> datastore;
  std::optional<ApproxIndex> index;
  std::shared_ptr<const PackedLists> packed;
  std::size_t n_probe = 8;

  Retriever retriever() const {
    return Retriever{datastore ? &*datastore : nullptr, index ? &*index : nullptr, n_probe, packed.get()};
  }
};

inline Artifacts load_artifacts(const ExperimentConfig& cfg, bool need_datastore) {
  require_input("model file (output_dir/model.bin)", cfg.model_path());
  require_input("vocabulary file (output_dir/vocab.txt)", cfg.vocab_path());
  Artifacts a;
  a.vocab = Vocab::load(cfg.vocab_path());
  a.model = load_model(cfg.model_path());
  a.n_probe = cfg.n_probe;
  if (a.model.shape.vocab_size != a.vocab.size())
    throw Error("model vocabulary size " + std::to_string(a.model.shape.vocab_size) + " != vocab file size " +
                std::to_string(a.vocab.size()));
  if (need_datastore) {
    require_input("datastore file (output_dir/datastore.bin)", cfg.datastore_path());
    a.datastore = load_datastore(cfg.datastore_path());
    if (a.datastore->dim() != a.model.shape.d_h) throw Error("datastore dimension does not match model hidden size");
    for (TokenId v : a.datastore->values())
      if (v >= a.vocab.size()) throw Error("datastore value outside model vocabulary");
    if (cfg.use_index) {
      require_input("index file (output_dir/index.bin; disable with --no-index)", cfg.index_path());
      a.index = load_index(cfg.index_path());
      if (cfg.n_probe > a.index->n_clusters)
        throw ConfigError("retrieval.n_probe exceeds the index's " + std::to_string(a.index->n_clusters) + " clusters");
      a.packed = std::make_shared<const PackedLists>(*a.index, *a.datastore);  // validates the partition
    }
  }
  return a;
}

// ---------------------------------------------------------------------------

inline void cmd_train(const ExperimentConfig& cfg) {
  require_input("paths.train", cfg.train_path);
  if (!cfg.valid_path.empty()) require_input("paths.valid", cfg.valid_path);
  RunLock lock(cfg.output_dir);

  const std::string text = read_text_file(cfg.train_path);
  const Vocab vocab = build_vocab(text, cfg.min_count);
  const auto train_ids = encode(text, vocab);
  const auto valid_ids = cfg.valid_path.empty() ? std::vector<TokenId>{} : load_split(cfg.valid_path, vocab);
  ModelShape shape = cfg.shape;
  shape.vocab_size = static_cast<std::uint32_t>(vocab.size());
  log("vocabulary: " + std::to_string(vocab.size()) + " types, " + std::to_string(train_ids.size()) +
      " training tokens, " + std::to_string(shape.parameter_count()) + " parameters");

  auto result = train<float>(train_ids, valid_ids, shape, cfg.train, cfg.seed, [](const EpochLog& e) {
    log("epoch " + std::to_string(e.epoch) + ": train loss " + format_double(e.train_loss) + ", valid ppl " +
        format_double(e.valid_ppl) + ", lr " + format_double(e.learning_rate));
  });

  vocab.save(cfg.vocab_path());
  save_model(result.params, cfg.model_path());
  std::string csv = "epoch,train_loss,valid_ppl,learning_rate\n";
  for (const auto& e : result.log)
    csv += std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," + format_double(e.valid_ppl) + "," +
           format_double(e.learning_rate) + "\n";
  write_text_atomically(cfg.path_in_output("train_log.csv"), csv);
  write_resolved_config(cfg);
  log("wrote " + cfg.model_path());
}

inline void cmd_build_datastore(const ExperimentConfig& cfg) {
  require_input("paths.train", cfg.train_path);
  require_input("model file (output_dir/model.bin)", cfg.model_path());
  require_input("vocabulary file (output_dir/vocab.txt)", cfg.vocab_path());
  RunLock lock(cfg.output_dir);

  const Vocab vocab = Vocab::load(cfg.vocab_path());
  const auto model = load_model(cfg.model_path());
  if (model.shape.vocab_size != vocab.size())
    throw Error("model/corpus mismatch: model has |V| = " + std::to_string(model.shape.vocab_size) +
                ", vocabulary has " + std::to_string(vocab.size()));
  const auto ids = load_split(cfg.train_path, vocab);
  const Datastore ds = build_datastore(model, ids);
  save_datastore(ds, cfg.datastore_path());
  log("datastore: " + std::to_string(ds.count()) + " entries of dimension " + std::to_string(ds.dim()));

  if (cfg.use_index) {
    IndexBuildOptions opt;
    opt.n_clusters = cfg.n_clusters;
    opt.seed = cfg.seed;
    opt.max_training_points = cfg.index_train_points;
    const auto idx = build_index(ds, opt);
    save_index(idx, cfg.index_path());
    log("index: " + std::to_string(idx.n_clusters) + " clusters");
  }
  write_resolved_config(cfg);
}

inline void cmd_generate(const ExperimentConfig& cfg) {
  require_input("paths.test", cfg.test_path);
  const auto art = load_artifacts(cfg, cfg.wants_retrieval());
  RunLock lock(cfg.output_dir);

  const auto test_ids = load_split(cfg.test_path, art.vocab);
  EvalSetOptions eopt = cfg.eval;
  eopt.seed = cfg.seed;
  const auto examples = build_eval_set(test_ids, eopt);
  DecodingStrategy strategy = cfg.strategy;
  strategy.seed = cfg.seed;
  const Retriever retriever = art.retriever();

  const std::size_t per_example = (cfg.wants_baseline() ? 1 : 0) + (cfg.wants_retrieval() ? 1 : 0);
  std::vector<RecordLine> lines(examples.size() * per_example);
  parallel_for(examples.size(), cfg.threads, [&](std::size_t i) {
    const auto& ex = examples[i];
    const std::uint64_t seed = mix_seed(cfg.seed, i);
    std::size_t slot = i * per_example;
    try {
      auto emit = [&](const std::string& mode, GenerationRecord rec) {
        lines[slot++] = RecordLine{i, mode, ex.source_offset, ex.gold_suffix, std::move(rec)};
      };
      if (cfg.wants_baseline())
        emit("baseline", generate(art.model, nullptr, ex.prefix, cfg.eval.cont_len, strategy, std::nullopt, seed));
      if (cfg.wants_retrieval())
        emit("retrieval", generate(art.model, &retriever, ex.prefix, cfg.eval.cont_len, strategy,
                                   std::optional<InterpConfig>(cfg.interp), seed));
    } catch (const std::exception& e) {
      throw Error("example " + std::to_string(i) + ": " + e.what());
    }
  });
  write_records(cfg.generations_path() + ".tmp", lines, &art.vocab);
  std::filesystem::rename(cfg.generations_path() + ".tmp", cfg.generations_path());
  write_resolved_config(cfg);
  log("wrote " + std::to_string(lines.size()) + " records to " + cfg.generations_path());
}

/// Teacher-forced perplexity of a continuation given its prefix, under the
/// base LM and under interpolation.
template <std::floating_point T>
std::pair<double, double> continuation_perplexities(const ModelParams<T>& params, const Retriever& retriever,
                                                    std::span<const TokenId> prefix,
                                                    std::span<const TokenId> continuation, const InterpConfig& icfg) {
  if (continuation.empty()) throw InvalidArgument("empty continuation");
  Workspace<T> ws(params.shape);
  std::vector<TokenId> history(prefix.begin(), prefix.end());
  double nll_base = 0.0, nll_interp = 0.0;
  for (TokenId tok : continuation) {
    const auto pr = predict_next(params, ws, history, &retriever, &icfg);
    nll_base -= std::log(pr.lm[tok]);
    nll_interp -= std::log(pr.final_dist[tok]);
    history.push_back(tok);
  }
  const double n = static_cast<double>(continuation.size());
  return {std::exp(nll_base / n), std::exp(nll_interp / n)};
}

inline void cmd_evaluate(const ExperimentConfig& cfg, const std::string& generations) {
  require_input("generations file", generations);
  const auto records = read_records(generations);
  if (records.empty()) throw Error(generations + ": no records to evaluate");
  const auto art = load_artifacts(cfg, true);
  RunLock lock(cfg.output_dir);
  const Retriever retriever = art.retriever();

  struct Row {
    double rep = 0, ppl_base = 0, ppl_interp = 0;
    EntityScore ent;
  };
  std::vector<Row> rows(records.size());
  parallel_for(records.size(), cfg.threads, [&](std::size_t i) {
    const auto& rl = records[i];
    try {
      for (TokenId t : rl.record.prefix)
        if (t >= art.vocab.size()) throw InvalidArgument("token id outside vocabulary");
      for (TokenId t : rl.record.continuation)
        if (t >= art.vocab.size()) throw InvalidArgument("token id outside vocabulary");
      for (TokenId t : rl.gold_ids)
        if (t >= art.vocab.size()) throw InvalidArgument("token id outside vocabulary");
      auto& row = rows[i];
      row.rep = seq_rep_1(rl.record.continuation);
      row.ent = entity_f1(extract_entities(decode(rl.record.continuation, art.vocab)),
                          extract_entities(decode(rl.gold_ids, art.vocab)));
      const InterpConfig icfg = rl.record.interp.value_or(cfg.interp);
      std::tie(row.ppl_base, row.ppl_interp) =
          continuation_perplexities(art.model, retriever, rl.record.prefix, rl.record.continuation, icfg);
    } catch (const std::exception& e) {
      throw Error("record " + std::to_string(i + 1) + ": " + e.what());
    }
  });

  std::string csv =
      "example_id,mode,seq_rep_1,entity_precision,entity_recall,entity_f1,entity_f1_vacuous,ppl_base,ppl_interp\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    csv += std::to_string(records[i].example_id) + "," + records[i].mode + "," + format_double(r.rep) + "," +
           format_double(r.ent.precision) + "," + format_double(r.ent.recall) + "," + format_double(r.ent.f1) + "," +
           (r.ent.vacuous ? "1" : "0") + "," + format_double(r.ppl_base) + "," + format_double(r.ppl_interp) + "\n";
  }

  std::string summary = "mode,n,mean_seq_rep_1,macro_entity_f1,micro_entity_f1,mean_ppl_base,mean_ppl_interp\n";
  for (const std::string mode : {"baseline", "retrieval"}) {
    std::vector<EntityScore> ents;
    double rep = 0, f1 = 0, pb = 0, pi = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (records[i].mode != mode) continue;
      ents.push_back(rows[i].ent);
      rep += rows[i].rep;
      f1 += rows[i].ent.f1;
      pb += rows[i].ppl_base;
      pi += rows[i].ppl_interp;
    }
    if (ents.empty()) continue;
    const double n = static_cast<double>(ents.size());
    summary += mode + "," + std::to_string(ents.size()) + "," + format_double(rep / n) + "," + format_double(f1 / n) +
               "," + format_double(pooled_entity_f1(ents)) + "," + format_double(pb / n) + "," +
               format_double(pi / n) + "\n";
  }
  write_text_atomically(cfg.path_in_output("metrics.csv"), csv);
  write_text_atomically(cfg.path_in_output("metrics_summary.csv"), summary);
  write_resolved_config(cfg);
  log("evaluated " + std::to_string(records.size()) + " records");
}

struct DiagnoseSummary {
  std::vector<WinRateReport> reports;
  std::optional<TrajectoryReport> trajectory;
};

inline DiagnoseSummary cmd_diagnose(const ExperimentConfig& cfg, const std::string& generations) {
  require_input("paths.test", cfg.test_path);
  const auto art = load_artifacts(cfg, true);
  RunLock lock(cfg.output_dir);
  const Retriever retriever = art.retriever();

  auto test_ids = load_split(cfg.test_path, art.vocab);
  if (cfg.winrate_max_tokens > 0 && test_ids.size() > cfg.winrate_max_tokens) test_ids.resize(cfg.winrate_max_tokens);
  const auto scores = score_positions(art.model, retriever, test_ids, cfg.interp, cfg.threads);

  DiagnoseSummary out;
  for (double lambda : cfg.lambda_grid) {
    InterpConfig c = cfg.interp;
    c.lambda = lambda;
    out.reports.push_back(win_rate_from_scores(scores, c));
  }
  write_winrate_csv(cfg.path_in_output("winrate.csv"), out.reports);

  const auto main_report = win_rate_from_scores(scores, cfg.interp);
  BucketReport buckets;
  if (!cfg.annotations_path.empty()) {
    require_input("paths.annotations", cfg.annotations_path);
    const auto labels = read_annotations(cfg.annotations_path, main_report.n_tokens);
    buckets = bucketed_win_rate(main_report, BucketMode::external_annotation, nullptr, &labels);
  } else {
    buckets = bucketed_win_rate(main_report, BucketMode::frequency, &art.vocab);
  }
  write_buckets_csv(cfg.path_in_output("buckets.csv"), buckets);

  const WinRateReport* best = nullptr;
  for (const auto& r : out.reports) {
    log("lambda " + format_double(r.config.lambda) + ": ppl " + format_double(r.agg_ppl_base) + " -> " +
        format_double(r.agg_ppl_interp) + ", win rate " + format_double(r.win_rate) + ", identity residual " +
        format_double(r.decomposition_residual()));
    if (best == nullptr || r.agg_ppl_interp < best->agg_ppl_interp) best = &r;
  }
  if (best != nullptr)
    log("best lambda " + format_double(best->config.lambda) + ": held-out ppl " + format_double(best->agg_ppl_interp) +
        " (base " + format_double(best->agg_ppl_base) + "), tokens helped " + format_double(best->win_rate));

  if (std::filesystem::exists(generations)) {
    std::vector<GenerationRecord> with_retrieval;
    for (auto& rl : read_records(generations))
      if (rl.record.interp) with_retrieval.push_back(std::move(rl.record));
    if (with_retrieval.empty()) throw Error(generations + ": no retrieval records for trajectories");
    out.trajectory = trajectories(with_retrieval);
    write_trajectory_csv(cfg.path_in_output("trajectory.csv"), *out.trajectory);
    std::vector<std::optional<double>> ratio, jsd;
    for (const auto& p : out.trajectory->positions) {
      ratio.push_back(p.mean_entropy_ratio);
      jsd.push_back(p.mean_jsd);
    }
    log("trajectory over " + std::to_string(with_retrieval.size()) + " records: entropy-ratio slope " +
        format_double(least_squares_slope(ratio)) + ", JSD slope " + format_double(least_squares_slope(jsd)));
  } else {
    log("no generations at " + generations + "; skipping trajectories");
  }
  write_resolved_config(cfg);
  return out;
}

}  // namespace knnlm::cli
