#pragma once

// JSONL persistence of generation records: one JSON object per line.

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knnlm/corpus.hpp"
#include "knnlm/decode.hpp"

namespace knnlm {

struct RecordLine {
  std::size_t example_id = 0;
  std::string mode;  // "baseline" or "retrieval"
  std::size_t source_offset = 0;
  std::vector<TokenId> gold_ids;
  GenerationRecord record;
};

inline nlohmann::json to_json(const RecordLine& line, const Vocab* vocab = nullptr) {
  using nlohmann::json;
  const auto& r = line.record;
  json per_step = {{"h_lm", json::array()}, {"h_knn", json::array()}, {"jsd", json::array()},
                   {"p_chosen_final", json::array()}};
  for (const auto& s : r.per_step) {
    per_step["h_lm"].push_back(s.h_lm);
    per_step["h_knn"].push_back(s.h_knn ? json(*s.h_knn) : json(nullptr));
    per_step["jsd"].push_back(s.jsd ? json(*s.jsd) : json(nullptr));
    per_step["p_chosen_final"].push_back(s.p_chosen_final);
  }
  json j;
  j["example_id"] = line.example_id;
  j["mode"] = line.mode;
  j["source_offset"] = line.source_offset;
  j["prefix_ids"] = r.prefix;
  j["continuation_ids"] = r.continuation;
  j["gold_ids"] = line.gold_ids;
  j["strategy"] = {{"name", std::string(to_string(r.strategy.kind))},
                   {"k", r.strategy.k},
                   {"p", r.strategy.p},
                   {"beam_size", r.strategy.beam_size},
                   {"seed", r.strategy.seed}};
  j["lambda"] = r.interp ? json(r.interp->lambda) : json(nullptr);
  j["tau"] = r.interp ? json(r.interp->tau) : json(nullptr);
  j["k_neighbors"] = r.interp ? json(r.interp->k) : json(nullptr);
  j["distance"] = r.interp ? json(std::string(to_string(r.interp->distance))) : json(nullptr);
  j["per_step"] = std::move(per_step);
  if (vocab != nullptr) {
    j["text"] = {{"prefix", decode(r.prefix, *vocab)},
                 {"continuation", decode(r.continuation, *vocab)},
                 {"gold", decode(line.gold_ids, *vocab)}};
  }
  return j;
}

inline RecordLine record_from_json(const nlohmann::json& j) {
  RecordLine line;
  line.example_id = j.at("example_id").get<std::size_t>();
  line.mode = j.at("mode").get<std::string>();
  line.source_offset = j.value("source_offset", std::size_t{0});
  line.gold_ids = j.at("gold_ids").get<std::vector<TokenId>>();
  auto& r = line.record;
  r.prefix = j.at("prefix_ids").get<std::vector<TokenId>>();
  r.continuation = j.at("continuation_ids").get<std::vector<TokenId>>();
  const auto& st = j.at("strategy");
  r.strategy.kind = parse_strategy_kind(st.at("name").get<std::string>());
  r.strategy.k = st.value("k", std::size_t{40});
  r.strategy.p = st.value("p", 0.8);
  r.strategy.beam_size = st.value("beam_size", std::size_t{5});
  r.strategy.seed = st.value("seed", std::uint64_t{0});
  if (!j.at("lambda").is_null()) {
    InterpConfig c;
    c.lambda = j.at("lambda").get<double>();
    c.tau = j.at("tau").get<double>();
    c.k = j.at("k_neighbors").get<std::size_t>();
    c.distance = parse_distance_mode(j.at("distance").get<std::string>());
    r.interp = c;
  }
  const auto& ps = j.at("per_step");
  const auto& h_lm = ps.at("h_lm");
  const auto& h_knn = ps.at("h_knn");
  const auto& jsd = ps.at("jsd");
  const auto& pc = ps.at("p_chosen_final");
  const std::size_t n = r.continuation.size();
  if (h_lm.size() != n || h_knn.size() != n || jsd.size() != n || pc.size() != n)
    throw FormatError("per_step arrays must have one entry per continuation token");
  for (std::size_t i = 0; i < n; ++i) {
    StepStats s;
    s.h_lm = h_lm[i].get<double>();
    if (!h_knn[i].is_null()) s.h_knn = h_knn[i].get<double>();
    if (!jsd[i].is_null()) s.jsd = jsd[i].get<double>();
    s.chosen = r.continuation[i];
    s.p_chosen_final = pc[i].get<double>();
    r.per_step.push_back(s);
  }
  return line;
}

inline void write_records(const std::string& path, const std::vector<RecordLine>& lines, const Vocab* vocab) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path);
  for (const auto& l : lines) out << to_json(l, vocab).dump() << '\n';
  if (!out) throw Error("write failed: " + path);
}

/// Parses a JSONL file; errors name the offending line number.
inline std::vector<RecordLine> read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open for reading: " + path);
  std::vector<RecordLine> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
  }
  return out;
}

}  // namespace knnlm
