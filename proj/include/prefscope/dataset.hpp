#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefscope/error.hpp"
#include "prefscope/rng.hpp"
#include "prefscope/text.hpp"

namespace prefscope {

using json = nlohmann::json;

enum class Label { A, B, Tie, Unlabeled };

inline std::string label_to_string(Label l) {
  switch (l) {
    case Label::A: return "A";
    case Label::B: return "B";
    case Label::Tie: return "tie";
    default: return "";
  }
}

inline Label label_from_string(const std::string& s) {
  if (s == "A" || s == "a") return Label::A;
  if (s == "B" || s == "b") return Label::B;
  if (s == "tie" || s == "TIE" || s == "Tie") return Label::Tie;
  fail(ErrorKind::parse, "unrecognized label value: \"" + s + "\"");
}

// One pairwise comparison: a prompt, two candidate responses, and (when
// present) the annotator's choice plus metadata about who annotated it.
struct PreferencePair {
  std::string id;
  std::string prompt;
  std::string response_a;
  std::string response_b;
  Label label = Label::Unlabeled;
  std::string annotator_id;  // empty = absent
  std::map<std::string, std::string> demographics;
  std::string explanation;   // empty = absent
  std::string model_a;       // optional model identity behind response_a
  std::string model_b;
  long word_count_a = 0;
  long word_count_b = 0;
  long length_delta = 0;     // word_count_a - word_count_b
  bool swapped = false;

  void recount() {
    word_count_a = word_count(response_a);
    word_count_b = word_count(response_b);
    length_delta = word_count_a - word_count_b;
  }
};

// Exchanges the two sides of a pair: responses, counts, model identities,
// and the label. Applying it twice restores the original pair.
inline void swap_pair(PreferencePair& p) {
  std::swap(p.response_a, p.response_b);
  std::swap(p.word_count_a, p.word_count_b);
  std::swap(p.model_a, p.model_b);
  p.length_delta = -p.length_delta;
  if (p.label == Label::A) {
    p.label = Label::B;
  } else if (p.label == Label::B) {
    p.label = Label::A;
  }
  p.swapped = !p.swapped;
}

struct CurationInfo {
  int feature_id = -1;
  double z = 0.0;
  Label original_label = Label::Unlabeled;
};

struct Dataset {
  std::string name;
  std::vector<PreferencePair> pairs;
  uint64_t swap_seed = 0;
  bool swap_applied = false;
  std::map<std::string, std::string> provenance;
  std::map<std::string, CurationInfo> curation;  // pair id -> flip record

  const PreferencePair* find(const std::string& id) const {
    for (const auto& p : pairs) {
      if (p.id == id) return &p;
    }
    return nullptr;
  }

  size_t index_of(const std::string& id) const {
    for (size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].id == id) return i;
    }
    fail(ErrorKind::validation, "unknown pair id: " + id);
  }
};

namespace detail {

inline std::string json_string_or(const json& j, const char* key,
                                  const std::string& fallback = "") {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  if (!it->is_string()) {
    fail(ErrorKind::parse, std::string("field \"") + key + "\" must be a string");
  }
  return it->get<std::string>();
}

}  // namespace detail

inline PreferencePair pair_from_json(const json& rec) {
  if (!rec.is_object()) fail(ErrorKind::parse, "record is not a JSON object");
  for (const char* key : {"prompt", "response_a", "response_b"}) {
    if (!rec.contains(key)) {
      fail(ErrorKind::parse, std::string("missing required field \"") + key + "\"");
    }
  }
  PreferencePair p;
  p.id = detail::json_string_or(rec, "id");
  p.prompt = detail::json_string_or(rec, "prompt");
  p.response_a = detail::json_string_or(rec, "response_a");
  p.response_b = detail::json_string_or(rec, "response_b");
  if (rec.contains("label") && !rec["label"].is_null()) {
    p.label = label_from_string(rec["label"].get<std::string>());
  }
  p.annotator_id = detail::json_string_or(rec, "annotator_id");
  p.explanation = detail::json_string_or(rec, "explanation");
  p.model_a = detail::json_string_or(rec, "model_a");
  p.model_b = detail::json_string_or(rec, "model_b");
  if (rec.contains("demographics") && rec["demographics"].is_object()) {
    for (auto& [k, v] : rec["demographics"].items()) {
      if (v.is_string()) p.demographics[k] = v.get<std::string>();
    }
  }
  if (rec.contains("swapped") && rec["swapped"].is_boolean()) {
    p.swapped = rec["swapped"].get<bool>();
  }
  p.recount();
  return p;
}

inline json pair_to_json(const PreferencePair& p,
                         const CurationInfo* curation = nullptr) {
  json rec;
  rec["id"] = p.id;
  rec["prompt"] = p.prompt;
  rec["response_a"] = p.response_a;
  rec["response_b"] = p.response_b;
  if (p.label == Label::Unlabeled) {
    rec["label"] = nullptr;
  } else {
    rec["label"] = label_to_string(p.label);
  }
  if (!p.annotator_id.empty()) rec["annotator_id"] = p.annotator_id;
  if (!p.demographics.empty()) rec["demographics"] = p.demographics;
  if (!p.explanation.empty()) rec["explanation"] = p.explanation;
  if (!p.model_a.empty()) rec["model_a"] = p.model_a;
  if (!p.model_b.empty()) rec["model_b"] = p.model_b;
  rec["word_count_a"] = p.word_count_a;
  rec["word_count_b"] = p.word_count_b;
  rec["length_delta"] = p.length_delta;
  rec["swapped"] = p.swapped;
  if (curation) {
    rec["curation"] = {{"feature_id", curation->feature_id},
                       {"z", curation->z},
                       {"original_label", label_to_string(curation->original_label)}};
  }
  return rec;
}

enum class DatasetFormat { jsonl };

// Reads one JSONL record per line. Duplicate ids are rejected with both line
// numbers; rows with empty responses are kept here and dropped by preprocess.
inline Dataset load_dataset(const std::filesystem::path& path,
                            DatasetFormat format = DatasetFormat::jsonl) {
  (void)format;
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open dataset file: " + path.string());
  Dataset d;
  d.name = path.stem().string();
  std::unordered_map<std::string, long> first_line_of_id;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      fail(ErrorKind::parse, "line " + std::to_string(line_no) + ": empty line");
    }
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::parse,
           "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (rec.is_object() && rec.contains("_meta")) {
      for (auto& [k, v] : rec["_meta"].items()) {
        d.provenance[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
      continue;
    }
    PreferencePair p;
    try {
      p = pair_from_json(rec);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::parse) {
        fail(ErrorKind::parse,
             "line " + std::to_string(line_no) + ": " + e.what());
      }
      throw;
    }
    if (p.id.empty()) {
      p.id = "row-" + std::to_string(line_no);
    }
    auto [it, inserted] = first_line_of_id.emplace(p.id, line_no);
    if (!inserted) {
      fail(ErrorKind::validation,
           "duplicate id \"" + p.id + "\" on lines " +
               std::to_string(it->second) + " and " + std::to_string(line_no));
    }
    if (rec.contains("curation") && rec["curation"].is_object()) {
      CurationInfo ci;
      const auto& c = rec["curation"];
      ci.feature_id = c.value("feature_id", -1);
      ci.z = c.value("z", 0.0);
      ci.original_label = label_from_string(c.value("original_label", std::string("A")));
      d.curation[p.id] = ci;
    }
    d.pairs.push_back(std::move(p));
  }
  return d;
}

inline void save_dataset_stream(const Dataset& d, std::ostream& out,
                                const json* meta = nullptr) {
  if (meta) {
    json m;
    m["_meta"] = *meta;
    out << m.dump() << "\n";
  }
  for (const auto& p : d.pairs) {
    auto it = d.curation.find(p.id);
    const CurationInfo* ci = it == d.curation.end() ? nullptr : &it->second;
    out << pair_to_json(p, ci).dump() << "\n";
  }
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path,
                         const json* meta = nullptr) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write dataset file: " + path.string());
  save_dataset_stream(d, out, meta);
}

struct PreprocessConfig {
  long max_token_length = 2048;
  double words_to_tokens = 4.0 / 3.0;
  // Include the prompt's words in the length-cap estimate. Word counts on the
  // pair itself always cover the stored response text only.
  bool cap_includes_prompt = true;
  bool apply_swap = true;
  uint64_t swap_seed = 0;
  // Optional row filters (e.g. language or subjectivity predicates supplied
  // by the caller); a row is kept only if every predicate returns true.
  std::vector<std::function<bool(const PreferencePair&)>> keep_predicates;
};

// Drops empty-response and over-length rows, applies user predicates, then
// randomly swaps each surviving pair with probability 1/2 under swap_seed.
// Row order is preserved.
inline Dataset preprocess(const Dataset& input, const PreprocessConfig& cfg) {
  Dataset out;
  out.name = input.name;
  out.provenance = input.provenance;
  out.curation = input.curation;
  out.swap_seed = cfg.swap_seed;
  out.swap_applied = cfg.apply_swap;
  for (const auto& orig : input.pairs) {
    PreferencePair p = orig;
    p.recount();
    if (p.word_count_a == 0 || p.word_count_b == 0) continue;
    long words = p.word_count_a + p.word_count_b +
                 (cfg.cap_includes_prompt ? word_count(p.prompt) : 0);
    if (estimate_tokens(words, cfg.words_to_tokens) > cfg.max_token_length) {
      continue;
    }
    bool keep = true;
    for (const auto& pred : cfg.keep_predicates) {
      if (!pred(p)) { keep = false; break; }
    }
    if (!keep) continue;
    out.pairs.push_back(std::move(p));
  }
  if (cfg.apply_swap) {
    Rng rng(cfg.swap_seed);
    for (auto& p : out.pairs) {
      if (rng.coin()) swap_pair(p);
    }
  }
  return out;
}

// Expands one ranked comparison into a single labeled best-vs-worst pair plus
// every other unordered pair marked as a tie (used only for feature learning).
inline std::pair<PreferencePair, std::vector<PreferencePair>> pairs_from_ranking(
    const std::string& prompt,
    const std::vector<std::pair<std::string, int>>& candidates,
    const std::string& annotator_id, const std::string& id_prefix) {
  if (candidates.size() < 2) {
    fail(ErrorKind::validation,
         "pairs_from_ranking requires at least 2 candidates, got " +
             std::to_string(candidates.size()));
  }
  size_t best = 0, worst = 0;
  for (size_t i = 1; i < candidates.size(); ++i) {
    if (candidates[i].second < candidates[best].second) best = i;
    if (candidates[i].second > candidates[worst].second) worst = i;
  }
  for (size_t i = 0; i < candidates.size(); ++i) {
    if (i != best && candidates[i].second == candidates[best].second) {
      fail(ErrorKind::validation, "rank tie at best rank " +
                                      std::to_string(candidates[best].second));
    }
    if (i != worst && candidates[i].second == candidates[worst].second) {
      fail(ErrorKind::validation, "rank tie at worst rank " +
                                      std::to_string(candidates[worst].second));
    }
  }
  auto make_pair = [&](size_t i, size_t j, Label label, const std::string& id) {
    PreferencePair p;
    p.id = id;
    p.prompt = prompt;
    p.response_a = candidates[i].first;
    p.response_b = candidates[j].first;
    p.label = label;
    p.annotator_id = annotator_id;
    p.recount();
    return p;
  };
  PreferencePair labeled =
      make_pair(best, worst, Label::A, id_prefix + "-best-worst");
  std::vector<PreferencePair> ties;
  int tie_idx = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    for (size_t j = i + 1; j < candidates.size(); ++j) {
      if ((i == best && j == worst) || (i == worst && j == best)) continue;
      ties.push_back(make_pair(i, j, Label::Tie,
                               id_prefix + "-tie-" + std::to_string(tie_idx++)));
    }
  }
  return {std::move(labeled), std::move(ties)};
}

}  // namespace prefscope
