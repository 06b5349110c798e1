#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "prefscope/dataset.hpp"
#include "prefscope/llm.hpp"
#include "prefscope/prompts.hpp"
#include "prefscope/sae.hpp"
#include "prefscope/stats.hpp"

namespace prefscope {

struct FeatureDescription {
  int feature_id = -1;
  std::string text;
  double fidelity = 0.0;
  double p_value = 1.0;
  bool significant = false;
  int n_annotations = 0;
};

struct JudgeAnnotation {
  std::string pair_id;
  int feature_id = -1;
  int verdict = 0;  // -1, 0, +1
};

namespace interp_detail {

inline void check_alignment(const LatentMatrix& z, const Dataset& d) {
  if (static_cast<size_t>(z.z.rows()) != d.pairs.size()) {
    fail(ErrorKind::validation, "latent matrix and dataset row counts differ");
  }
  for (size_t i = 0; i < d.pairs.size(); ++i) {
    if (z.pair_ids[i] != d.pairs[i].id) {
      fail(ErrorKind::validation,
           "latent matrix row " + std::to_string(i) + " is not aligned with pair " +
               d.pairs[i].id);
    }
  }
}

}  // namespace interp_detail

// Rows whose signed activation reaches the 95th percentile of column j.
// Only strictly positive activations qualify; an all-zero feature has an
// empty top set.
inline std::vector<size_t> top_activation_rows(const LatentMatrix& z, int j) {
  const long n = z.z.rows();
  std::vector<double> col(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) col[static_cast<size_t>(i)] = z.z(i, j);
  double threshold = quantile(col, 0.95);
  std::vector<size_t> rows;
  for (long i = 0; i < n; ++i) {
    double v = z.z(i, j);
    if (v > 0.0 && v >= threshold) rows.push_back(static_cast<size_t>(i));
  }
  return rows;
}

inline std::vector<size_t> sample_top_rows(const LatentMatrix& z, int j, int n,
                                           Rng rng) {
  auto eligible = top_activation_rows(z, j);
  if (eligible.empty()) {
    fail(ErrorKind::degenerate,
         "feature " + std::to_string(j) + ": empty top-activation set");
  }
  if (static_cast<int>(eligible.size()) < n) {
    fail(ErrorKind::insufficient_data,
         "feature " + std::to_string(j) + ": only " +
             std::to_string(eligible.size()) + " rows in the top set, need " +
             std::to_string(n));
  }
  auto picks = rng.sample_indices(eligible.size(), static_cast<size_t>(n));
  std::vector<size_t> rows;
  rows.reserve(picks.size());
  for (size_t p : picks) rows.push_back(eligible[p]);
  return rows;
}

inline std::vector<std::string> sample_top_pairs(const LatentMatrix& z, int j,
                                                 int n, uint64_t seed) {
  auto rows = sample_top_rows(z, j, n, Rng(seed));
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (size_t r : rows) ids.push_back(z.pair_ids[r]);
  return ids;
}

// Strict parse of the describer reply into a bare description phrase.
inline std::string parse_description_reply(const std::string& reply,
                                           const std::string& transcript_ref) {
  std::string s = reply;
  auto trim = [](std::string& t) {
    while (!t.empty() && std::isspace(static_cast<unsigned char>(t.front()))) t.erase(t.begin());
    while (!t.empty() && std::isspace(static_cast<unsigned char>(t.back()))) t.pop_back();
  };
  trim(s);
  if (s.rfind("- ", 0) == 0) s.erase(0, 2);
  trim(s);
  if (!s.empty() && s.front() == '"') s.erase(s.begin());
  if (!s.empty() && s.back() == '"') s.pop_back();
  trim(s);
  if (s.empty() || s.find('\n') != std::string::npos) {
    fail(ErrorKind::annotation,
         "describer reply is not a single quoted description (" + transcript_ref + ")");
  }
  if (contains_ci(s, "response a") || contains_ci(s, "response b")) {
    fail(ErrorKind::annotation,
         "description refers to the response sides (" + transcript_ref + ")");
  }
  return s;
}

struct ProposedDescription {
  std::string text;
  std::vector<size_t> example_rows;
};

// Generates n_candidates descriptions for feature j, each from an
// independently re-sampled top-activation example set.
inline std::vector<ProposedDescription> propose_descriptions(
    int j, const LatentMatrix& z, const Dataset& d, int n_candidates,
    int n_examples, ChatClient& llm, const Rng& rng, const AuditLog& audit) {
  interp_detail::check_alignment(z, d);
  if (n_examples < 1) {
    fail(ErrorKind::validation, "propose_descriptions: need at least one example");
  }
  std::vector<ProposedDescription> out;
  for (int c = 0; c < n_candidates; ++c) {
    auto rows = sample_top_rows(z, j, n_examples,
                                rng.derive(0x9e00 + static_cast<uint64_t>(c)));
    std::string examples;
    for (size_t e = 0; e < rows.size(); ++e) {
      const auto& p = d.pairs[rows[e]];
      examples += "EXAMPLE " + std::to_string(e + 1) + "\n";
      examples += "CONTEXT: " + p.prompt + "\n";
      examples += "RESPONSE A: " + p.response_a + "\n";
      examples += "RESPONSE B: " + p.response_b + "\n\n";
    }
    std::string prompt = fill_template(kFeatureInterpTemplate, {{"examples", examples}});
    std::string reply = llm.complete(prompt);
    audit.record(j, "proposal-" + std::to_string(c), prompt, reply);
    std::string text = parse_description_reply(
        reply, audit.transcript_ref(j, "proposal-" + std::to_string(c)));
    out.push_back({text, rows});
  }
  return out;
}

// Single judge call: which side the description applies to more.
inline JudgeAnnotation annotate_presence(const std::string& description,
                                         const PreferencePair& pair,
                                         ChatClient& llm, const AuditLog& audit,
                                         int feature_id = -1) {
  if (description.empty()) {
    fail(ErrorKind::validation, "annotate_presence: empty description");
  }
  std::string prompt = fill_template(
      kPresenceJudgeTemplate, {{"description", "\"" + description + "\""},
                               {"context", pair.prompt},
                               {"response_a", pair.response_a},
                               {"response_b", pair.response_b}});
  std::string reply = llm.complete(prompt);
  audit.record(feature_id, pair.id, prompt, reply);
  std::string s = reply;
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  int verdict = 0;
  if (s == "+1" || s == "1") {
    verdict = 1;
  } else if (s == "-1") {
    verdict = -1;
  } else if (s == "0") {
    verdict = 0;
  } else {
    fail(ErrorKind::annotation,
         "unparseable judge verdict \"" + s + "\" (" +
             audit.transcript_ref(feature_id, pair.id) + ")");
  }
  return {pair.id, feature_id, verdict};
}

struct FidelityResult {
  double fidelity = 0.0;
  double p_value = 1.0;
  int n_used = 0;
  int n_failed = 0;
  bool shortfall = false;  // fewer than the requested rows existed
};

struct FidelityOptions {
  int n_annotations = 300;
  int concurrency = 8;
};

// Pearson correlation between signed activations and judge verdicts over
// held-out rows with z_j != 0, excluding description-generation examples.
inline FidelityResult fidelity_score(int j, const std::string& description,
                                     const LatentMatrix& z, const Dataset& d,
                                     ChatClient& llm, Rng rng,
                                     const AuditLog& audit,
                                     const std::set<size_t>& exclude_rows = {},
                                     const FidelityOptions& opts = {}) {
  interp_detail::check_alignment(z, d);
  std::vector<size_t> candidates;
  for (long i = 0; i < z.z.rows(); ++i) {
    if (z.z(i, j) != 0.0 && exclude_rows.count(static_cast<size_t>(i)) == 0) {
      candidates.push_back(static_cast<size_t>(i));
    }
  }
  FidelityResult result;
  if (candidates.size() < 2) {
    fail(ErrorKind::degenerate,
         "feature " + std::to_string(j) + ": fewer than 2 held-out nonzero rows");
  }
  std::vector<size_t> rows;
  if (static_cast<int>(candidates.size()) <= opts.n_annotations) {
    rows = candidates;
    result.shortfall = static_cast<int>(candidates.size()) < opts.n_annotations;
  } else {
    auto picks = rng.sample_indices(candidates.size(),
                                    static_cast<size_t>(opts.n_annotations));
    for (size_t p : picks) rows.push_back(candidates[p]);
  }

  std::vector<int> verdicts(rows.size(), 0);
  std::vector<char> ok(rows.size(), 0);
  parallel_for_indexed(rows.size(), opts.concurrency, [&](size_t i) {
    try {
      auto ann = annotate_presence(description, d.pairs[rows[i]], llm, audit, j);
      verdicts[i] = ann.verdict;
      ok[i] = 1;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::annotation) throw;
      ok[i] = 0;  // excluded, surfaced via n_failed
    }
  });

  std::vector<double> zs, vs;
  for (size_t i = 0; i < rows.size(); ++i) {
    if (!ok[i]) {
      ++result.n_failed;
      continue;
    }
    zs.push_back(z.z(static_cast<long>(rows[i]), j));
    vs.push_back(static_cast<double>(verdicts[i]));
  }
  result.n_used = static_cast<int>(zs.size());
  if (result.n_used < 2) {
    fail(ErrorKind::degenerate,
         "feature " + std::to_string(j) + ": fewer than 2 usable annotations");
  }
  VectorXd zv = Eigen::Map<VectorXd>(zs.data(), static_cast<long>(zs.size()));
  VectorXd vv = Eigen::Map<VectorXd>(vs.data(), static_cast<long>(vs.size()));
  try {
    result.fidelity = pearson_corr(zv, vv);
  } catch (const Error&) {
    fail(ErrorKind::degenerate,
         "feature " + std::to_string(j) +
             ": fidelity undefined (zero variance in verdicts or activations)");
  }
  result.p_value = pearson_p_value(result.fidelity, result.n_used);
  return result;
}

struct ScoredCandidate {
  std::string text;
  double fidelity = 0.0;
  double p_value = 1.0;
  int n_annotations = 0;
};

// Per feature, keeps the highest-fidelity candidate and applies a Bonferroni
// gate across all latent_dim features.
inline std::vector<FeatureDescription> select_and_filter(
    const std::map<int, std::vector<ScoredCandidate>>& candidates, int latent_dim) {
  std::vector<FeatureDescription> out;
  for (const auto& [j, cands] : candidates) {
    if (cands.empty()) {
      fail(ErrorKind::validation,
           "select_and_filter: feature " + std::to_string(j) + " has no candidates");
    }
    const ScoredCandidate* best = &cands.front();
    for (const auto& c : cands) {
      if (c.fidelity > best->fidelity) best = &c;
    }
    FeatureDescription fd;
    fd.feature_id = j;
    fd.text = best->text;
    fd.fidelity = best->fidelity;
    fd.p_value = best->p_value;
    fd.n_annotations = best->n_annotations;
    fd.significant = best->p_value * static_cast<double>(latent_dim) < 0.05;
    out.push_back(std::move(fd));
  }
  return out;
}

struct InterpretOptions {
  int n_candidates = 5;
  int n_examples = 5;
  FidelityOptions fidelity;
};

struct InterpretReport {
  std::vector<FeatureDescription> features;   // scored features, by id
  std::map<int, std::string> skipped;         // feature -> reason
};

// Full step-2 orchestration: propose candidates, score fidelity on held-out
// rows disjoint from the proposal examples, keep the best per feature.
inline InterpretReport describe_features(const LatentMatrix& z, const Dataset& d,
                                         ChatClient& llm, uint64_t seed,
                                         const AuditLog& audit,
                                         const InterpretOptions& opts = {}) {
  interp_detail::check_alignment(z, d);
  InterpretReport report;
  std::map<int, std::vector<ScoredCandidate>> scored;
  const int m = static_cast<int>(z.z.cols());
  for (int j = 0; j < m; ++j) {
    Rng feature_rng = Rng(seed).derive(0xfea70000u + static_cast<uint64_t>(j));
    try {
      auto proposals = propose_descriptions(j, z, d, opts.n_candidates,
                                            opts.n_examples, llm, feature_rng, audit);
      std::set<size_t> exclude;
      for (const auto& p : proposals) {
        exclude.insert(p.example_rows.begin(), p.example_rows.end());
      }
      std::vector<ScoredCandidate> cands;
      std::string last_error;
      for (size_t c = 0; c < proposals.size(); ++c) {
        try {
          auto fr = fidelity_score(j, proposals[c].text, z, d, llm,
                                   feature_rng.derive(0xf1d0 + c), audit, exclude,
                                   opts.fidelity);
          cands.push_back({proposals[c].text, fr.fidelity, fr.p_value, fr.n_used});
        } catch (const Error& e) {
          last_error = e.what();
        }
      }
      if (cands.empty()) {
        report.skipped[j] = last_error.empty() ? "no scoreable candidates" : last_error;
        continue;
      }
      scored[j] = std::move(cands);
    } catch (const Error& e) {
      report.skipped[j] = e.what();
    }
  }
  report.features = select_and_filter(scored, m);
  return report;
}

struct MatchReport {
  double match_rate = 0.0;
  double baseline_rate = 0.0;
  std::map<int, long> per_feature_counts;
  long n_judged = 0;
  long n_skipped_no_explanation = 0;
  long n_failed = 0;
};

struct MatchOptions {
  int n_pairs = 5000;
  int max_features = 4;
  int concurrency = 8;
};

// Checks whether any active feature's description matches the annotator's
// explanation, against a baseline of random inactive features.
inline MatchReport match_explanations(const Dataset& d, const LatentMatrix& z,
                                      const std::vector<FeatureDescription>& descriptions,
                                      ChatClient& llm, uint64_t seed,
                                      const AuditLog& audit,
                                      const MatchOptions& opts = {}) {
  interp_detail::check_alignment(z, d);
  std::map<int, std::string> desc_by_id;
  for (const auto& fd : descriptions) desc_by_id[fd.feature_id] = fd.text;
  if (desc_by_id.empty()) {
    fail(ErrorKind::validation, "match_explanations: no feature descriptions");
  }

  MatchReport report;
  std::vector<size_t> eligible;
  for (size_t i = 0; i < d.pairs.size(); ++i) {
    if (!d.pairs[i].explanation.empty()) {
      eligible.push_back(i);
    } else {
      ++report.n_skipped_no_explanation;
    }
  }
  if (eligible.empty()) {
    fail(ErrorKind::insufficient_data, "match_explanations: no explanations present");
  }
  Rng rng(seed);
  std::vector<size_t> rows;
  if (static_cast<long>(eligible.size()) <= opts.n_pairs) {
    rows = eligible;
  } else {
    for (size_t p : rng.sample_indices(eligible.size(), static_cast<size_t>(opts.n_pairs))) {
      rows.push_back(eligible[p]);
    }
  }

  auto build_feature_block = [&](const std::vector<int>& ids) {
    std::string block;
    for (int id : ids) {
      block += "- " + std::to_string(id) + ": \"" + desc_by_id.at(id) + "\"\n";
    }
    if (!block.empty()) block.pop_back();
    return block;
  };

  auto judge_pair = [&](size_t row, const std::vector<int>& ids,
                        std::vector<int>& matched) -> bool {
    if (ids.empty()) {
      matched.clear();
      return true;
    }
    std::string prompt = fill_template(
        kExplanationMatchTemplate,
        {{"annotator_explanation", d.pairs[row].explanation},
         {"automated_explanation", build_feature_block(ids)}});
    std::string reply = llm.complete(prompt);
    audit.record(-1, d.pairs[row].id, prompt, reply);
    std::string s = reply;
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
    static const std::regex list_re(R"(^\[\s*(\d+(\s*,\s*\d+)*)?\s*\]$)");
    if (!std::regex_match(s, list_re)) return false;
    matched.clear();
    static const std::regex num_re(R"(\d+)");
    for (auto it = std::sregex_iterator(s.begin(), s.end(), num_re);
         it != std::sregex_iterator(); ++it) {
      int idx = std::stoi(it->str());
      if (std::find(ids.begin(), ids.end(), idx) == ids.end()) return false;
      matched.push_back(idx);
    }
    return true;
  };

  long active_matched = 0, baseline_matched = 0, judged = 0;
  struct RowOutcome {
    bool ok = false;
    bool active_match = false;
    bool baseline_match = false;
    std::vector<int> matched_ids;
  };
  std::vector<RowOutcome> outcomes(rows.size());

  // Pre-draw baseline feature sets so parallel execution stays deterministic.
  std::vector<std::vector<int>> active_sets(rows.size()), baseline_sets(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    size_t row = rows[i];
    std::vector<std::pair<double, int>> active;
    std::vector<int> inactive;
    for (const auto& [id, text] : desc_by_id) {
      double v = z.z(static_cast<long>(row), id);
      if (v != 0.0) {
        active.push_back({std::abs(v), id});
      } else {
        inactive.push_back(id);
      }
    }
    std::sort(active.begin(), active.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (size_t k = 0; k < active.size() && k < static_cast<size_t>(opts.max_features); ++k) {
      active_sets[i].push_back(active[k].second);
    }
    Rng row_rng = rng.derive(0xba5e0000u + i);
    size_t want = std::min<size_t>(static_cast<size_t>(opts.max_features), inactive.size());
    for (size_t p : row_rng.sample_indices(inactive.size(), want)) {
      baseline_sets[i].push_back(inactive[p]);
    }
  }

  parallel_for_indexed(rows.size(), opts.concurrency, [&](size_t i) {
    RowOutcome& oc = outcomes[i];
    std::vector<int> matched;
    if (!judge_pair(rows[i], active_sets[i], matched)) return;
    oc.active_match = !matched.empty();
    oc.matched_ids = matched;
    std::vector<int> baseline_matchedv;
    if (!judge_pair(rows[i], baseline_sets[i], baseline_matchedv)) return;
    oc.baseline_match = !baseline_matchedv.empty();
    oc.ok = true;
  });

  for (const auto& oc : outcomes) {
    if (!oc.ok) {
      ++report.n_failed;
      continue;
    }
    ++judged;
    if (oc.active_match) ++active_matched;
    if (oc.baseline_match) ++baseline_matched;
    for (int id : oc.matched_ids) ++report.per_feature_counts[id];
  }
  if (judged == 0) {
    fail(ErrorKind::insufficient_data, "match_explanations: all judgements failed");
  }
  report.n_judged = judged;
  report.match_rate = static_cast<double>(active_matched) / static_cast<double>(judged);
  report.baseline_rate = static_cast<double>(baseline_matched) / static_cast<double>(judged);
  return report;
}

// ---- features.json io ----

inline json interpret_report_to_json(const InterpretReport& report, int latent_dim) {
  json j;
  j["version"] = 1;
  j["latent_dim"] = latent_dim;
  j["features"] = json::array();
  for (const auto& fd : report.features) {
    j["features"].push_back({{"feature_id", fd.feature_id},
                             {"text", fd.text},
                             {"fidelity", fd.fidelity},
                             {"p_value", fd.p_value},
                             {"significant", fd.significant},
                             {"n_annotations", fd.n_annotations}});
  }
  json skipped = json::object();
  for (const auto& [id, reason] : report.skipped) {
    skipped[std::to_string(id)] = reason;
  }
  j["skipped"] = skipped;
  return j;
}

inline InterpretReport interpret_report_from_json(const json& j) {
  InterpretReport report;
  for (const auto& f : j.at("features")) {
    FeatureDescription fd;
    fd.feature_id = f.at("feature_id").get<int>();
    fd.text = f.at("text").get<std::string>();
    fd.fidelity = f.at("fidelity").get<double>();
    fd.p_value = f.at("p_value").get<double>();
    fd.significant = f.at("significant").get<bool>();
    fd.n_annotations = f.at("n_annotations").get<int>();
    report.features.push_back(std::move(fd));
  }
  if (j.contains("skipped")) {
    for (auto& [k, v] : j.at("skipped").items()) {
      report.skipped[std::stoi(k)] = v.get<std::string>();
    }
  }
  return report;
}

}  // namespace prefscope
