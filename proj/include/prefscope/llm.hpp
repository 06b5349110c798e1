#pragma once

#include <Eigen/Dense>

#include <httplib.h>
#ifdef _res
#undef _res
#endif

#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefscope/error.hpp"
#include "prefscope/text.hpp"

namespace prefscope {

struct LlmConfig {
  std::string kind = "http";  // "http" | "stub"
  std::string base_url;
  std::string path = "/v1/chat/completions";
  std::string model = "judge-model";
  double temperature = 0.0;
  std::string api_key_env = "PREFSCOPE_API_KEY";
  int max_retries = 4;
  int backoff_base_ms = 100;
  int concurrency = 8;
};

// Minimal chat interface; implementations must be safe to call from several
// threads at once.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(LlmConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.base_url.empty()) {
      fail(ErrorKind::validation, "chat client: base_url not configured");
    }
  }

  std::string complete(const std::string& prompt) override {
    json body;
    body["model"] = cfg_.model;
    body["temperature"] = cfg_.temperature;
    body["messages"] = json::array({{{"role", "user"}, {"content", prompt}}});
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    for (int attempt = 1; attempt <= cfg_.max_retries + 1; ++attempt) {
      httplib::Client cli(cfg_.base_url);
      cli.set_connection_timeout(30);
      cli.set_read_timeout(300);
      auto res = cli.Post(cfg_.path, headers, body.dump(), "application/json");
      if (res && res->status == 200) {
        json reply;
        try {
          reply = json::parse(res->body);
        } catch (const json::exception& e) {
          fail(ErrorKind::provider_contract,
               std::string("chat provider returned unparseable JSON: ") + e.what());
        }
        try {
          return reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception&) {
          fail(ErrorKind::provider_contract, "chat reply missing choices[0].message.content");
        }
      }
      bool retry = !res || res->status == 429 || res->status >= 500;
      if (!retry) {
        fail(ErrorKind::transport,
             "chat request failed with status " + std::to_string(res->status) +
                 " after " + std::to_string(attempt) + " attempt(s)");
      }
      if (attempt <= cfg_.max_retries) {
        std::this_thread::sleep_for(
            std::chrono::milliseconds(cfg_.backoff_base_ms * (1 << (attempt - 1))));
      }
    }
    fail(ErrorKind::transport, "chat request failed after " +
                                   std::to_string(cfg_.max_retries + 1) + " attempts");
  }

 private:
  LlmConfig cfg_;
};

namespace llm_detail {

inline long count_occurrences(const std::string& text, const std::string& word) {
  long n = 0;
  for (const auto& tok : split_words(text)) {
    if (tok == word) ++n;
  }
  return n;
}

inline std::optional<std::string> first_marker_token(const std::string& text) {
  static const std::regex kw("(kw[a-z0-9]+)");
  std::smatch m;
  if (std::regex_search(text, m, kw)) return m[1].str();
  return std::nullopt;
}

struct Example {
  std::string context;
  std::string response_a;
  std::string response_b;
};

// Line-oriented parse of the EXAMPLES block of the interpretation prompt.
inline std::vector<Example> parse_examples(const std::string& prompt) {
  std::vector<Example> out;
  std::istringstream in(prompt);
  std::string line;
  bool inside = false;
  Example cur;
  std::string* sink = nullptr;
  auto flush = [&]() {
    if (!cur.response_a.empty() || !cur.response_b.empty()) out.push_back(cur);
    cur = Example{};
  };
  while (std::getline(in, line)) {
    if (line.rfind("----------------", 0) == 0) {
      if (inside) { flush(); break; }
      inside = true;
      continue;
    }
    if (!inside) continue;
    if (line.rfind("EXAMPLE", 0) == 0) {
      flush();
      sink = nullptr;
    } else if (line.rfind("CONTEXT:", 0) == 0) {
      cur.context = line.substr(8);
      sink = &cur.context;
    } else if (line.rfind("RESPONSE A:", 0) == 0) {
      cur.response_a = line.substr(11);
      sink = &cur.response_a;
    } else if (line.rfind("RESPONSE B:", 0) == 0) {
      cur.response_b = line.substr(11);
      sink = &cur.response_b;
    } else if (sink) {
      *sink += "\n" + line;
    }
  }
  return out;
}

inline std::string section_after(const std::string& prompt, const std::string& marker) {
  auto pos = prompt.find(marker);
  if (pos == std::string::npos) return "";
  return prompt.substr(pos + marker.size());
}

inline std::string line_after(const std::string& prompt, const std::string& marker) {
  auto rest = section_after(prompt, marker);
  auto end = rest.find('\n');
  return end == std::string::npos ? rest : rest.substr(0, end);
}

inline std::string block_between(const std::string& prompt, const std::string& begin,
                                 const std::string& end_marker) {
  auto pos = prompt.find(begin);
  if (pos == std::string::npos) return "";
  auto rest = prompt.substr(pos + begin.size());
  auto end = rest.find(end_marker);
  return end == std::string::npos ? rest : rest.substr(0, end);
}

}  // namespace llm_detail

// Deterministic offline judge/describer. It understands the three prompt
// layouts this library emits and answers from surface text statistics, with
// rare "kw..." marker tokens as the primary signal. It exists so the whole
// pipeline can run and be tested without any provider.
class StubChatClient : public ChatClient {
 public:
  StubChatClient() = default;

  std::string complete(const std::string& prompt) override {
    if (prompt.find("Features Predicted by Automated Explanation") != std::string::npos) {
      return answer_explanation_match(prompt);
    }
    if (prompt.find("FEATURE DESCRIPTION:") != std::string::npos) {
      return answer_presence(prompt);
    }
    if (prompt.find("what text feature causes a specific neuron") != std::string::npos) {
      return answer_describe(prompt);
    }
    fail(ErrorKind::provider_contract, "stub chat client: unrecognized prompt layout");
  }

 private:
  static std::string answer_describe(const std::string& prompt) {
    auto examples = llm_detail::parse_examples(prompt);
    if (examples.empty()) return "- \"gives a different style of answer\"";
    // Score tokens by their summed A-minus-B count difference.
    std::map<std::string, long> score;
    for (const auto& ex : examples) {
      std::map<std::string, long> diff;
      for (const auto& t : split_words(ex.response_a)) diff[t] += 1;
      for (const auto& t : split_words(ex.response_b)) diff[t] -= 1;
      for (const auto& [tok, v] : diff) {
        if (tok.size() >= 3) score[tok] += v;
      }
    }
    std::string best;
    long best_mag = 0;
    for (const auto& [tok, v] : score) {
      long mag = std::abs(v);
      bool marker = tok.rfind("kw", 0) == 0;
      long weighted = marker ? mag * 16 : mag;
      if (weighted > best_mag) {
        best_mag = weighted;
        best = (v >= 0 ? "" : "!") + tok;
      }
    }
    if (best.empty()) return "- \"gives a different style of answer\"";
    bool negated = best[0] == '!';
    std::string tok = negated ? best.substr(1) : best;
    std::string desc = negated ? "does not use the term " + tok
                               : "uses the term " + tok;
    return "- \"" + desc + "\"";
  }

  static std::string answer_presence(const std::string& prompt) {
    std::string description = llm_detail::line_after(prompt, "FEATURE DESCRIPTION:");
    std::string a = llm_detail::block_between(prompt, "RESPONSE A:\n", "\nRESPONSE B:");
    std::string b = llm_detail::block_between(prompt, "RESPONSE B:\n", "\nDecide which response");
    bool negated = description.find("does not") != std::string::npos;
    long diff = 0;
    if (auto tok = llm_detail::first_marker_token(description)) {
      diff = llm_detail::count_occurrences(a, *tok) -
             llm_detail::count_occurrences(b, *tok);
    } else {
      for (const auto& w : split_words(description)) {
        if (w.size() < 4) continue;
        diff += llm_detail::count_occurrences(a, w) - llm_detail::count_occurrences(b, w);
      }
    }
    if (negated) diff = -diff;
    if (diff > 0) return "+1";
    if (diff < 0) return "-1";
    return "0";
  }

  static std::string answer_explanation_match(const std::string& prompt) {
    std::string explanation =
        llm_detail::line_after(prompt, "Annotator Explanation:");
    std::string block = llm_detail::block_between(
        prompt, "Features Predicted by Automated Explanation:\n", "\n\nIf No,");
    std::vector<int> matched;
    std::istringstream in(block);
    std::string line;
    static const std::regex item("^-? ?(\\d+): (.*)$");
    while (std::getline(in, line)) {
      std::smatch m;
      if (!std::regex_match(line, m, item)) continue;
      int idx = std::stoi(m[1].str());
      std::string desc = m[2].str();
      bool hit = false;
      if (auto tok = llm_detail::first_marker_token(desc)) {
        hit = llm_detail::count_occurrences(explanation, *tok) > 0;
      } else {
        for (const auto& w : split_words(desc)) {
          if (w.size() >= 5 && llm_detail::count_occurrences(explanation, w) > 0) {
            hit = true;
            break;
          }
        }
      }
      if (hit) matched.push_back(idx);
    }
    std::string out = "[";
    for (size_t i = 0; i < matched.size(); ++i) {
      if (i) out += ", ";
      out += std::to_string(matched[i]);
    }
    return out + "]";
  }
};

inline std::unique_ptr<ChatClient> make_chat_client(const LlmConfig& cfg) {
  if (cfg.kind == "stub") return std::make_unique<StubChatClient>();
  if (cfg.kind == "http") return std::make_unique<HttpChatClient>(cfg);
  fail(ErrorKind::validation, "unknown chat client kind: " + cfg.kind);
}

// Persists raw prompt/reply transcripts keyed by (run id, feature id, pair id)
// so nondeterministic provider behavior stays auditable.
class AuditLog {
 public:
  AuditLog() = default;
  AuditLog(std::filesystem::path dir, std::string run_id)
      : dir_(std::move(dir)), run_id_(std::move(run_id)) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_ / run_id_);
  }

  bool enabled() const { return !dir_.empty(); }

  void record(int feature_id, const std::string& pair_id,
              const std::string& prompt, const std::string& reply) const {
    if (!enabled()) return;
    auto feature_dir = dir_ / run_id_ / ("feature_" + std::to_string(feature_id));
    std::filesystem::create_directories(feature_dir);
    std::string safe;
    for (char c : pair_id) {
      safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')
                  ? c : '_';
    }
    static std::atomic<long> counter{0};
    auto path = feature_dir / (safe + "-" + std::to_string(counter.fetch_add(1)) + ".json");
    json rec;
    rec["pair_id"] = pair_id;
    rec["prompt"] = prompt;
    rec["reply"] = reply;
    std::ofstream out(path);
    out << rec.dump(2) << "\n";
  }

  std::string transcript_ref(int feature_id, const std::string& pair_id) const {
    if (!enabled()) return "(audit disabled)";
    return (dir_ / run_id_ / ("feature_" + std::to_string(feature_id)) / pair_id).string();
  }

 private:
  std::filesystem::path dir_;
  std::string run_id_;
};

// Applies fn to [0, n) with bounded parallelism; results land by index so the
// output order never depends on scheduling.
template <typename Fn>
inline void parallel_for_indexed(size_t n, int concurrency, Fn&& fn) {
  if (n == 0) return;
  int workers = std::max(1, std::min<int>(concurrency, static_cast<int>(n)));
  if (workers == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::mutex error_mutex;
  std::optional<Error> first_error;
  auto work = [&]() {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard<std::mutex> lk(error_mutex);
        if (first_error) return;
      }
      try {
        fn(i);
      } catch (const Error& e) {
        std::lock_guard<std::mutex> lk(error_mutex);
        if (!first_error) first_error = e;
        return;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(error_mutex);
        if (!first_error) first_error = Error(ErrorKind::numeric, e.what());
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (first_error) throw *first_error;
}

}  // namespace prefscope
