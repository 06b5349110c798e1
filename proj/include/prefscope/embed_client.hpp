#pragma once

#include <Eigen/Dense>

// httplib drags in resolv.h, whose _res macro breaks Eigen internals; keep
// Eigen first and drop the macro.
#include <httplib.h>
#ifdef _res
#undef _res
#endif

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefscope/dataset.hpp"
#include "prefscope/error.hpp"
#include "prefscope/hash.hpp"
#include "prefscope/rng.hpp"
#include "prefscope/sae.hpp"

namespace prefscope {

struct ProviderConfig {
  std::string kind = "http";  // "http" | "stub"
  std::string base_url;
  std::string path = "/v1/embeddings";
  std::string model_id = "text-embedding-3-small";
  int dim = 1536;
  std::string api_key_env = "PREFSCOPE_API_KEY";
  int max_batch = 128;
  int max_retries = 4;
  int backoff_base_ms = 100;
  int concurrency = 8;
  std::string cache_dir;  // empty disables the cache
  uint64_t stub_seed = 0;
};

struct EmbeddingVector {
  VectorXd values;
  std::string model_id;
};

struct EmbedStats {
  long requested = 0;
  long cache_hits = 0;
  long network_requests = 0;  // HTTP requests issued (stub evaluations count too)
};

// Content-addressed on-disk store: one binary record per key plus an index
// file. Records are immutable once written (temp file + rename).
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  static std::string key_for(const std::string& model_id, const std::string& text) {
    return sha256_hex(model_id + "\n" + text);
  }

  std::optional<VectorXd> get(const std::string& key) const {
    std::ifstream in(record_path(key), std::ios::binary);
    if (!in) return std::nullopt;
    uint32_t magic = 0, dim = 0;
    in.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
    if (!in || magic != kMagic) return std::nullopt;
    VectorXd v(static_cast<long>(dim));
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(sizeof(double) * dim));
    if (!in) return std::nullopt;
    return v;
  }

  void put(const std::string& key, const VectorXd& v,
           const std::string& model_id) {
    std::lock_guard<std::mutex> lock(write_mutex_);
    auto final_path = record_path(key);
    if (std::filesystem::exists(final_path)) return;
    auto tmp = final_path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) fail(ErrorKind::io, "cache write failed: " + tmp.string());
      uint32_t magic = kMagic, dim = static_cast<uint32_t>(v.size());
      out.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
      out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
      out.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(sizeof(double) * v.size()));
    }
    std::filesystem::rename(tmp, final_path);
    std::ofstream idx(dir_ / "index.tsv", std::ios::app);
    idx << key << "\t" << v.size() << "\t" << model_id << "\n";
  }

 private:
  static constexpr uint32_t kMagic = 0x424D4557;  // "WEMB"

  std::filesystem::path record_path(const std::string& key) const {
    return dir_ / (key + ".vec");
  }

  std::filesystem::path dir_;
  mutable std::mutex write_mutex_;
};

namespace embed_detail {

// Deterministic offline provider. Rare marker tokens each contribute a fixed
// pseudo-random direction scaled by their count, so bag-of-marker structure
// survives into the embedding; a whole-text hash adds a small residual term.
inline VectorXd stub_embedding(const std::string& text, int dim, uint64_t seed) {
  VectorXd v = VectorXd::Zero(dim);
  auto token_direction = [&](uint64_t h) {
    Rng rng(splitmix64(h ^ seed));
    VectorXd t(dim);
    for (int i = 0; i < dim; ++i) t[i] = rng.normal();
    t.normalize();
    return t;
  };
  for (const auto& tok : split_words(text)) {
    if (tok.rfind("kw", 0) == 0) {
      v += token_direction(fnv1a64(tok));
    }
  }
  Rng noise(splitmix64(fnv1a64(text) ^ splitmix64(seed + 1)));
  for (int i = 0; i < dim; ++i) v[i] += 0.05 * noise.normal();
  return v;
}

struct HttpResult {
  std::vector<VectorXd> vectors;
  int attempts = 0;
};

inline bool retryable_status(int status) {
  return status == 429 || status == 500 || status == 502 || status == 503 ||
         status == 504;
}

inline HttpResult post_embedding_batch(const ProviderConfig& cfg,
                                       const std::vector<std::string>& texts) {
  httplib::Client cli(cfg.base_url);
  cli.set_connection_timeout(30);
  cli.set_read_timeout(120);
  json body;
  body["model"] = cfg.model_id;
  body["input"] = texts;
  httplib::Headers headers;
  if (const char* key = std::getenv(cfg.api_key_env.c_str()); key && *key) {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  HttpResult result;
  for (int attempt = 1; attempt <= cfg.max_retries + 1; ++attempt) {
    result.attempts = attempt;
    auto res = cli.Post(cfg.path, headers, body.dump(), "application/json");
    if (res && res->status == 200) {
      json reply;
      try {
        reply = json::parse(res->body);
      } catch (const json::exception& e) {
        fail(ErrorKind::provider_contract,
             std::string("embedding provider returned unparseable JSON: ") + e.what());
      }
      if (!reply.contains("data") || !reply["data"].is_array() ||
          reply["data"].size() != texts.size()) {
        fail(ErrorKind::provider_contract,
             "embedding provider returned wrong record count");
      }
      result.vectors.assign(texts.size(), VectorXd());
      for (const auto& item : reply["data"]) {
        size_t index = item.value("index", static_cast<size_t>(0));
        if (index >= texts.size() || !item.contains("embedding")) {
          fail(ErrorKind::provider_contract, "embedding provider reply malformed");
        }
        const auto& emb = item["embedding"];
        VectorXd v(static_cast<long>(emb.size()));
        for (size_t i = 0; i < emb.size(); ++i) v[static_cast<long>(i)] = emb[i].get<double>();
        if (v.size() != cfg.dim) {
          fail(ErrorKind::provider_contract,
               "embedding dimension mismatch: provider returned " +
                   std::to_string(v.size()) + ", config requires " +
                   std::to_string(cfg.dim));
        }
        if (!v.allFinite()) {
          fail(ErrorKind::provider_contract, "embedding contains non-finite values");
        }
        result.vectors[index] = v;
      }
      return result;
    }
    if (res && res->status == 413) {
      // Payload too large: signal the caller to bisect.
      result.vectors.clear();
      result.attempts = -res->status;
      return result;
    }
    if (res && res->status == 400 && texts.size() > 1) {
      result.vectors.clear();
      result.attempts = -res->status;
      return result;
    }
    bool retry = !res || retryable_status(res->status);
    if (!retry) {
      fail(ErrorKind::transport,
           "embedding request failed with status " + std::to_string(res->status) +
               " after " + std::to_string(attempt) + " attempt(s)");
    }
    if (attempt <= cfg.max_retries) {
      std::this_thread::sleep_for(std::chrono::milliseconds(
          cfg.backoff_base_ms * (1 << (attempt - 1))));
    }
  }
  fail(ErrorKind::transport,
       "embedding request failed after " + std::to_string(cfg.max_retries + 1) +
           " attempts");
}

// Resolves one batch, bisecting when the provider rejects the payload size.
inline void resolve_batch(const ProviderConfig& cfg,
                          const std::vector<std::string>& texts,
                          std::vector<VectorXd>& out,
                          std::atomic<long>& request_counter) {
  if (texts.empty()) return;
  ++request_counter;
  auto res = post_embedding_batch(cfg, texts);
  if (!res.vectors.empty()) {
    out = std::move(res.vectors);
    return;
  }
  if (texts.size() == 1) {
    fail(ErrorKind::provider_contract,
         "embedding provider rejected a single-text request (status " +
             std::to_string(-res.attempts) + ")");
  }
  size_t mid = texts.size() / 2;
  std::vector<std::string> left(texts.begin(), texts.begin() + static_cast<long>(mid));
  std::vector<std::string> right(texts.begin() + static_cast<long>(mid), texts.end());
  std::vector<VectorXd> lv, rv;
  resolve_batch(cfg, left, lv, request_counter);
  resolve_batch(cfg, right, rv, request_counter);
  out = std::move(lv);
  out.insert(out.end(), rv.begin(), rv.end());
}

}  // namespace embed_detail

// Embeds texts in input order with write-through caching and deduplication.
// HTTP batches run on a bounded worker pool; results assemble in input order.
inline std::vector<EmbeddingVector> embed_texts(
    const std::vector<std::string>& texts, const ProviderConfig& cfg,
    EmbedStats* stats = nullptr) {
  if (texts.empty()) {
    fail(ErrorKind::validation, "embed_texts: empty input list");
  }
  EmbedStats local;
  local.requested = static_cast<long>(texts.size());

  std::optional<EmbeddingCache> cache;
  if (!cfg.cache_dir.empty()) cache.emplace(cfg.cache_dir);

  // Unique texts in first-appearance order.
  std::unordered_map<std::string, size_t> unique_slot;
  std::vector<std::string> unique_texts;
  for (const auto& t : texts) {
    if (unique_slot.emplace(t, unique_texts.size()).second) {
      unique_texts.push_back(t);
    }
  }

  std::vector<VectorXd> resolved(unique_texts.size());
  std::vector<size_t> missing;
  for (size_t i = 0; i < unique_texts.size(); ++i) {
    if (cache) {
      auto key = EmbeddingCache::key_for(cfg.model_id, unique_texts[i]);
      if (auto hit = cache->get(key)) {
        if (hit->size() != cfg.dim) {
          fail(ErrorKind::provider_contract,
               "cached embedding dimension mismatch for key " + key);
        }
        resolved[i] = std::move(*hit);
        ++local.cache_hits;
        continue;
      }
    }
    missing.push_back(i);
  }

  if (!missing.empty()) {
    if (cfg.kind == "stub") {
      for (size_t i : missing) {
        resolved[i] = embed_detail::stub_embedding(unique_texts[i], cfg.dim,
                                                   cfg.stub_seed);
        ++local.network_requests;
      }
    } else if (cfg.kind == "http") {
      if (cfg.base_url.empty()) {
        fail(ErrorKind::validation, "embed_texts: provider base_url not configured");
      }
      struct Batch {
        std::vector<size_t> slots;
        std::vector<std::string> texts;
      };
      std::vector<Batch> batches;
      for (size_t pos = 0; pos < missing.size(); pos += static_cast<size_t>(cfg.max_batch)) {
        Batch b;
        for (size_t i = pos; i < missing.size() && i < pos + static_cast<size_t>(cfg.max_batch); ++i) {
          b.slots.push_back(missing[i]);
          b.texts.push_back(unique_texts[missing[i]]);
        }
        batches.push_back(std::move(b));
      }
      std::atomic<size_t> next{0};
      std::atomic<long> request_counter{0};
      std::mutex error_mutex;
      std::optional<Error> first_error;
      auto worker = [&]() {
        while (true) {
          size_t b = next.fetch_add(1);
          if (b >= batches.size()) return;
          {
            std::lock_guard<std::mutex> lk(error_mutex);
            if (first_error) return;
          }
          try {
            std::vector<VectorXd> vecs;
            embed_detail::resolve_batch(cfg, batches[b].texts, vecs, request_counter);
            for (size_t i = 0; i < vecs.size(); ++i) {
              resolved[batches[b].slots[i]] = std::move(vecs[i]);
            }
          } catch (const Error& e) {
            std::lock_guard<std::mutex> lk(error_mutex);
            if (!first_error) first_error = e;
            return;
          }
        }
      };
      int n_threads = std::max(1, std::min<int>(cfg.concurrency,
                                                static_cast<int>(batches.size())));
      std::vector<std::thread> pool;
      pool.reserve(static_cast<size_t>(n_threads));
      for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
      if (first_error) throw *first_error;
      local.network_requests += request_counter.load();
    } else {
      fail(ErrorKind::validation, "embed_texts: unknown provider kind " + cfg.kind);
    }
    if (cache) {
      for (size_t i : missing) {
        cache->put(EmbeddingCache::key_for(cfg.model_id, unique_texts[i]),
                   resolved[i], cfg.model_id);
      }
    }
  }

  std::vector<EmbeddingVector> out;
  out.reserve(texts.size());
  for (const auto& t : texts) {
    const VectorXd& v = resolved[unique_slot[t]];
    if (v.size() != cfg.dim) {
      fail(ErrorKind::provider_contract, "embedding dimension mismatch in assembly");
    }
    out.push_back({v, cfg.model_id});
  }
  if (stats) *stats = local;
  return out;
}

struct DiffConfig {
  bool include_prompt = false;  // embed prompt+response transcripts instead
};

// e_delta = embed(response_a) - embed(response_b), in dataset order. Tie and
// labeled rows both flow through; feature learning uses everything.
inline std::vector<DiffRecord> compute_diffs(const Dataset& d,
                                             const ProviderConfig& cfg,
                                             const DiffConfig& diff_cfg = {},
                                             EmbedStats* stats = nullptr) {
  if (d.pairs.empty()) fail(ErrorKind::validation, "compute_diffs: empty dataset");
  std::vector<std::string> texts;
  texts.reserve(d.pairs.size() * 2);
  for (const auto& p : d.pairs) {
    if (diff_cfg.include_prompt) {
      texts.push_back(p.prompt + "\n\n" + p.response_a);
      texts.push_back(p.prompt + "\n\n" + p.response_b);
    } else {
      texts.push_back(p.response_a);
      texts.push_back(p.response_b);
    }
  }
  auto embedded = embed_texts(texts, cfg, stats);
  std::vector<DiffRecord> out;
  out.reserve(d.pairs.size());
  for (size_t i = 0; i < d.pairs.size(); ++i) {
    out.push_back({d.pairs[i].id,
                   embedded[2 * i].values - embedded[2 * i + 1].values});
  }
  return out;
}

// ---- binary container for diff matrices (pair ids + row-major doubles) ----

inline void save_diffs(const std::vector<DiffRecord>& diffs,
                       const std::filesystem::path& path) {
  if (diffs.empty()) fail(ErrorKind::validation, "save_diffs: nothing to save");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write diffs: " + path.string());
  uint32_t magic = 0x46494457;  // "WDIF"
  uint32_t version = 1;
  uint64_t n = diffs.size();
  uint32_t dim = static_cast<uint32_t>(diffs.front().e_delta.size());
  out.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  for (const auto& rec : diffs) {
    if (rec.e_delta.size() != dim) {
      fail(ErrorKind::validation, "save_diffs: inconsistent dimension");
    }
    uint32_t len = static_cast<uint32_t>(rec.pair_id.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(rec.pair_id.data(), len);
    out.write(reinterpret_cast<const char*>(rec.e_delta.data()),
              static_cast<std::streamsize>(sizeof(double) * dim));
  }
}

inline std::vector<DiffRecord> load_diffs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open diffs: " + path.string());
  uint32_t magic = 0, version = 0, dim = 0;
  uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&magic), sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  if (!in || magic != 0x46494457 || version != 1) {
    fail(ErrorKind::parse, "not a diff container: " + path.string());
  }
  std::vector<DiffRecord> out;
  out.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string id(len, '\0');
    in.read(id.data(), len);
    VectorXd v(static_cast<long>(dim));
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(sizeof(double) * dim));
    if (!in) fail(ErrorKind::parse, "truncated diff container: " + path.string());
    out.push_back({std::move(id), std::move(v)});
  }
  return out;
}

}  // namespace prefscope
