#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <cstring>
#include <filesystem>
#include <thread>

#include "prefscope/embed_client.hpp"

using namespace prefscope;
namespace fs = std::filesystem;

namespace {

// Local embedding provider used for exercising the HTTP path. Vector entries
// derive from the text hash so repeated runs agree.
struct TestProvider {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  int dim = 8;
  std::atomic<int> requests{0};
  std::atomic<int> failures_remaining{0};
  int reject_above_batch = 0;  // 0 = accept all sizes

  TestProvider() {
    server.Post("/v1/embeddings", [this](const httplib::Request& req,
                                         httplib::Response& res) {
      ++requests;
      if (failures_remaining.fetch_sub(1) > 0) {
        res.status = 503;
        return;
      }
      failures_remaining = 0;
      auto body = json::parse(req.body);
      auto inputs = body["input"];
      if (reject_above_batch > 0 &&
          static_cast<int>(inputs.size()) > reject_above_batch) {
        res.status = 413;
        return;
      }
      json data = json::array();
      for (size_t i = 0; i < inputs.size(); ++i) {
        std::string text = inputs[i].get<std::string>();
        Rng rng(fnv1a64(text));
        std::vector<double> v;
        for (int k = 0; k < dim; ++k) v.push_back(rng.normal());
        data.push_back({{"index", i}, {"embedding", v}});
      }
      res.set_content(json({{"data", data}}).dump(), "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~TestProvider() {
    server.stop();
    thread.join();
  }

  ProviderConfig config(const std::string& cache_dir = "") {
    ProviderConfig cfg;
    cfg.kind = "http";
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
    cfg.dim = dim;
    cfg.model_id = "test-model";
    cfg.cache_dir = cache_dir;
    cfg.backoff_base_ms = 1;
    return cfg;
  }
};

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("embed_texts dedupes within a call and returns input order") {
  TestProvider provider;
  auto cfg = provider.config();
  EmbedStats stats;
  auto out = embed_texts({"same text", "other", "same text"}, cfg, &stats);
  REQUIRE(out.size() == 3);
  CHECK((out[0].values - out[2].values).norm() == 0.0);
  CHECK(provider.requests == 1);
  CHECK(stats.network_requests == 1);
}

TEST_CASE("cache hits skip the network") {
  TestProvider provider;
  auto dir = fresh_dir("embed_cache_a");
  auto cfg = provider.config(dir.string());
  embed_texts({"a"}, cfg);
  int after_first = provider.requests;
  EmbedStats stats;
  auto out = embed_texts({"a", "b"}, cfg, &stats);
  CHECK(provider.requests == after_first + 1);  // only "b" fetched
  CHECK(stats.cache_hits == 1);
  // Round trip through the cache is bit-identical.
  EmbeddingCache cache(dir);
  auto key = EmbeddingCache::key_for(cfg.model_id, "a");
  auto cached = cache.get(key);
  REQUIRE(cached.has_value());
  CHECK(std::memcmp(cached->data(), out[0].values.data(),
                    sizeof(double) * static_cast<size_t>(cached->size())) == 0);
}

TEST_CASE("dimension mismatch raises a provider-contract error") {
  TestProvider provider;
  auto cfg = provider.config();
  cfg.dim = provider.dim + 3;
  try {
    embed_texts({"text"}, cfg);
    FAIL("expected provider-contract error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::provider_contract);
  }
}

TEST_CASE("transient failures retry, persistent failures carry the attempt count") {
  TestProvider provider;
  auto cfg = provider.config();
  provider.failures_remaining = 2;
  auto out = embed_texts({"x"}, cfg);
  CHECK(out.size() == 1);

  provider.failures_remaining = 1000;
  cfg.max_retries = 2;
  try {
    embed_texts({"y"}, cfg);
    FAIL("expected transport error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::transport);
    CHECK(std::string(e.what()).find("3 attempts") != std::string::npos);
  }
}

TEST_CASE("oversized batches bisect automatically") {
  TestProvider provider;
  provider.reject_above_batch = 3;
  auto cfg = provider.config();
  cfg.max_batch = 16;
  std::vector<std::string> texts;
  for (int i = 0; i < 10; ++i) texts.push_back("text " + std::to_string(i));
  auto out = embed_texts(texts, cfg);
  CHECK(out.size() == 10);
  for (const auto& e : out) CHECK(e.values.size() == provider.dim);
}

TEST_CASE("concurrent batches assemble in input order") {
  TestProvider provider;
  auto cfg = provider.config();
  cfg.max_batch = 4;
  cfg.concurrency = 8;
  std::vector<std::string> texts;
  for (int i = 0; i < 50; ++i) texts.push_back("item " + std::to_string(i));
  auto parallel = embed_texts(texts, cfg);
  cfg.concurrency = 1;
  auto serial = embed_texts(texts, cfg);
  REQUIRE(parallel.size() == serial.size());
  for (size_t i = 0; i < parallel.size(); ++i) {
    CHECK((parallel[i].values - serial[i].values).norm() == 0.0);
  }
}

TEST_CASE("compute_diffs basics") {
  Dataset d;
  auto add = [&](std::string id, std::string a, std::string b) {
    PreferencePair p;
    p.id = std::move(id);
    p.prompt = "q";
    p.response_a = std::move(a);
    p.response_b = std::move(b);
    p.recount();
    d.pairs.push_back(p);
  };
  add("same", "identical words", "identical words");
  add("fwd", "alpha text", "beta text");
  add("rev", "beta text", "alpha text");

  ProviderConfig cfg;
  cfg.kind = "stub";
  cfg.dim = 16;
  auto diffs = compute_diffs(d, cfg);
  REQUIRE(diffs.size() == 3);
  CHECK(diffs[0].e_delta.norm() == 0.0);
  CHECK((diffs[1].e_delta + diffs[2].e_delta).norm() == 0.0);
  double cosine = diffs[1].e_delta.dot(diffs[2].e_delta) /
                  (diffs[1].e_delta.norm() * diffs[2].e_delta.norm());
  CHECK(cosine == Catch::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("warm cache makes compute_diffs a pure replay") {
  TestProvider provider;
  auto dir = fresh_dir("embed_cache_b");
  auto cfg = provider.config(dir.string());
  Dataset d;
  for (int i = 0; i < 5; ++i) {
    PreferencePair p;
    p.id = "p" + std::to_string(i);
    p.prompt = "q";
    p.response_a = "first version " + std::to_string(i);
    p.response_b = "second version " + std::to_string(i);
    p.recount();
    d.pairs.push_back(p);
  }
  auto first = compute_diffs(d, cfg);
  int requests_after_first = provider.requests;
  EmbedStats stats;
  auto second = compute_diffs(d, cfg, {}, &stats);
  CHECK(provider.requests == requests_after_first);
  CHECK(stats.network_requests == 0);
  for (size_t i = 0; i < first.size(); ++i) {
    CHECK((first[i].e_delta - second[i].e_delta).norm() == 0.0);
  }
}

TEST_CASE("diff container round trips") {
  std::vector<DiffRecord> diffs;
  Rng rng(3);
  for (int i = 0; i < 7; ++i) {
    VectorXd v(5);
    for (int k = 0; k < 5; ++k) v[k] = rng.normal();
    diffs.push_back({"id-" + std::to_string(i), v});
  }
  auto path = fs::temp_directory_path() / "diffs_rt.bin";
  save_diffs(diffs, path);
  auto back = load_diffs(path);
  REQUIRE(back.size() == diffs.size());
  for (size_t i = 0; i < diffs.size(); ++i) {
    CHECK(back[i].pair_id == diffs[i].pair_id);
    CHECK((back[i].e_delta - diffs[i].e_delta).norm() == 0.0);
  }
}

TEST_CASE("empty input is a validation error") {
  ProviderConfig cfg;
  cfg.kind = "stub";
  cfg.dim = 4;
  CHECK_THROWS_AS(embed_texts({}, cfg), Error);
}
