#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "prefscope/dataset.hpp"

using namespace prefscope;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
  fs::path p = fs::temp_directory_path() / name;
  std::ofstream out(p);
  out << content;
  return p;
}

PreferencePair make_pair(std::string id, std::string a, std::string b,
                         Label label = Label::A) {
  PreferencePair p;
  p.id = std::move(id);
  p.prompt = "prompt text";
  p.response_a = std::move(a);
  p.response_b = std::move(b);
  p.label = label;
  p.recount();
  return p;
}

}  // namespace

TEST_CASE("load_dataset reads valid jsonl") {
  auto path = write_temp("ds_valid.jsonl",
      R"({"id":"p1","prompt":"q","response_a":"hello there","response_b":"hi","label":"A"})"
      "\n"
      R"({"id":"p2","prompt":"q","response_a":"x","response_b":"y z","label":"B","annotator_id":"ann1"})"
      "\n"
      R"({"prompt":"q","response_a":"a b c","response_b":"d","label":"tie","explanation":"liked it"})"
      "\n");
  auto d = load_dataset(path);
  REQUIRE(d.pairs.size() == 3);
  CHECK(d.pairs[0].word_count_a == 2);
  CHECK(d.pairs[0].length_delta == 1);
  CHECK(d.pairs[1].annotator_id == "ann1");
  CHECK(d.pairs[2].label == Label::Tie);
  CHECK(d.pairs[2].id == "row-3");
  CHECK(d.pairs[2].explanation == "liked it");
}

TEST_CASE("load_dataset keeps empty responses for preprocess to drop") {
  auto path = write_temp("ds_empty.jsonl",
      R"({"id":"p1","prompt":"q","response_a":"hi","response_b":""})"
      "\n");
  auto d = load_dataset(path);
  REQUIRE(d.pairs.size() == 1);
  auto out = preprocess(d, {});
  CHECK(out.pairs.empty());
}

TEST_CASE("load_dataset rejects duplicate ids citing both lines") {
  std::ostringstream ss;
  ss << R"({"id":"a1","prompt":"q","response_a":"x","response_b":"y"})" << "\n";
  ss << R"({"id":"x7","prompt":"q","response_a":"x","response_b":"y"})" << "\n";
  for (int i = 0; i < 6; ++i) {
    ss << R"({"id":"b)" << i << R"(","prompt":"q","response_a":"x","response_b":"y"})"
       << "\n";
  }
  ss << R"({"id":"x7","prompt":"q","response_a":"x","response_b":"y"})" << "\n";
  auto path = write_temp("ds_dup.jsonl", ss.str());
  try {
    load_dataset(path);
    FAIL("expected duplicate id error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("x7") != std::string::npos);
    CHECK(msg.find("2") != std::string::npos);
    CHECK(msg.find("9") != std::string::npos);
  }
}

TEST_CASE("load_dataset names the malformed line") {
  auto path = write_temp("ds_bad.jsonl",
      R"({"id":"p1","prompt":"q","response_a":"x","response_b":"y"})"
      "\nnot json at all\n");
  try {
    load_dataset(path);
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::parse);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("preprocess drops over-length rows") {
  Dataset d;
  d.pairs.push_back(make_pair("short", "brief reply", "another brief reply"));
  std::string long_text;
  for (int i = 0; i < 2000; ++i) long_text += "word ";
  d.pairs.push_back(make_pair("long", long_text, "tiny"));
  PreprocessConfig cfg;
  cfg.apply_swap = false;
  auto out = preprocess(d, cfg);
  REQUIRE(out.pairs.size() == 1);
  CHECK(out.pairs[0].id == "short");
}

TEST_CASE("swap transform exchanges sides and negates length delta") {
  auto p = make_pair("p", "one two three", "one", Label::A);
  long before = p.length_delta;
  swap_pair(p);
  CHECK(p.label == Label::B);
  CHECK(p.response_a == "one");
  CHECK(p.length_delta == -before);
  CHECK(p.swapped);
  swap_pair(p);
  CHECK(p.label == Label::A);
  CHECK(p.response_a == "one two three");
  CHECK(p.length_delta == before);
  CHECK_FALSE(p.swapped);
}

TEST_CASE("preprocess swap fraction stays near one half") {
  Dataset d;
  for (int i = 0; i < 1000; ++i) {
    d.pairs.push_back(make_pair("p" + std::to_string(i), "a b c", "d e"));
  }
  PreprocessConfig cfg;
  cfg.swap_seed = 99;
  auto out = preprocess(d, cfg);
  REQUIRE(out.pairs.size() == 1000);
  int swapped = 0;
  for (const auto& p : out.pairs) {
    if (p.swapped) ++swapped;
  }
  // 99.9% binomial(1000, 0.5) interval is [448, 552]
  CHECK(swapped >= 450);
  CHECK(swapped <= 550);
}

TEST_CASE("preprocess with the same seed is reproducible") {
  Dataset d;
  for (int i = 0; i < 64; ++i) {
    d.pairs.push_back(make_pair("p" + std::to_string(i), "a b c", "d e",
                                i % 2 ? Label::A : Label::B));
  }
  PreprocessConfig cfg;
  cfg.swap_seed = 1234;
  auto out1 = preprocess(d, cfg);
  auto out2 = preprocess(d, cfg);
  REQUIRE(out1.pairs.size() == out2.pairs.size());
  for (size_t i = 0; i < out1.pairs.size(); ++i) {
    CHECK(out1.pairs[i].swapped == out2.pairs[i].swapped);
    CHECK(out1.pairs[i].response_a == out2.pairs[i].response_a);
  }
}

TEST_CASE("preprocess preserves prompt and response multiset") {
  Rng rng(5);
  Dataset d;
  for (int i = 0; i < 200; ++i) {
    d.pairs.push_back(make_pair("p" + std::to_string(i),
                                "alpha beta " + std::to_string(rng.u64() % 100),
                                "gamma " + std::to_string(rng.u64() % 100)));
  }
  PreprocessConfig cfg;
  cfg.swap_seed = 77;
  auto out = preprocess(d, cfg);
  REQUIRE(out.pairs.size() == d.pairs.size());
  for (size_t i = 0; i < out.pairs.size(); ++i) {
    CHECK(out.pairs[i].prompt == d.pairs[i].prompt);
    auto orig = std::multiset<std::string>{d.pairs[i].response_a, d.pairs[i].response_b};
    auto now = std::multiset<std::string>{out.pairs[i].response_a, out.pairs[i].response_b};
    CHECK(orig == now);
    CHECK(out.pairs[i].length_delta ==
          (out.pairs[i].swapped ? -d.pairs[i].length_delta : d.pairs[i].length_delta));
  }
}

TEST_CASE("user predicates filter rows") {
  Dataset d;
  d.pairs.push_back(make_pair("keep", "fine text", "fine text"));
  d.pairs.push_back(make_pair("drop", "bad text", "fine text"));
  PreprocessConfig cfg;
  cfg.apply_swap = false;
  cfg.keep_predicates.push_back([](const PreferencePair& p) {
    return p.response_a.find("bad") == std::string::npos;
  });
  auto out = preprocess(d, cfg);
  REQUIRE(out.pairs.size() == 1);
  CHECK(out.pairs[0].id == "keep");
}

TEST_CASE("word counting splits on unicode whitespace") {
  CHECK(word_count("hello world") == 2);
  CHECK(word_count("hello world") == 2);   // no-break space
  CHECK(word_count("tab\tnewline\nmix") == 3);
  CHECK(word_count("  leading and trailing  ") == 3);
  CHECK(word_count("") == 0);
  CHECK(word_count(" \t\n") == 0);
  CHECK(word_count("　wide　space　") == 2);  // ideographic space
}

TEST_CASE("pairs_from_ranking expands rankings") {
  std::vector<std::pair<std::string, int>> cands = {
      {"first", 1}, {"second", 2}, {"third", 3}, {"fourth", 4}};
  auto [labeled, ties] = pairs_from_ranking("q", cands, "ann", "rk");
  CHECK(labeled.response_a == "first");
  CHECK(labeled.response_b == "fourth");
  CHECK(labeled.label == Label::A);
  CHECK(ties.size() == 5);
  for (const auto& t : ties) CHECK(t.label == Label::Tie);
}

TEST_CASE("pairs_from_ranking degenerate and error cases") {
  std::vector<std::pair<std::string, int>> two = {{"x", 1}, {"y", 2}};
  auto [labeled, ties] = pairs_from_ranking("q", two, "", "rk");
  CHECK(labeled.label == Label::A);
  CHECK(ties.empty());

  std::vector<std::pair<std::string, int>> one = {{"x", 1}};
  CHECK_THROWS_AS(pairs_from_ranking("q", one, "", "rk"), Error);

  std::vector<std::pair<std::string, int>> tied = {{"x", 1}, {"y", 1}, {"z", 2}};
  CHECK_THROWS_AS(pairs_from_ranking("q", tied, "", "rk"), Error);
}

TEST_CASE("jsonl round trip preserves the dataset") {
  Dataset d;
  d.name = "rt";
  auto p = make_pair("p1", "alpha beta", "gamma", Label::B);
  p.annotator_id = "ann9";
  p.demographics["country"] = "X";
  p.explanation = "because";
  p.model_a = "m1";
  p.model_b = "m2";
  d.pairs.push_back(p);
  d.curation["p1"] = CurationInfo{3, -1.25, Label::A};
  auto path = fs::temp_directory_path() / "ds_rt.jsonl";
  save_dataset(d, path);
  auto back = load_dataset(path);
  REQUIRE(back.pairs.size() == 1);
  CHECK(back.pairs[0].annotator_id == "ann9");
  CHECK(back.pairs[0].demographics.at("country") == "X");
  CHECK(back.pairs[0].model_b == "m2");
  CHECK(back.pairs[0].label == Label::B);
  REQUIRE(back.curation.count("p1") == 1);
  CHECK(back.curation["p1"].feature_id == 3);
  CHECK(back.curation["p1"].z == Catch::Approx(-1.25));
  CHECK(back.curation["p1"].original_label == Label::A);
}
