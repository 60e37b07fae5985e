#include <fstream>
#include <functional>
#include <sstream>

#include "doctest.h"

#include "cvaet/corpus.hpp"
#include "cvaet/error.hpp"

using namespace cvaet;

namespace {

std::vector<DialogueEpisode> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_episodes(in, "<test>");
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::internal;
}

DialogueEpisode episode(std::initializer_list<std::string> texts) {
  DialogueEpisode ep;
  int s = 0;
  for (const auto& t : texts) {
    ep.utterances.push_back({t, s});
    s = 1 - s;
  }
  return ep;
}

}  // namespace

TEST_CASE("one well-formed line loads as one episode of two utterances") {
  const auto eps = parse(R"({"dialog":[{"text":"hi","speaker":0},{"text":"hello","speaker":1}]})");
  REQUIRE(eps.size() == 1);
  REQUIRE(eps[0].utterances.size() == 2);
  CHECK(eps[0].utterances[0].text == "hi");
  CHECK(eps[0].utterances[1].speaker == 1);
}

TEST_CASE("empty input loads as no episodes") {
  CHECK(parse("").empty());
  CHECK(parse("\n  \n").empty());
}

TEST_CASE("non-alternating speakers are a validation error naming the line") {
  try {
    parse("{\"dialog\":[{\"text\":\"a\",\"speaker\":0},{\"text\":\"b\",\"speaker\":1}]}\n"
          "{\"dialog\":[{\"text\":\"a\",\"speaker\":0},{\"text\":\"b\",\"speaker\":0}]}");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::validation);
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
}

TEST_CASE("malformed JSON is a parse error with its location") {
  try {
    parse("{\"dialog\": [");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::parse);
    CHECK(std::string(e.what()).find(":1") != std::string::npos);
  }
}

TEST_CASE("episodes with fewer than two utterances are rejected") {
  CHECK(kind_of([] { parse(R"({"dialog":[{"text":"alone","speaker":0}]})"); }) == ErrorKind::validation);
}

TEST_CASE("role ids follow the speaker, first speaker mapped to 0") {
  CHECK(assign_role_ids(episode({"a", "b", "c"})) == std::vector<int>{0, 1, 0});
  CHECK(assign_role_ids(episode({"a", "b"})) == std::vector<int>{0, 1});
  const auto eps = parse(R"({"dialog":[{"text":"x","speaker":1},{"text":"y","speaker":0}]})");
  CHECK(eps[0].utterances[0].speaker == 0);
  CHECK(assign_role_ids(eps[0]) == std::vector<int>{0, 1});
}

TEST_CASE("tokenizer lowercases and splits punctuation; round trip only normalizes") {
  const WordTokenizer tok;
  CHECK(tok.tokenize("Hello, World!") == std::vector<std::string>{"hello", ",", "world", "!"});
  CHECK(tok.tokenize("I don't know") == std::vector<std::string>{"i", "don't", "know"});
  const auto t = tok.tokenize("  Nice   day .");
  CHECK(tok.detokenize(t) == "nice day .");
  // Detokenizing then tokenizing is a fixed point.
  const std::string s = "What's up?? I'm  here, OK.";
  const auto once = tok.tokenize(s);
  CHECK(tok.tokenize(tok.detokenize(once)) == once);
}

TEST_CASE("vocabulary reserves the special tokens at fixed ids and respects min_freq") {
  const WordTokenizer tok;
  const auto eps = std::vector<DialogueEpisode>{episode({"a a b", "a c"})};
  const Vocab v = build_vocab(eps, tok, 2);
  CHECK(v.token(Vocab::kNullId) == "__null__");
  CHECK(v.token(Vocab::kStartId) == "__start__");
  CHECK(v.token(Vocab::kEndId) == "__end__");
  CHECK(v.token(Vocab::kUnkId) == "__unk__");
  CHECK(v.token(Vocab::kMaskId) == "[MASK]");
  CHECK(v.token(Vocab::kDelimiterId) == "\n");
  CHECK(v.size() == Vocab::kNumBuiltin + 1);
  CHECK(v.id("a") == Vocab::kNumBuiltin);
  CHECK(v.id("b") == Vocab::kUnkId);
  CHECK(Vocab::from_json(v.to_json()) == v);
}

TEST_CASE("a three-utterance episode gives two examples with descending turn ids") {
  const WordTokenizer tok;
  const auto eps = std::vector<DialogueEpisode>{episode({"a b", "c", "d e"})};
  const Vocab v = build_vocab(eps, tok, 1);
  const auto ex = episodes_to_examples(eps, tok, v, CorpusConfig{});
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].context_turn_ids == std::vector<int>{1, 1});
  CHECK(ex[0].response_turn_id == 0);
  CHECK(ex[0].response_role_id == 1);
  // "a b \n c": the delimiter belongs to the first utterance.
  CHECK(ex[1].context_ids == std::vector<int>{v.id("a"), v.id("b"), Vocab::kDelimiterId, v.id("c")});
  CHECK(ex[1].context_turn_ids == std::vector<int>{2, 2, 2, 1});
  CHECK(ex[1].context_role_ids == std::vector<int>{0, 0, 0, 1});
  CHECK(ex[1].response_ids == std::vector<int>{Vocab::kStartId, v.id("d"), v.id("e"), Vocab::kEndId});
  CHECK(ex[1].response_role_id == 0);
  for (const auto& e : ex) {
    CHECK(e.context_turn_ids.size() == e.context_ids.size());
    CHECK(e.context_role_ids.size() == e.context_ids.size());
  }
}

TEST_CASE("a two-utterance episode gives context turn ids all 1") {
  const WordTokenizer tok;
  const auto eps = std::vector<DialogueEpisode>{episode({"x y z", "w"})};
  const Vocab v = build_vocab(eps, tok, 1);
  const auto ex = episodes_to_examples(eps, tok, v, CorpusConfig{});
  REQUIRE(ex.size() == 1);
  CHECK(ex[0].context_turn_ids == std::vector<int>{1, 1, 1});
  CHECK(ex[0].response_turn_id == 0);
}

TEST_CASE("long contexts keep exactly their last max_context_len tokens") {
  const WordTokenizer tok;
  std::string long_utt;
  for (int i = 0; i < 200; ++i) long_utt += "w" + std::to_string(i % 50) + " ";
  const auto eps = std::vector<DialogueEpisode>{episode({long_utt, long_utt, "the query", "reply"})};
  const Vocab v = build_vocab(eps, tok, 1);
  CorpusConfig cc;  // 360 by default
  ExampleBuildStats stats;
  const auto ex = episodes_to_examples(eps, tok, v, cc, &stats);
  const TrainingExample& last = ex.back();

  std::vector<int> full;
  for (int u = 0; u < 3; ++u) {
    const auto ids = encode(tok, v, eps[0].utterances[static_cast<std::size_t>(u)].text);
    full.insert(full.end(), ids.begin(), ids.end());
    if (u < 2) full.push_back(Vocab::kDelimiterId);
  }
  REQUIRE(full.size() > 360);
  CHECK(last.context_ids.size() == 360);
  CHECK(std::equal(last.context_ids.begin(), last.context_ids.end(), full.end() - 360));
  // The query survives intact.
  CHECK(last.context_ids.back() == v.id("query"));
  CHECK(last.context_turn_ids.back() == 1);
  CHECK(stats.truncated_context >= 1);
}

TEST_CASE("long responses are cut from the right and keep both sentinels") {
  const WordTokenizer tok;
  const auto eps = std::vector<DialogueEpisode>{episode({"q", "a b c d e f g"})};
  const Vocab v = build_vocab(eps, tok, 1);
  CorpusConfig cc;
  cc.max_response_len = 5;
  const auto ex = episodes_to_examples(eps, tok, v, cc);
  CHECK(ex[0].response_ids == std::vector<int>{Vocab::kStartId, v.id("a"), v.id("b"), v.id("c"), Vocab::kEndId});
}

TEST_CASE("responses empty after tokenization are skipped and counted") {
  const WordTokenizer tok;
  const auto eps = std::vector<DialogueEpisode>{episode({"hi", "   ", "ok"})};
  const Vocab v = build_vocab(eps, tok, 1);
  ExampleBuildStats stats;
  const auto ex = episodes_to_examples(eps, tok, v, CorpusConfig{}, &stats);
  CHECK(ex.size() == 1);
  CHECK(stats.skipped_empty_response == 1);
}

TEST_CASE("context_example frames a generation request like a training context") {
  const WordTokenizer tok;
  const auto eps = std::vector<DialogueEpisode>{episode({"a b", "c", "d"})};
  const Vocab v = build_vocab(eps, tok, 1);
  const auto train = episodes_to_examples(eps, tok, v, CorpusConfig{});
  const TrainingExample gen = context_example({"a b", "c"}, tok, v, CorpusConfig{});
  CHECK(gen.context_ids == train[1].context_ids);
  CHECK(gen.context_turn_ids == train[1].context_turn_ids);
  CHECK(gen.context_role_ids == train[1].context_role_ids);
  CHECK(gen.response_role_id == train[1].response_role_id);
  CHECK(gen.response_ids == std::vector<int>{Vocab::kStartId, Vocab::kEndId});
}

TEST_CASE("processed example files round-trip and refuse other versions") {
  const auto dir = std::filesystem::temp_directory_path() / "cvaet_unit_corpus";
  std::filesystem::create_directories(dir);
  TrainingExample ex;
  ex.context_ids = {6, 7};
  ex.context_turn_ids = {1, 1};
  ex.context_role_ids = {0, 0};
  ex.response_ids = {1, 8, 2};
  ex.response_role_id = 1;
  ex.negatives = {{1, 9, 2}};
  ex.response_text = "eight";
  write_examples(dir / "a.jsonl", {ex}, {{"k", 1}}, {{"extra", "yes"}});
  const ExampleFile f = read_examples(dir / "a.jsonl");
  REQUIRE(f.examples.size() == 1);
  CHECK(f.examples[0] == ex);
  CHECK(f.header.at("config").at("k") == 1);
  CHECK(f.header.at("extra") == "yes");

  std::ofstream(dir / "b.jsonl") << R"({"format":"cvaet-examples","version":99})" << "\n";
  CHECK(kind_of([&] { read_examples(dir / "b.jsonl"); }) == ErrorKind::version);
  std::filesystem::remove_all(dir);
}
