#pragma once

// Dialogue episodes, tokenization, vocabulary and model-ready examples.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cvaet/config.hpp"

namespace cvaet {

struct Utterance {
  std::string text;
  int speaker = 0;
};

// A dyadic conversation: at least two utterances, alternating speakers, the
// first speaker labelled 0.
struct DialogueEpisode {
  std::vector<Utterance> utterances;
};

// Throws ErrorKind::validation naming `label` when an invariant is broken.
void validate_episode(const DialogueEpisode& episode, const std::string& label);

// Per-utterance role ids: 0 for whoever speaks first, 1 for the other party,
// whatever labels the source data used.
std::vector<int> assign_role_ids(const DialogueEpisode& episode);

// Reads JSONL episodes (`{"dialog":[{"text":..,"speaker":0|1},..]}`). Blank
// lines are skipped. Episodes whose first speaker is labelled 1 are relabelled.
// All bad lines are collected and reported together, with line numbers, as
// one parse error (malformed JSON) or validation error (broken invariants).
std::vector<DialogueEpisode> load_episodes(const std::filesystem::path& path);
std::vector<DialogueEpisode> parse_episodes(std::istream& in, const std::string& origin);

namespace special {
inline constexpr std::string_view kNull = "__null__";
inline constexpr std::string_view kStart = "__start__";
inline constexpr std::string_view kEnd = "__end__";
inline constexpr std::string_view kUnk = "__unk__";
inline constexpr std::string_view kMask = "[MASK]";
// Joins the utterances of a context. Always present in a vocabulary, right
// after the reserved tokens.
inline constexpr std::string_view kDelimiter = "\n";
}  // namespace special

class Vocab {
 public:
  static constexpr int kNullId = 0;
  static constexpr int kStartId = 1;
  static constexpr int kEndId = 2;
  static constexpr int kUnkId = 3;
  static constexpr int kMaskId = 4;
  static constexpr int kDelimiterId = 5;
  static constexpr int kNumBuiltin = 6;

  // Reserved tokens and the delimiter only.
  Vocab();

  // Tokens with count >= min_freq, most frequent first, ties broken
  // lexicographically.
  static Vocab from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                           int min_freq);

  int size() const { return static_cast<int>(tokens_.size()); }
  // Falls back to the unknown-token id.
  int id(std::string_view token) const;
  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains_id(int id) const { return id >= 0 && id < size(); }
  // Sentinels, padding, mask and delimiter.
  bool is_special(int id) const { return id >= 0 && id < kNumBuiltin && id != kUnkId; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::string> tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(std::span<const std::string> tokens) const = 0;
};

// Lowercasing splitter: words are runs of ASCII letters/digits (plus any
// non-ASCII bytes, plus apostrophes between word characters); every other
// visible ASCII character is a token of its own. Detokenization joins with
// single spaces, so the only normalization is lowercasing, whitespace
// collapsing and spaces around punctuation.
class WordTokenizer final : public Tokenizer {
 public:
  std::string name() const override { return "word"; }
  std::vector<std::string> tokenize(std::string_view text) const override;
  std::string detokenize(std::span<const std::string> tokens) const override;

  // Same segmentation without lowercasing; used by the keyword extractor,
  // which needs casing information.
  static std::vector<std::string> split(std::string_view text);
};

std::vector<int> encode(const Tokenizer& tokenizer, const Vocab& vocab, std::string_view text);
// Drops every special token (sentinels, padding, mask, delimiter).
std::string decode(const Tokenizer& tokenizer, const Vocab& vocab, std::span<const int> ids);
std::vector<std::string> to_tokens(const Vocab& vocab, std::span<const int> ids);

Vocab build_vocab(const std::vector<DialogueEpisode>& episodes, const Tokenizer& tokenizer,
                  int min_freq);

struct TrainingExample {
  std::vector<int> context_ids;
  std::vector<int> context_turn_ids;
  std::vector<int> context_role_ids;
  // Framed as __start__ ... __end__.
  std::vector<int> response_ids;
  int response_turn_id = 0;
  int response_role_id = 0;
  std::vector<std::vector<int>> negatives;
  // Original (untokenized) response; keyword spans refer to it.
  std::string response_text;
  std::size_t episode_index = 0;
  std::size_t turn_index = 0;

  bool operator==(const TrainingExample&) const = default;
};

struct ExampleBuildStats {
  std::size_t examples = 0;
  std::size_t skipped_empty_response = 0;
  std::size_t truncated_context = 0;
  std::size_t truncated_response = 0;
};

// One example per utterance i >= 1. The context is utterances 0..i-1 joined by
// the delimiter; turn ids count down to 1 on the last context utterance (the
// delimiter after an utterance shares its turn and role); the response has
// turn id 0. Context keeps its last max_context_len tokens; the response keeps
// its first max_response_len - 2 tokens plus both sentinels.
std::vector<TrainingExample> episodes_to_examples(const std::vector<DialogueEpisode>& episodes,
                                                  const Tokenizer& tokenizer, const Vocab& vocab,
                                                  const CorpusConfig& config,
                                                  ExampleBuildStats* stats = nullptr);

// An example holding only the context of `utterances` (first speaker role 0,
// alternating) and an empty framed response, for generation.
TrainingExample context_example(const std::vector<std::string>& utterances, const Tokenizer& tokenizer,
                                const Vocab& vocab, const CorpusConfig& config);

// Processed-example files: a header line
// `{"format":"cvaet-examples","version":1,"config":{..},..extra}` followed by
// one example per line.
inline constexpr int kExampleFormatVersion = 1;

struct ExampleFile {
  nlohmann::json header;
  std::vector<TrainingExample> examples;
};

nlohmann::json example_to_json(const TrainingExample& ex);
TrainingExample example_from_json(const nlohmann::json& j);
void write_examples(const std::filesystem::path& path, const std::vector<TrainingExample>& examples,
                    const nlohmann::json& config, const nlohmann::json& extra = nlohmann::json::object());
ExampleFile read_examples(const std::filesystem::path& path);

}  // namespace cvaet
