#include "cvaet/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "cvaet/error.hpp"

namespace cvaet {

// ---- episodes ----------------------------------------------------------------

void validate_episode(const DialogueEpisode& episode, const std::string& label) {
  const auto& u = episode.utterances;
  if (u.size() < 2) fail(ErrorKind::validation, label + ": an episode needs at least 2 utterances");
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (u[i].speaker != 0 && u[i].speaker != 1) {
      fail(ErrorKind::validation, label + ": speaker must be 0 or 1 (utterance " +
                                      std::to_string(i) + ")");
    }
    if (i > 0 && u[i].speaker == u[i - 1].speaker) {
      fail(ErrorKind::validation, label + ": speakers do not alternate at utterance " +
                                      std::to_string(i));
    }
  }
  if (u[0].speaker != 0) fail(ErrorKind::validation, label + ": first speaker must be 0");
}

std::vector<int> assign_role_ids(const DialogueEpisode& episode) {
  std::vector<int> roles;
  roles.reserve(episode.utterances.size());
  if (episode.utterances.empty()) return roles;
  const int first = episode.utterances.front().speaker;
  for (const Utterance& u : episode.utterances) roles.push_back(u.speaker == first ? 0 : 1);
  return roles;
}

std::vector<DialogueEpisode> parse_episodes(std::istream& in, const std::string& origin) {
  std::vector<DialogueEpisode> out;
  std::vector<std::string> parse_errors;
  std::vector<std::string> validation_errors;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      parse_errors.push_back(where + ": malformed JSON at byte " + std::to_string(e.byte));
      continue;
    }
    DialogueEpisode ep;
    try {
      for (const auto& u : j.at("dialog")) {
        ep.utterances.push_back({u.at("text").get<std::string>(), u.at("speaker").get<int>()});
      }
    } catch (const nlohmann::json::exception& e) {
      parse_errors.push_back(where + ": " + e.what());
      continue;
    }
    if (!ep.utterances.empty() && ep.utterances.front().speaker == 1) {
      for (Utterance& u : ep.utterances) u.speaker = (u.speaker == 0 || u.speaker == 1) ? 1 - u.speaker : u.speaker;
    }
    try {
      validate_episode(ep, "episode at " + where);
    } catch (const Error& e) {
      validation_errors.push_back(e.what());
      continue;
    }
    out.push_back(std::move(ep));
  }
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : "\n") + x;
    return s;
  };
  if (!parse_errors.empty()) {
    auto all = parse_errors;
    all.insert(all.end(), validation_errors.begin(), validation_errors.end());
    fail(ErrorKind::parse, join(all));
  }
  if (!validation_errors.empty()) fail(ErrorKind::validation, join(validation_errors));
  return out;
}

std::vector<DialogueEpisode> load_episodes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return parse_episodes(in, path.string());
}

// ---- vocabulary --------------------------------------------------------------

Vocab::Vocab() {
  add(std::string(special::kNull));
  add(std::string(special::kStart));
  add(std::string(special::kEnd));
  add(std::string(special::kUnk));
  add(std::string(special::kMask));
  add(std::string(special::kDelimiter));
}

void Vocab::add(std::string token) {
  if (index_.count(token) != 0) fail(ErrorKind::validation, "duplicate vocabulary token '" + token + "'");
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocab Vocab::from_counts(const std::unordered_map<std::string, std::size_t>& counts, int min_freq) {
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : counts) {
    if (n >= static_cast<std::size_t>(std::max(1, min_freq))) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  for (auto& [tok, n] : kept) {
    if (v.index_.count(tok) == 0) v.add(tok);
  }
  return v;
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (!contains_id(id)) fail(ErrorKind::invalid_argument, "token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

nlohmann::json Vocab::to_json() const {
  return {{"format", "cvaet-vocab"}, {"version", 1}, {"tokens", tokens_}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  std::vector<std::string> toks;
  try {
    if (j.at("format").get<std::string>() != "cvaet-vocab") fail(ErrorKind::parse, "not a vocabulary file");
    if (j.at("version").get<int>() != 1) fail(ErrorKind::version, "unsupported vocabulary version");
    toks = j.at("tokens").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("vocabulary: ") + e.what());
  }
  Vocab v;
  if (toks.size() < static_cast<std::size_t>(kNumBuiltin)) fail(ErrorKind::validation, "vocabulary lacks reserved tokens");
  for (int i = 0; i < kNumBuiltin; ++i) {
    if (toks[static_cast<std::size_t>(i)] != v.tokens_[static_cast<std::size_t>(i)]) {
      fail(ErrorKind::validation, "vocabulary reserved token mismatch at id " + std::to_string(i));
    }
  }
  for (std::size_t i = kNumBuiltin; i < toks.size(); ++i) v.add(toks[i]);
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << to_json().dump() << "\n";
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, path.string() + ": " + e.what());
  }
  return from_json(j);
}

// ---- tokenizer -----------------------------------------------------------------

namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

}  // namespace

std::vector<std::string> WordTokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c) != 0) {
      flush();
    } else if (is_word_byte(c)) {
      cur.push_back(static_cast<char>(c));
    } else if (c == '\'' && !cur.empty() && i + 1 < text.size() &&
               is_word_byte(static_cast<unsigned char>(text[i + 1]))) {
      cur.push_back('\'');
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

std::vector<std::string> WordTokenizer::tokenize(std::string_view text) const {
  auto toks = split(text);
  for (auto& t : toks) {
    std::transform(t.begin(), t.end(), t.begin(),
                   [](unsigned char c) { return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c); });
  }
  return toks;
}

std::string WordTokenizer::detokenize(std::span<const std::string> tokens) const {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

std::vector<int> encode(const Tokenizer& tokenizer, const Vocab& vocab, std::string_view text) {
  std::vector<int> ids;
  for (const auto& t : tokenizer.tokenize(text)) ids.push_back(vocab.id(t));
  return ids;
}

std::vector<std::string> to_tokens(const Vocab& vocab, std::span<const int> ids) {
  std::vector<std::string> out;
  for (int id : ids) {
    if (!vocab.is_special(id)) out.push_back(vocab.token(id));
  }
  return out;
}

std::string decode(const Tokenizer& tokenizer, const Vocab& vocab, std::span<const int> ids) {
  const auto toks = to_tokens(vocab, ids);
  return tokenizer.detokenize(toks);
}

Vocab build_vocab(const std::vector<DialogueEpisode>& episodes, const Tokenizer& tokenizer,
                  int min_freq) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& ep : episodes) {
    for (const auto& u : ep.utterances) {
      for (auto& t : tokenizer.tokenize(u.text)) ++counts[t];
    }
  }
  return Vocab::from_counts(counts, min_freq);
}

// ---- examples ------------------------------------------------------------------

namespace {

// Context of utterances 0..i-1. Returns whether it was truncated.
bool fill_context(TrainingExample& ex, const std::vector<std::vector<int>>& utt_ids, const std::vector<int>& roles,
                  std::size_t i, const CorpusConfig& config) {
  for (std::size_t j = 0; j < i; ++j) {
    const int turn = static_cast<int>(i - j);
    const auto& ids = utt_ids[j];
    ex.context_ids.insert(ex.context_ids.end(), ids.begin(), ids.end());
    if (j + 1 < i) ex.context_ids.push_back(Vocab::kDelimiterId);
    const std::size_t n = ids.size() + (j + 1 < i ? 1 : 0);
    ex.context_turn_ids.insert(ex.context_turn_ids.end(), n, turn);
    ex.context_role_ids.insert(ex.context_role_ids.end(), n, roles[j]);
  }
  const auto max_ctx = static_cast<std::size_t>(config.max_context_len);
  if (ex.context_ids.size() <= max_ctx) return false;
  // Keeping the suffix drops the oldest utterances first, then the leading
  // tokens of the oldest surviving one.
  const auto drop = static_cast<std::ptrdiff_t>(ex.context_ids.size() - max_ctx);
  ex.context_ids.erase(ex.context_ids.begin(), ex.context_ids.begin() + drop);
  ex.context_turn_ids.erase(ex.context_turn_ids.begin(), ex.context_turn_ids.begin() + drop);
  ex.context_role_ids.erase(ex.context_role_ids.begin(), ex.context_role_ids.begin() + drop);
  return true;
}

}  // namespace

TrainingExample context_example(const std::vector<std::string>& utterances, const Tokenizer& tokenizer,
                                const Vocab& vocab, const CorpusConfig& config) {
  std::vector<std::vector<int>> utt_ids;
  std::vector<int> roles;
  for (std::size_t j = 0; j < utterances.size(); ++j) {
    utt_ids.push_back(encode(tokenizer, vocab, utterances[j]));
    roles.push_back(static_cast<int>(j % 2));
  }
  TrainingExample ex;
  fill_context(ex, utt_ids, roles, utterances.size(), config);
  ex.response_ids = {Vocab::kStartId, Vocab::kEndId};
  ex.response_role_id = static_cast<int>(utterances.size() % 2);
  ex.turn_index = utterances.size();
  return ex;
}

std::vector<TrainingExample> episodes_to_examples(const std::vector<DialogueEpisode>& episodes,
                                                  const Tokenizer& tokenizer, const Vocab& vocab,
                                                  const CorpusConfig& config,
                                                  ExampleBuildStats* stats) {
  require(config.max_context_len > 0 && config.max_response_len >= 3, ErrorKind::config,
          "context/response length limits too small");
  ExampleBuildStats local;
  std::vector<TrainingExample> out;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    const auto roles = assign_role_ids(ep);
    std::vector<std::vector<int>> utt_ids;
    utt_ids.reserve(ep.utterances.size());
    for (const auto& u : ep.utterances) utt_ids.push_back(encode(tokenizer, vocab, u.text));

    for (std::size_t i = 1; i < ep.utterances.size(); ++i) {
      if (utt_ids[i].empty()) {
        ++local.skipped_empty_response;
        continue;
      }
      TrainingExample ex;
      ex.episode_index = e;
      ex.turn_index = i;
      ex.response_text = ep.utterances[i].text;
      if (fill_context(ex, utt_ids, roles, i, config)) ++local.truncated_context;
      const auto max_words = static_cast<std::size_t>(config.max_response_len - 2);
      const auto& resp = utt_ids[i];
      const std::size_t keep = std::min(resp.size(), max_words);
      if (keep < resp.size()) ++local.truncated_response;
      ex.response_ids.reserve(keep + 2);
      ex.response_ids.push_back(Vocab::kStartId);
      ex.response_ids.insert(ex.response_ids.end(), resp.begin(), resp.begin() + static_cast<std::ptrdiff_t>(keep));
      ex.response_ids.push_back(Vocab::kEndId);
      ex.response_turn_id = 0;
      ex.response_role_id = roles[i];
      out.push_back(std::move(ex));
      ++local.examples;
    }
  }
  if (stats != nullptr) *stats = local;
  return out;
}

nlohmann::json example_to_json(const TrainingExample& ex) {
  return {{"context_ids", ex.context_ids},
          {"context_turn_ids", ex.context_turn_ids},
          {"context_role_ids", ex.context_role_ids},
          {"response_ids", ex.response_ids},
          {"response_turn_id", ex.response_turn_id},
          {"response_role_id", ex.response_role_id},
          {"negatives", ex.negatives},
          {"response_text", ex.response_text},
          {"episode", ex.episode_index},
          {"turn", ex.turn_index}};
}

TrainingExample example_from_json(const nlohmann::json& j) {
  TrainingExample ex;
  try {
    ex.context_ids = j.at("context_ids").get<std::vector<int>>();
    ex.context_turn_ids = j.at("context_turn_ids").get<std::vector<int>>();
    ex.context_role_ids = j.at("context_role_ids").get<std::vector<int>>();
    ex.response_ids = j.at("response_ids").get<std::vector<int>>();
    ex.response_turn_id = j.value("response_turn_id", 0);
    ex.response_role_id = j.at("response_role_id").get<int>();
    ex.negatives = j.value("negatives", std::vector<std::vector<int>>{});
    ex.response_text = j.value("response_text", std::string());
    ex.episode_index = j.value("episode", std::size_t{0});
    ex.turn_index = j.value("turn", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("example: ") + e.what());
  }
  if (ex.context_turn_ids.size() != ex.context_ids.size() ||
      ex.context_role_ids.size() != ex.context_ids.size()) {
    fail(ErrorKind::validation, "example: turn/role ids not aligned with context ids");
  }
  if (ex.response_ids.size() < 2 || ex.response_ids.front() != Vocab::kStartId ||
      ex.response_ids.back() != Vocab::kEndId) {
    fail(ErrorKind::validation, "example: response must be framed by __start__/__end__");
  }
  for (const auto& neg : ex.negatives) {
    if (neg.size() < 2 || neg.front() != Vocab::kStartId || neg.back() != Vocab::kEndId) {
      fail(ErrorKind::validation, "example: negative must be framed by __start__/__end__");
    }
  }
  return ex;
}

void write_examples(const std::filesystem::path& path, const std::vector<TrainingExample>& examples,
                    const nlohmann::json& config, const nlohmann::json& extra) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  nlohmann::json header = {{"format", "cvaet-examples"},
                           {"version", kExampleFormatVersion},
                           {"count", examples.size()},
                           {"config", config}};
  for (const auto& [k, v] : extra.items()) header[k] = v;
  out << header.dump() << "\n";
  for (const auto& ex : examples) out << example_to_json(ex).dump() << "\n";
  if (!out) fail(ErrorKind::io, "failed writing " + path.string());
}

ExampleFile read_examples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  ExampleFile file;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::parse, path.string() + ":" + std::to_string(lineno) + ": malformed JSON at byte " +
                                 std::to_string(e.byte));
    }
    if (file.header.is_null()) {
      if (!j.is_object() || j.value("format", "") != "cvaet-examples") {
        fail(ErrorKind::parse, path.string() + ": missing cvaet-examples header line");
      }
      if (j.value("version", 0) != kExampleFormatVersion) {
        fail(ErrorKind::version, path.string() + ": unsupported example file version " +
                                     std::to_string(j.value("version", 0)));
      }
      file.header = std::move(j);
      continue;
    }
    try {
      file.examples.push_back(example_from_json(j));
    } catch (const Error& e) {
      fail(e.kind(), path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (file.header.is_null()) fail(ErrorKind::parse, path.string() + ": empty example file");
  return file;
}

}  // namespace cvaet
