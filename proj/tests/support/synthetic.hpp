#pragma once

// Small generated corpora for training tests.

#include <string>
#include <vector>

#include "cvaet/corpus.hpp"
#include "cvaet/random.hpp"

namespace cvaet::testing {

inline DialogueEpisode two_turn(const std::string& a, const std::string& b) {
  return {{{a, 0}, {b, 1}}};
}

// 32 dialogues whose responses are fixed by the context subject. No
// response repeats a trigram or shares one with its context.
inline std::vector<DialogueEpisode> overfit_dialogues() {
  const std::vector<std::string> subjects = {
      "river",  "garden", "market", "castle", "harbor", "forest", "bridge", "library",
      "tower",  "island", "valley", "museum", "temple", "palace", "desert", "meadow",
      "canyon", "glacier", "lagoon", "orchard", "village", "station", "theater", "stadium",
      "airport", "bakery", "chapel", "cottage", "factory", "gallery", "lighthouse", "mill"};
  const std::vector<std::string> adjectives = {"quiet", "busy", "old", "huge", "bright", "cold", "green", "tiny"};
  const std::vector<std::string> colors = {"red", "blue", "white", "gold", "grey", "black", "pink", "brown"};
  const std::vector<std::string> openers = {"tell me about the", "what do you know about the",
                                            "have you seen the", "describe the"};
  std::vector<DialogueEpisode> out;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const std::string& s = subjects[i];
    out.push_back(two_turn(openers[i % openers.size()] + " " + s + " .",
                           "the " + s + " is " + adjectives[i % 8] + " and " + colors[(i * 3 + i / 8) % 8] + " ."));
  }
  return out;
}

struct KeywordCorpus {
  std::vector<DialogueEpisode> train;
  std::vector<DialogueEpisode> valid;
  std::vector<std::string> languages;
};

// The context names a country, the response the language spoken there.
// Validation uses context phrasings never seen in training.
inline KeywordCorpus country_language_corpus() {
  const std::vector<std::pair<std::string, std::string>> pairs = {
      {"france", "french"},   {"germany", "german"},   {"spain", "spanish"},
      {"italy", "italian"},   {"japan", "japanese"},   {"china", "chinese"},
      {"russia", "russian"},  {"greece", "greek"},     {"poland", "polish"},
      {"sweden", "swedish"},  {"turkey", "turkish"},   {"norway", "norwegian"}};
  const std::vector<std::string> train_openers = {"i was born in", "my family lives in",
                                                  "i grew up in", "last year i moved to"};
  const std::vector<std::string> valid_openers = {"my parents come from", "i spent my childhood in"};
  const std::vector<std::string> replies = {"so you speak", "then you must know"};
  KeywordCorpus c;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& [country, language] = pairs[i];
    c.languages.push_back(language);
    for (std::size_t t = 0; t < train_openers.size(); ++t) {
      c.train.push_back(two_turn(train_openers[t] + " " + country + " .",
                                 replies[(i + t) % replies.size()] + " " + language + " ."));
    }
    for (std::size_t t = 0; t < valid_openers.size(); ++t) {
      c.valid.push_back(two_turn(valid_openers[t] + " " + country + " .",
                                 replies[(i + t) % replies.size()] + " " + language + " ."));
    }
  }
  return c;
}

// Negatives made by swapping the language token of each response for
// `count` other languages.
inline void add_language_swaps(std::vector<TrainingExample>& examples, const Vocab& vocab,
                               const std::vector<std::string>& languages, int count, std::uint64_t seed) {
  std::vector<int> ids;
  for (const auto& l : languages) ids.push_back(vocab.id(l));
  Rng rng(seed);
  for (auto& ex : examples) {
    std::size_t pos = 0;
    int own = -1;
    for (std::size_t i = 0; i < ex.response_ids.size(); ++i) {
      if (std::find(ids.begin(), ids.end(), ex.response_ids[i]) != ids.end()) {
        pos = i;
        own = ex.response_ids[i];
      }
    }
    if (own < 0) continue;
    std::vector<int> others;
    for (int id : ids) {
      if (id != own) others.push_back(id);
    }
    std::shuffle(others.begin(), others.end(), rng);
    for (int k = 0; k < count && k < static_cast<int>(others.size()); ++k) {
      std::vector<int> neg = ex.response_ids;
      neg[pos] = others[static_cast<std::size_t>(k)];
      ex.negatives.push_back(neg);
    }
  }
}

}  // namespace cvaet::testing
