#pragma once

// Unsupervised key n-gram extraction with five per-term statistics.
//
// For a term t (lowercased, not a stopword) occurring TF times:
//
//   casing      = max(TF_upper, TF_acronym) / max(1, TF)
//                 TF_upper counts occurrences starting with an uppercase
//                 letter (sentence-initial ones included), TF_acronym those
//                 written entirely in uppercase (two letters or more).
//   position    = ln(ln(3 + median of the sentence indices of t))
//   frequency   = TF / (mean(TF) + stddev(TF))   over all terms, population sd
//   relatedness = 1 + (DL + DR) * TF / max(TF)
//                 DL = distinct left neighbours / left neighbour occurrences
//                 within `window` words (0 when t never has one); DR alike.
//                 Neighbours are words in the same sentence not separated by
//                 punctuation; stopwords count as neighbours.
//   dispersion  = sentences containing t / number of sentences
//
//   S(t) = relatedness * position
//          / (casing + frequency / relatedness + dispersion / relatedness)
//
// A candidate is a run of 1..max_ngram words inside one sentence whose first
// and last words are not stopwords. Its score is
//
//   S(kw) = prod S(t) / (TF(kw) * (1 + sum S(t)))
//
// over the non-stopword words of the candidate, TF(kw) being the number of
// occurrences of the candidate. Lower is more important.

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cvaet/config.hpp"

namespace cvaet {

struct TermStats {
  std::size_t tf = 0;
  std::size_t tf_upper = 0;
  std::size_t tf_acronym = 0;
  double casing = 0.0;
  double position = 0.0;
  double frequency = 0.0;
  double relatedness = 0.0;
  double dispersion = 0.0;
  double score = 0.0;
};

struct KeywordCandidate {
  // Words as written in the response.
  std::vector<std::string> tokens;
  // Token offsets [start, end) into WordTokenizer::split(response).
  std::size_t start = 0;
  std::size_t end = 0;
  double score = 0.0;

  std::string text() const;
  bool operator==(const KeywordCandidate&) const = default;
};

bool is_stopword(std::string_view word);
const std::vector<std::string>& english_stopwords();

double term_score(double casing, double position, double frequency, double relatedness,
                  double dispersion);

// `sentences` holds the tokens of each sentence in original case;
// punctuation tokens may appear and act as neighbour barriers.
std::map<std::string, TermStats> term_features(const std::vector<std::vector<std::string>>& sentences,
                                               int window = 1);

// Splits a response into sentences at '.', '!' and '?' tokens.
std::vector<std::vector<std::string>> split_sentences(const std::vector<std::string>& tokens);

// Candidates ascending by score, spans mutually disjoint (greedy, better score
// wins), at most config.k_top of them. Deterministic.
std::vector<KeywordCandidate> extract_keywords(std::string_view response, const KeywordConfig& config);

}  // namespace cvaet
