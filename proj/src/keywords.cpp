#include "cvaet/keywords.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <unordered_set>

#include "cvaet/corpus.hpp"

namespace cvaet {

namespace {

const std::unordered_set<std::string>& stopword_set() {
  static const std::unordered_set<std::string> set(english_stopwords().begin(),
                                                   english_stopwords().end());
  return set;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
  });
  return out;
}

bool is_word(const std::string& token) {
  return !token.empty() &&
         (std::isalnum(static_cast<unsigned char>(token[0])) != 0 ||
          static_cast<unsigned char>(token[0]) >= 0x80);
}

bool is_sentence_end(const std::string& token) {
  return token == "." || token == "!" || token == "?";
}

bool starts_upper(const std::string& w) {
  return std::isupper(static_cast<unsigned char>(w[0])) != 0;
}

bool is_acronym(const std::string& w) {
  int letters = 0;
  for (unsigned char c : w) {
    if (std::isalpha(c) == 0) continue;
    if (std::isupper(c) == 0) return false;
    ++letters;
  }
  return letters >= 2;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

const std::vector<std::string>& english_stopwords() {
  static const std::vector<std::string> words = {
      "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
      "aren't", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
      "but", "by", "can", "can't", "cannot", "could", "couldn't", "did", "didn't", "do", "does",
      "doesn't", "doing", "don't", "down", "during", "each", "few", "for", "from", "further", "had",
      "hadn't", "has", "hasn't", "have", "haven't", "having", "he", "he'd", "he'll", "he's", "her",
      "here", "here's", "hers", "herself", "him", "himself", "his", "how", "how's", "i", "i'd",
      "i'll", "i'm", "i've", "if", "in", "into", "is", "isn't", "it", "it's", "its", "itself",
      "just", "let's", "me", "more", "most", "mustn't", "my", "myself", "no", "nor", "not", "now",
      "of", "off", "on", "once", "only", "or", "other", "ought", "our", "ours", "ourselves", "out",
      "over", "own", "same", "shan't", "she", "she'd", "she'll", "she's", "should", "shouldn't",
      "so", "some", "such", "than", "that", "that's", "the", "their", "theirs", "them",
      "themselves", "then", "there", "there's", "these", "they", "they'd", "they'll", "they're",
      "they've", "this", "those", "through", "to", "too", "under", "until", "up", "very", "was",
      "wasn't", "we", "we'd", "we'll", "we're", "we've", "were", "weren't", "what", "what's",
      "when", "when's", "where", "where's", "which", "while", "who", "who's", "whom", "why",
      "why's", "will", "with", "won't", "would", "wouldn't", "yes", "you", "you'd", "you'll",
      "you're", "you've", "your", "yours", "yourself", "yourselves", "oh", "ok", "okay", "well",
      "also", "really", "much", "many", "s", "t", "ll", "re", "ve", "d", "m"};
  return words;
}

bool is_stopword(std::string_view word) { return stopword_set().count(lower(word)) != 0; }

double term_score(double casing, double position, double frequency, double relatedness,
                  double dispersion) {
  return (relatedness * position) /
         (casing + frequency / relatedness + dispersion / relatedness);
}

std::string KeywordCandidate::text() const {
  std::string out;
  for (const auto& t : tokens) out += (out.empty() ? "" : " ") + t;
  return out;
}

std::vector<std::vector<std::string>> split_sentences(const std::vector<std::string>& tokens) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> cur;
  for (const auto& t : tokens) {
    cur.push_back(t);
    if (is_sentence_end(t)) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::map<std::string, TermStats> term_features(const std::vector<std::vector<std::string>>& sentences,
                                               int window) {
  struct Acc {
    TermStats stats;
    std::vector<double> sentence_ids;
    std::set<std::size_t> sentences;
    std::multiset<std::string> left;
    std::multiset<std::string> right;
  };
  std::map<std::string, Acc> acc;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto& sent = sentences[s];
    for (std::size_t i = 0; i < sent.size(); ++i) {
      const std::string& w = sent[i];
      if (!is_word(w)) continue;
      const std::string key = lower(w);
      if (stopword_set().count(key) != 0) continue;
      Acc& a = acc[key];
      ++a.stats.tf;
      if (starts_upper(w)) ++a.stats.tf_upper;
      if (is_acronym(w)) ++a.stats.tf_acronym;
      a.sentence_ids.push_back(static_cast<double>(s));
      a.sentences.insert(s);
      for (int k = 1; k <= window; ++k) {
        if (i < static_cast<std::size_t>(k) || !is_word(sent[i - k])) break;
        a.left.insert(lower(sent[i - k]));
      }
      for (int k = 1; k <= window; ++k) {
        if (i + k >= sent.size() || !is_word(sent[i + k])) break;
        a.right.insert(lower(sent[i + k]));
      }
    }
  }
  std::map<std::string, TermStats> out;
  if (acc.empty()) return out;

  double mean = 0.0;
  double max_tf = 0.0;
  for (const auto& [k, a] : acc) {
    mean += static_cast<double>(a.stats.tf);
    max_tf = std::max(max_tf, static_cast<double>(a.stats.tf));
  }
  mean /= static_cast<double>(acc.size());
  double var = 0.0;
  for (const auto& [k, a] : acc) var += std::pow(static_cast<double>(a.stats.tf) - mean, 2);
  const double sd = std::sqrt(var / static_cast<double>(acc.size()));
  const double n_sent = static_cast<double>(std::max<std::size_t>(1, sentences.size()));

  auto diversity = [](const std::multiset<std::string>& m) {
    if (m.empty()) return 0.0;
    const std::set<std::string> distinct(m.begin(), m.end());
    return static_cast<double>(distinct.size()) / static_cast<double>(m.size());
  };

  for (auto& [key, a] : acc) {
    TermStats st = a.stats;
    const double tf = static_cast<double>(st.tf);
    st.casing = static_cast<double>(std::max(st.tf_upper, st.tf_acronym)) / std::max(1.0, tf);
    st.position = std::log(std::log(3.0 + median(a.sentence_ids)));
    st.frequency = tf / (mean + sd);
    st.relatedness = 1.0 + (diversity(a.left) + diversity(a.right)) * tf / max_tf;
    st.dispersion = static_cast<double>(a.sentences.size()) / n_sent;
    st.score = term_score(st.casing, st.position, st.frequency, st.relatedness, st.dispersion);
    out.emplace(key, st);
  }
  return out;
}

std::vector<KeywordCandidate> extract_keywords(std::string_view response, const KeywordConfig& config) {
  const std::vector<std::string> tokens = WordTokenizer::split(response);
  const auto sentences = split_sentences(tokens);
  const auto stats = term_features(sentences, config.window);
  if (stats.empty() || config.k_top <= 0) return {};

  struct Occurrence {
    std::size_t start;
    std::size_t end;
  };
  std::map<std::string, std::vector<Occurrence>> occurrences;
  std::size_t base = 0;
  for (const auto& sent : sentences) {
    for (std::size_t i = 0; i < sent.size(); ++i) {
      if (!is_word(sent[i]) || is_stopword(sent[i])) continue;
      std::string key;
      for (std::size_t j = i; j < sent.size() && j - i < static_cast<std::size_t>(config.max_ngram); ++j) {
        if (!is_word(sent[j])) break;
        key += (key.empty() ? "" : " ") + lower(sent[j]);
        if (is_stopword(sent[j])) continue;
        occurrences[key].push_back({base + i, base + j + 1});
      }
    }
    base += sent.size();
  }

  std::vector<KeywordCandidate> cands;
  for (const auto& [key, occ] : occurrences) {
    KeywordCandidate c;
    c.start = occ.front().start;
    c.end = occ.front().end;
    double prod = 1.0;
    double sum = 0.0;
    for (std::size_t t = c.start; t < c.end; ++t) {
      c.tokens.push_back(tokens[t]);
      const std::string lw = lower(tokens[t]);
      auto it = stats.find(lw);
      if (it == stats.end()) continue;  // stopword inside the n-gram
      prod *= it->second.score;
      sum += it->second.score;
    }
    c.score = prod / (static_cast<double>(occ.size()) * (1.0 + sum));
    cands.push_back(std::move(c));
  }
  std::sort(cands.begin(), cands.end(), [](const KeywordCandidate& a, const KeywordCandidate& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.start != b.start) return a.start < b.start;
    return a.end < b.end;
  });

  std::vector<KeywordCandidate> chosen;
  for (auto& c : cands) {
    if (chosen.size() >= static_cast<std::size_t>(config.k_top)) break;
    const bool overlaps = std::any_of(chosen.begin(), chosen.end(), [&](const KeywordCandidate& k) {
      return c.start < k.end && k.start < c.end;
    });
    if (!overlaps) chosen.push_back(std::move(c));
  }
  return chosen;
}

}  // namespace cvaet
