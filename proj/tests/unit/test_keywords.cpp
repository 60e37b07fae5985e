#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"

#include "cvaet/corpus.hpp"
#include "cvaet/keywords.hpp"

using namespace cvaet;

namespace {

std::string low(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool word(const std::string& t) { return std::isalnum(static_cast<unsigned char>(t[0])) != 0; }

// Straightforward re-derivation of the documented scoring for ASCII text:
// every term statistic is recomputed by scanning all occurrences.
struct Oracle {
  std::vector<std::string> tokens;
  std::vector<std::size_t> sentence_of;
  std::size_t sentences = 0;
  std::map<std::string, double> term;

  explicit Oracle(const std::string& text) {
    tokens = WordTokenizer::split(text);
    std::size_t s = 0;
    for (const auto& t : tokens) {
      sentence_of.push_back(s);
      if (t == "." || t == "!" || t == "?") ++s;
    }
    sentences = tokens.empty() ? 0 : sentence_of.back() + 1;
    std::map<std::string, std::vector<std::size_t>> occ;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (word(tokens[i]) && !is_stopword(tokens[i])) occ[low(tokens[i])].push_back(i);
    }
    double mean = 0, max_tf = 0;
    for (const auto& [k, v] : occ) {
      mean += static_cast<double>(v.size());
      max_tf = std::max(max_tf, static_cast<double>(v.size()));
    }
    mean /= static_cast<double>(occ.size());
    double var = 0;
    for (const auto& [k, v] : occ) var += (static_cast<double>(v.size()) - mean) * (static_cast<double>(v.size()) - mean);
    const double sd = std::sqrt(var / static_cast<double>(occ.size()));

    for (const auto& [k, v] : occ) {
      const double tf = static_cast<double>(v.size());
      double upper = 0, acr = 0;
      std::vector<double> sids;
      std::set<std::size_t> sset;
      std::vector<std::string> left, right;
      for (std::size_t i : v) {
        const std::string& w = tokens[i];
        if (std::isupper(static_cast<unsigned char>(w[0]))) ++upper;
        if (w.size() >= 2 && std::all_of(w.begin(), w.end(), [](char c) { return std::isupper(static_cast<unsigned char>(c)); })) ++acr;
        sids.push_back(static_cast<double>(sentence_of[i]));
        sset.insert(sentence_of[i]);
        if (i > 0 && word(tokens[i - 1]) && sentence_of[i - 1] == sentence_of[i]) left.push_back(low(tokens[i - 1]));
        if (i + 1 < tokens.size() && word(tokens[i + 1]) && sentence_of[i + 1] == sentence_of[i]) right.push_back(low(tokens[i + 1]));
      }
      std::sort(sids.begin(), sids.end());
      const std::size_t n = sids.size();
      const double med = n % 2 ? sids[n / 2] : (sids[n / 2 - 1] + sids[n / 2]) / 2;
      auto div = [](const std::vector<std::string>& xs) {
        if (xs.empty()) return 0.0;
        return static_cast<double>(std::set<std::string>(xs.begin(), xs.end()).size()) / static_cast<double>(xs.size());
      };
      const double casing = std::max(upper, acr) / std::max(1.0, tf);
      const double position = std::log(std::log(3 + med));
      const double frequency = tf / (mean + sd);
      const double rel = 1 + (div(left) + div(right)) * tf / max_tf;
      const double disp = static_cast<double>(sset.size()) / static_cast<double>(sentences);
      term[k] = rel * position / (casing + frequency / rel + disp / rel);
    }
  }

  // Every candidate span keyed by its lowercased text, scored at its first
  // occurrence.
  std::map<std::string, std::pair<std::pair<std::size_t, std::size_t>, double>> candidates(int max_ngram) const {
    std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> occ;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      for (std::size_t j = i; j < tokens.size() && j - i < static_cast<std::size_t>(max_ngram); ++j) {
        bool ok = true;
        for (std::size_t t = i; t <= j; ++t) ok = ok && word(tokens[t]) && sentence_of[t] == sentence_of[i];
        if (!ok) break;
        if (is_stopword(tokens[i]) || is_stopword(tokens[j])) continue;
        std::string key;
        for (std::size_t t = i; t <= j; ++t) key += (t > i ? " " : "") + low(tokens[t]);
        occ[key].push_back({i, j + 1});
      }
    }
    std::map<std::string, std::pair<std::pair<std::size_t, std::size_t>, double>> out;
    for (const auto& [k, v] : occ) {
      double prod = 1, sum = 0;
      for (std::size_t t = v[0].first; t < v[0].second; ++t) {
        if (is_stopword(tokens[t])) continue;
        prod *= term.at(low(tokens[t]));
        sum += term.at(low(tokens[t]));
      }
      out[k] = {v[0], prod / (static_cast<double>(v.size()) * (1 + sum))};
    }
    return out;
  }
};

std::string lower_text(const KeywordCandidate& k) { return low(k.text()); }

}  // namespace

TEST_CASE("stopwords get no term statistics") {
  const auto stats = term_features({{"the", "cat", "sat"}});
  CHECK(is_stopword("the"));
  REQUIRE(stats.size() == 2);
  CHECK(stats.count("cat") == 1);
  CHECK(stats.count("sat") == 1);
}

TEST_CASE("a term in every sentence has dispersion 1") {
  const auto stats = term_features({{"cats", "purr", "."}, {"dogs", "like", "cats", "."}, {"cats", "!"}});
  CHECK(stats.at("cats").dispersion == doctest::Approx(1.0));
  CHECK(stats.at("dogs").dispersion == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("casing of 'Paris paris' is one capitalised occurrence over two") {
  const auto stats = term_features({{"Paris", "paris"}});
  CHECK(stats.at("paris").casing == doctest::Approx(0.5));
  const auto acr = term_features({{"NASA", "rocks"}});
  CHECK(acr.at("nasa").casing == doctest::Approx(1.0));
}

TEST_CASE("term statistics match the documented formulas on a worked example") {
  // One sentence, all terms TF 1: frequency 1, position ln ln 3, dispersion 1.
  const auto stats = term_features({{"i", "love", "playing", "tennis", "with", "friends"}});
  const double pos = std::log(std::log(3.0));
  CHECK(stats.at("love").position == doctest::Approx(pos));
  CHECK(stats.at("love").frequency == doctest::Approx(1.0));
  CHECK(stats.at("love").relatedness == doctest::Approx(3.0));     // "i" left, "playing" right
  CHECK(stats.at("friends").relatedness == doctest::Approx(2.0));  // left only
  CHECK(stats.at("love").score == doctest::Approx(9.0 * pos / 2.0));
  CHECK(stats.at("friends").score == doctest::Approx(4.0 * pos / 2.0));
}

TEST_CASE("an all-stopword response has no keywords") {
  CHECK(extract_keywords("and then it was so", KeywordConfig{}).empty());
  CHECK(extract_keywords("", KeywordConfig{}).empty());
}

TEST_CASE("brute-force scoring agrees with the extractor's ranking") {
  const std::vector<std::string> texts = {
      "i love playing tennis with friends",
      "I work as a nurse in Berlin. The hospital is big and Berlin is busy!",
      "My sister bought a red bike. She rides the red bike to school every day.",
      "We watched a movie about space travel and the movie was long.",
  };
  for (const auto& text : texts) {
    CAPTURE(text);
    const Oracle o(text);
    KeywordConfig kc;
    kc.k_top = 1000;
    const auto got = extract_keywords(text, kc);
    const auto cands = o.candidates(kc.max_ngram);
    REQUIRE(!got.empty());
    // Every returned keyword has the oracle's score and span.
    for (const auto& k : got) {
      const auto it = cands.find(lower_text(k));
      REQUIRE(it != cands.end());
      CHECK(k.score == doctest::Approx(it->second.second).epsilon(1e-12));
      CHECK(k.start == it->second.first.first);
      CHECK(k.end == it->second.first.second);
    }
    // The top keyword is the oracle's best candidate.
    auto best = cands.begin();
    for (auto it = cands.begin(); it != cands.end(); ++it) {
      if (it->second.second < best->second.second) best = it;
    }
    CHECK(lower_text(got.front()) == best->first);
    // Nondecreasing scores, disjoint spans.
    for (std::size_t i = 1; i < got.size(); ++i) CHECK(got[i - 1].score <= got[i].score);
    for (std::size_t i = 0; i < got.size(); ++i) {
      for (std::size_t j = i + 1; j < got.size(); ++j) {
        CHECK((got[i].end <= got[j].start || got[j].end <= got[i].start));
      }
    }
  }
}

TEST_CASE("the top keyword of the tennis sentence is a content n-gram") {
  const auto kw = extract_keywords("i love playing tennis with friends", KeywordConfig{});
  REQUIRE(!kw.empty());
  CHECK(kw.front().text() != "i");
  CHECK(kw.front().text() != "with");
  CHECK(kw.front().text().find("tennis") != std::string::npos);
  for (const auto& k : kw) {
    CHECK_FALSE(is_stopword(k.tokens.front()));
    CHECK_FALSE(is_stopword(k.tokens.back()));
    CHECK(k.score > 0.0);
  }
}

TEST_CASE("extraction is deterministic and bounded by k_top") {
  const std::string text = "Paris is lovely in spring. We walked along the Seine and ate crepes in Paris.";
  KeywordConfig kc;
  const auto a = extract_keywords(text, kc);
  const auto b = extract_keywords(text, kc);
  CHECK(a == b);
  CHECK(a.size() <= 3);
  kc.k_top = 1;
  CHECK(extract_keywords(text, kc).size() == 1);
}

TEST_CASE("term score never rises as dispersion grows") {
  for (double d = 0.1; d < 1.0; d += 0.1) {
    CHECK(term_score(0.2, 0.5, 1.0, 1.5, d + 0.1) <= term_score(0.2, 0.5, 1.0, 1.5, d));
  }
  // Spreading a term into more sentences, other statistics held similar.
  const auto one = term_features({{"apple", "pie", "."}, {"nice", "day", "."}, {"good", "food", "."}});
  const auto two = term_features({{"apple", "pie", "."}, {"nice", "apple", "."}, {"good", "food", "."}});
  CHECK(two.at("apple").dispersion > one.at("apple").dispersion);
}
