#pragma once

// Corpus-level automatic metrics.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cvaet/corpus.hpp"
#include "cvaet/model.hpp"

namespace cvaet {

using TokenSeq = std::vector<std::string>;

// BLEU-1..max_n. Clipped n-gram counts are pooled over the corpus; orders
// n >= 2 use (matches + 1) / (total + 1); brevity penalty exp(1 - r/c) when
// the hypothesis total c is shorter than the reference total r. BLEU-k is the
// geometric mean of orders 1..k times the penalty.
std::vector<double> bleu(std::span<const TokenSeq> hypotheses, std::span<const TokenSeq> references,
                         int max_n = 4);

// Unique n-grams over all responses / n-gram occurrences over all responses;
// 0 when there are none.
double distinct_n(std::span<const TokenSeq> responses, int n);

// Whitespace split of detokenized text.
TokenSeq whitespace_tokens(const std::string& text);

struct PerplexityResult {
  double ppl = 0.0;
  double nll_sum = 0.0;
  std::size_t tokens = 0;
};

// exp(total NLL / target tokens) under teacher forcing with z = prior mean.
PerplexityResult perplexity(const CvaeModel& model, std::span<const TrainingExample> examples);

}  // namespace cvaet
