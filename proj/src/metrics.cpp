#include "cvaet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "cvaet/error.hpp"

namespace cvaet {

namespace {

std::map<TokenSeq, std::size_t> ngram_counts(const TokenSeq& tokens, int n) {
  std::map<TokenSeq, std::size_t> out;
  const auto k = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + k <= tokens.size(); ++i) {
    ++out[TokenSeq(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                   tokens.begin() + static_cast<std::ptrdiff_t>(i + k))];
  }
  return out;
}

}  // namespace

std::vector<double> bleu(std::span<const TokenSeq> hypotheses, std::span<const TokenSeq> references,
                         int max_n) {
  require(hypotheses.size() == references.size(), ErrorKind::invalid_argument,
          "bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
              std::to_string(references.size()) + " references");
  require(max_n >= 1, ErrorKind::invalid_argument, "bleu: max_n must be positive");
  std::vector<double> matches(static_cast<std::size_t>(max_n), 0.0);
  std::vector<double> totals(static_cast<std::size_t>(max_n), 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    hyp_len += static_cast<double>(hypotheses[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (int n = 1; n <= max_n; ++n) {
      const auto h = ngram_counts(hypotheses[i], n);
      const auto r = ngram_counts(references[i], n);
      for (const auto& [gram, c] : h) {
        const auto it = r.find(gram);
        const std::size_t ref_c = it == r.end() ? 0 : it->second;
        matches[static_cast<std::size_t>(n - 1)] += static_cast<double>(std::min(c, ref_c));
        totals[static_cast<std::size_t>(n - 1)] += static_cast<double>(c);
      }
    }
  }
  std::vector<double> out;
  if (hyp_len == 0.0) return std::vector<double>(static_cast<std::size_t>(max_n), 0.0);
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto k = static_cast<std::size_t>(n - 1);
    const double p = n == 1 ? (totals[k] > 0 ? matches[k] / totals[k] : 0.0)
                            : (matches[k] + 1.0) / (totals[k] + 1.0);
    log_sum += p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
    out.push_back(bp * std::exp(log_sum / static_cast<double>(n)));
  }
  return out;
}

double distinct_n(std::span<const TokenSeq> responses, int n) {
  require(n >= 1, ErrorKind::invalid_argument, "distinct_n: n must be positive");
  std::set<TokenSeq> unique;
  std::size_t total = 0;
  for (const auto& r : responses) {
    for (const auto& [gram, c] : ngram_counts(r, n)) {
      unique.insert(gram);
      total += c;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

TokenSeq whitespace_tokens(const std::string& text) {
  std::istringstream in(text);
  TokenSeq out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

PerplexityResult perplexity(const CvaeModel& model, std::span<const TrainingExample> examples) {
  require(!examples.empty(), ErrorKind::invalid_argument, "perplexity: empty test set");
  PerplexityResult r;
  for (const auto& ex : examples) {
    ad::Tape tape(false);
    const ContextEncoding ctx = model.encode_context(tape, ex);
    const ad::Var logits = model.forward_teacher_forced(tape, ex, ctx, ctx.prior.mean);
    const std::vector<int> targets = decoder_targets(ex.response_ids);
    r.nll_sum += ad::cross_entropy(logits, targets).scalar();
    r.tokens += targets.size();
  }
  r.ppl = std::exp(r.nll_sum / static_cast<double>(r.tokens));
  return r;
}

}  // namespace cvaet
