#pragma once

// Negative responses: mask one key n-gram at a time and let an infill backend
// rewrite the masked positions.

#include <chrono>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cvaet/config.hpp"
#include "cvaet/corpus.hpp"
#include "cvaet/keywords.hpp"
#include "cvaet/random.hpp"

namespace cvaet {

struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  bool operator==(const TokenSpan&) const = default;
};

// One key n-gram replaced by [MASK], one mask per token.
struct MaskedSentence {
  std::vector<int> ids;
  TokenSpan mask_span;
  std::vector<int> original_tokens;

  std::vector<int> mask_positions() const;
  // Puts original_tokens back.
  std::vector<int> restore() const;
};

class InfillBackend {
 public:
  virtual ~InfillBackend() = default;
  virtual std::string name() const = 0;
  // One sampled id per mask position, in order. Implementations may throw
  // cvaet::Error(ErrorKind::backend).
  virtual std::vector<int> infill(const MaskedSentence& masked, Rng& rng) = 0;
  // Most probable fill for mask position `index` (into mask_positions())
  // that differs from the original token, if the backend can name one.
  virtual std::optional<int> best_alternative(const MaskedSentence& masked, std::size_t index) = 0;
};

// Samples from the corpus unigram distribution restricted to the coarse class
// of the original token (word vs punctuation), never the original itself.
class StatisticalBackend final : public InfillBackend {
 public:
  StatisticalBackend(const Vocab& vocab, std::span<const TrainingExample> corpus);
  StatisticalBackend(const Vocab& vocab, std::vector<double> unigram_counts);

  std::string name() const override { return "statistical"; }
  std::vector<int> infill(const MaskedSentence& masked, Rng& rng) override;
  std::optional<int> best_alternative(const MaskedSentence& masked, std::size_t index) override;

 private:
  bool is_punctuation(int id) const;
  // Draws a same-class id other than `original`, weighted by corpus count.
  std::optional<int> sample(int original, Rng& rng) const;

  const Vocab& vocab_;
  std::vector<double> counts_;
  std::vector<bool> punct_;
};

// Client for an infill service speaking newline-delimited JSON over TCP:
//   request  {"tokens":[..strings..],"mask_positions":[..ints..],"samples":n}
//   response {"fills":[[..strings..], ..]}   one list per sample
// Each request uses its own connection; at most max_in_flight requests run
// concurrently; every read/write is bounded by timeout.
class ExternalBackend final : public InfillBackend {
 public:
  struct Options {
    std::string address;  // host:port
    std::chrono::milliseconds timeout{5000};
    int max_in_flight = 4;
    int attempts = 2;
    int alternative_samples = 8;
  };

  ExternalBackend(const Vocab& vocab, Options options);
  ~ExternalBackend() override;

  std::string name() const override { return "external"; }
  std::vector<int> infill(const MaskedSentence& masked, Rng& rng) override;
  std::optional<int> best_alternative(const MaskedSentence& masked, std::size_t index) override;

  // Sends one request, returns the decoded fills. Exposed for tests.
  std::vector<std::vector<std::string>> request(const std::vector<std::string>& tokens,
                                                const std::vector<int>& mask_positions, int samples);

 private:
  std::string exchange(const std::string& line);
  std::vector<std::string> to_tokens_with_masks(const MaskedSentence& masked) const;

  const Vocab& vocab_;
  Options options_;
  struct Gate;
  std::unique_ptr<Gate> gate_;
};

// Re-maps word spans over WordTokenizer::split(text) onto token offsets of a
// framed response (offset 1 = first token after __start__).
std::vector<TokenSpan> keyword_token_spans(std::string_view text,
                                           const std::vector<KeywordCandidate>& keywords,
                                           const Tokenizer& tokenizer);

struct MaskingStats {
  std::size_t skipped_out_of_bounds = 0;
};

// One masked sentence per span. Spans must lie strictly between the
// sentinels; others are skipped and counted.
std::vector<MaskedSentence> make_masked_variants(std::span<const int> response,
                                                 std::span<const TokenSpan> spans,
                                                 MaskingStats* stats = nullptr);

struct NegativeResult {
  std::vector<std::vector<int>> negatives;
  std::size_t backend_errors = 0;
  std::size_t forced = 0;
  std::size_t dropped = 0;
  bool no_negatives = false;
};

// Each variant is sampled up to 1 + retries times until some masked position
// differs from the original; after that the backend's best alternative is
// forced into the first masked position. Variants the backend cannot serve
// are dropped.
NegativeResult generate_negatives(std::span<const int> response, std::span<const TokenSpan> spans,
                                  InfillBackend& backend, int retries, Rng& rng,
                                  const Vocab& vocab);

struct AugmentStats {
  std::size_t examples = 0;
  std::size_t with_negatives = 0;
  std::size_t negatives = 0;
  std::size_t keywords = 0;
  std::size_t backend_errors = 0;
  std::size_t forced = 0;
  std::size_t dropped = 0;

  nlohmann::json to_json() const;
};

// Replaces each example's negatives with freshly generated ones: keywords of
// response_text, one masked variant per keyword, infilled by `backend`.
// Randomness is a pure function of (seed, example index).
AugmentStats augment_with_negatives(std::vector<TrainingExample>& examples, InfillBackend& backend,
                                    const KeywordConfig& keywords, const NegativesConfig& config,
                                    const Tokenizer& tokenizer, const Vocab& vocab, std::uint64_t seed);

// Environment variable naming the external service address; overrides an
// empty infill_address.
inline constexpr const char* kInfillAddressEnv = "CVAET_INFILL_ADDR";

// "statistical" (fitted on `corpus`) or "external".
std::unique_ptr<InfillBackend> make_infill_backend(const NegativesConfig& config, const Vocab& vocab,
                                                   std::span<const TrainingExample> corpus);

// Uniform pick among example.negatives; throws ErrorKind::precondition when
// there are none.
const std::vector<int>& sample_negative(const TrainingExample& example, Rng& rng);

}  // namespace cvaet
