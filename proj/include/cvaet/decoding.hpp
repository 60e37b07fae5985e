#pragma once

// Beam search with context and response n-gram blocking.

#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "cvaet/autodiff.hpp"
#include "cvaet/config.hpp"
#include "cvaet/corpus.hpp"
#include "cvaet/model.hpp"

namespace cvaet {

// Next-token log-probabilities given a prefix that starts with __start__.
// Entries of -infinity are never chosen.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::vector<double> log_probs(std::span<const int> prefix) = 0;
};

struct BeamHypothesis {
  std::vector<int> tokens;  // starts with __start__
  double log_prob = 0.0;
  bool finished = false;

  // Generated tokens, __end__ included.
  int generated() const { return static_cast<int>(tokens.size()) - 1; }
  // Length-normalised: log_prob / generated().
  double score() const;
};

struct BeamOptions {
  int beam_size = 10;
  // Total hypothesis length, __start__ included.
  int max_len = 72;
  int block_ngram = 3;  // 0 disables blocking
};

struct BeamResult {
  BeamHypothesis best;
  // Finished hypotheses by score, nonincreasing.
  std::vector<BeamHypothesis> beam;
  // No hypothesis finished; `best` is the best unfinished one.
  bool best_unfinished = false;
};

// Tokens that split n-grams and never take part in one: sentinels, padding,
// mask and the utterance delimiter.
bool is_ngram_boundary(int id);

// Every v such that (last n-1 tokens of `hypothesis`, v) is an n-gram of the
// context or of the hypothesis itself. Boundary tokens are never blocked.
std::set<int> blocked_tokens(std::span<const int> hypothesis, std::span<const int> context, int n);

BeamResult beam_search(StepScorer& scorer, std::span<const int> context, const BeamOptions& options);

// Scores with the decoder for a fixed context encoding and latent; padding,
// __start__, [MASK], the delimiter and __unk__ are never generated.
class ModelScorer final : public StepScorer {
 public:
  ModelScorer(const CvaeModel& model, const TrainingExample& example, const ad::Matrix& z);
  std::vector<double> log_probs(std::span<const int> prefix) override;

 private:
  const CvaeModel& model_;
  int role_;
  ad::Matrix encoded_;
  std::vector<std::uint8_t> valid_;
  ad::Matrix latent_;
};

// Prior parameters of an example's context as plain values.
struct PriorValues {
  ad::Matrix mean;
  ad::Matrix log_variance;
};
PriorValues prior_of(const CvaeModel& model, const TrainingExample& example);

BeamOptions beam_options(const DecodeConfig& config);

// Beam search from z = prior mean.
BeamResult generate_with_mean(const CvaeModel& model, const TrainingExample& example,
                              const BeamOptions& options);

// `count` responses, each from an independent z ~ prior (or the prior mean
// when config.z_mode is "mean"). Deterministic in (config.seed, sample index).
std::vector<BeamResult> sample_responses(const CvaeModel& model, const TrainingExample& example,
                                         int count, const DecodeConfig& config);

}  // namespace cvaet
