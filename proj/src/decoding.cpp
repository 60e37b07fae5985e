#include "cvaet/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "cvaet/error.hpp"

namespace cvaet {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::uint64_t kSampleStream = 0xdec0;

// True when tokens[i..i+n) is an n-gram without boundary tokens.
bool clean_ngram(std::span<const int> tokens, std::size_t i, int n) {
  for (std::size_t k = i; k < i + static_cast<std::size_t>(n); ++k) {
    if (is_ngram_boundary(tokens[k])) return false;
  }
  return true;
}

}  // namespace

double BeamHypothesis::score() const {
  return log_prob / static_cast<double>(std::max(1, generated()));
}

bool is_ngram_boundary(int id) { return id >= 0 && id < Vocab::kNumBuiltin && id != Vocab::kUnkId; }

std::set<int> blocked_tokens(std::span<const int> hypothesis, std::span<const int> context, int n) {
  require(n >= 2, ErrorKind::invalid_argument, "blocking needs n >= 2");
  std::set<int> out;
  const auto m = static_cast<std::size_t>(n - 1);
  if (hypothesis.size() < m) return out;
  const std::span<const int> tail = hypothesis.subspan(hypothesis.size() - m);
  if (std::any_of(tail.begin(), tail.end(), is_ngram_boundary)) return out;

  auto scan = [&](std::span<const int> seq) {
    if (seq.size() < static_cast<std::size_t>(n)) return;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
      if (!clean_ngram(seq, i, n)) continue;
      if (std::equal(tail.begin(), tail.end(), seq.begin() + static_cast<std::ptrdiff_t>(i))) {
        out.insert(seq[i + m]);
      }
    }
  };
  scan(context);
  scan(hypothesis);
  return out;
}

BeamResult beam_search(StepScorer& scorer, std::span<const int> context, const BeamOptions& options) {
  require(options.beam_size >= 1, ErrorKind::config, "beam size must be at least 1");
  require(options.max_len >= 2, ErrorKind::config, "decode max_len must be at least 2");
  const auto B = static_cast<std::size_t>(options.beam_size);

  struct Candidate {
    std::size_t parent;
    int token;
    double log_prob;
  };

  std::vector<BeamHypothesis> live = {{{Vocab::kStartId}, 0.0, false}};
  std::vector<BeamHypothesis> finished;
  std::vector<BeamHypothesis> stalled;

  while (!live.empty() && finished.size() < B) {
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto& hyp = live[h];
      const std::vector<double> lp = scorer.log_probs(hyp.tokens);
      const std::set<int> blocked = options.block_ngram >= 2
                                        ? blocked_tokens(hyp.tokens, context, options.block_ngram)
                                        : std::set<int>{};
      bool any = false;
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (!std::isfinite(lp[v]) || blocked.count(static_cast<int>(v)) != 0) continue;
        cands.push_back({h, static_cast<int>(v), hyp.log_prob + lp[v]});
        any = true;
      }
      if (!any) stalled.push_back(hyp);
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });

    std::vector<BeamHypothesis> next;
    for (std::size_t r = 0; r < cands.size(); ++r) {
      if (r >= B && next.size() >= B) break;
      const Candidate& c = cands[r];
      BeamHypothesis h = live[c.parent];
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      const bool ends = c.token == Vocab::kEndId ||
                        static_cast<int>(h.tokens.size()) >= options.max_len;
      if (ends) {
        if (r < B) {
          h.finished = true;
          finished.push_back(std::move(h));
        }
      } else if (next.size() < B) {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }

  BeamResult result;
  auto by_score = [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.score() != b.score()) return a.score() > b.score();
    return a.tokens < b.tokens;
  };
  std::stable_sort(finished.begin(), finished.end(), by_score);
  result.beam = finished;
  if (!finished.empty()) {
    result.best = finished.front();
    return result;
  }
  std::vector<BeamHypothesis> rest = live;
  rest.insert(rest.end(), stalled.begin(), stalled.end());
  std::stable_sort(rest.begin(), rest.end(), by_score);
  result.best_unfinished = true;
  if (!rest.empty()) result.best = rest.front();
  return result;
}

// ---- model scorer ------------------------------------------------------------------

ModelScorer::ModelScorer(const CvaeModel& model, const TrainingExample& example, const ad::Matrix& z)
    : model_(model), role_(example.response_role_id) {
  ad::Tape tape(false);
  const SequenceInput in = context_input(example, model.config());
  encoded_ = model.encode(tape, model.embed(tape, in), in.valid).value();
  valid_ = in.valid;
  latent_ = model.bridge(tape, tape.constant(z)).value();
}

std::vector<double> ModelScorer::log_probs(std::span<const int> prefix) {
  require(!prefix.empty() && static_cast<int>(prefix.size()) <= model_.config().max_positions(),
          ErrorKind::invalid_argument, "decoder prefix length out of range");
  ad::Tape tape(false);
  SequenceInput in;
  in.tokens.assign(prefix.begin(), prefix.end());
  in.turns.assign(prefix.size(), 0);
  in.roles.assign(prefix.size(), role_);
  in.valid.assign(prefix.size(), 1);
  const ad::Var logits =
      model_.decode(tape, in, tape.constant(encoded_), valid_, tape.constant(latent_));
  const Eigen::RowVectorXd last = logits.value().row(logits.rows() - 1);
  const double mx = last.maxCoeff();
  const double lse = mx + std::log((last.array() - mx).exp().sum());
  std::vector<double> out(static_cast<std::size_t>(last.size()));
  for (Eigen::Index v = 0; v < last.size(); ++v) out[static_cast<std::size_t>(v)] = last(v) - lse;
  for (int banned : {Vocab::kNullId, Vocab::kStartId, Vocab::kMaskId, Vocab::kDelimiterId, Vocab::kUnkId}) {
    if (banned < static_cast<int>(out.size())) out[static_cast<std::size_t>(banned)] = kNegInf;
  }
  return out;
}

PriorValues prior_of(const CvaeModel& model, const TrainingExample& example) {
  ad::Tape tape(false);
  const ContextEncoding ctx = model.encode_context(tape, example);
  return {ctx.prior.mean.value(), ctx.prior.log_variance.value()};
}

BeamOptions beam_options(const DecodeConfig& config) {
  return {config.beam_size, config.max_len, config.block_ngram};
}

namespace {

// A response can be no longer than the model has position embeddings for.
BeamOptions fit_to_model(BeamOptions options, const CvaeModel& model) {
  options.max_len = std::min(options.max_len, model.config().max_positions());
  return options;
}

}  // namespace

BeamResult generate_with_mean(const CvaeModel& model, const TrainingExample& example,
                              const BeamOptions& options) {
  ModelScorer scorer(model, example, prior_of(model, example).mean);
  return beam_search(scorer, example.context_ids, fit_to_model(options, model));
}

std::vector<BeamResult> sample_responses(const CvaeModel& model, const TrainingExample& example,
                                         int count, const DecodeConfig& config) {
  require(count >= 1, ErrorKind::invalid_argument, "sample count must be at least 1");
  require(config.z_mode == "sample" || config.z_mode == "mean", ErrorKind::config,
          "z_mode must be sample or mean");
  const PriorValues prior = prior_of(model, example);
  std::vector<BeamResult> out;
  for (int i = 0; i < count; ++i) {
    ad::Matrix z = prior.mean;
    if (config.z_mode == "sample") {
      Rng rng = make_rng(config.seed, kSampleStream, static_cast<std::uint64_t>(i));
      std::normal_distribution<double> dist(0.0, 1.0);
      for (Eigen::Index k = 0; k < z.size(); ++k) {
        z(0, k) += std::exp(0.5 * prior.log_variance(0, k)) * dist(rng);
      }
    }
    ModelScorer scorer(model, example, z);
    out.push_back(beam_search(scorer, example.context_ids, fit_to_model(beam_options(config), model)));
  }
  return out;
}

}  // namespace cvaet
