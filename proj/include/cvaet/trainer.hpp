#pragma once

// Optimization loop: batch loss and gradients, adaptive-moment updates,
// validation diagnostics, checkpoints and the resumable training driver.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cvaet/config.hpp"
#include "cvaet/corpus.hpp"
#include "cvaet/model.hpp"
#include "cvaet/objective.hpp"

namespace cvaet {

// Adamax (default) or Adam. Moments are aligned with the parameter set.
//   adamax: m = b1 m + (1-b1) g;  u = max(b2 u, |g|);  p -= lr/(1-b1^t) * m/(u+eps)
//   adam:   m as above; v = b2 v + (1-b2) g^2;  p -= lr * m_hat/(sqrt(v_hat)+eps)
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const TrainConfig& config, const ParameterSet& params);

  void step(ParameterSet& params, const std::vector<ad::Matrix>& grads, double learning_rate);

  const std::string& name() const { return name_; }
  std::int64_t updates() const { return t_; }
  std::vector<ad::Matrix>& first_moments() { return m_; }
  std::vector<ad::Matrix>& second_moments() { return u_; }
  const std::vector<ad::Matrix>& first_moments() const { return m_; }
  const std::vector<ad::Matrix>& second_moments() const { return u_; }
  void set_updates(std::int64_t t) { t_ = t; }

 private:
  std::string name_ = "adamax";
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<ad::Matrix> m_, u_;
};

// Scales grads in place so their global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_gradients(std::vector<ad::Matrix>& grads, double max_norm);

// Deterministic batches: each epoch shuffles the examples, groups them by
// context length, cuts batches and shuffles the batch order. A pure function
// of (seed, step).
class BatchSchedule {
 public:
  BatchSchedule(std::span<const TrainingExample> examples, int batch_size, std::uint64_t seed);

  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::vector<std::size_t> batch(std::int64_t step) const;

 private:
  std::vector<std::vector<std::size_t>> epoch_batches(std::int64_t epoch) const;

  std::vector<std::size_t> lengths_;
  int batch_size_;
  std::uint64_t seed_;
  std::size_t batches_per_epoch_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::vector<std::vector<std::size_t>> cached_;
};

// Everything random in one batch, fixed up front.
struct BatchDraws {
  std::vector<ad::Matrix> noise;                 // one 1 x d_z row per example
  std::vector<const std::vector<int>*> negative; // nullptr: none available
  std::vector<std::uint64_t> dropout_seed;
};

BatchDraws draw_batch(const CvaeModel& model, std::span<const TrainingExample* const> batch,
                      std::uint64_t seed, std::int64_t step);

struct BatchResult {
  LossBreakdown loss;
  std::vector<ad::Matrix> grads;  // aligned with the parameter set
};

// Loss of a batch and, when want_grads, the gradient of its total.
BatchResult batch_loss(const CvaeModel& model, std::span<const TrainingExample* const> batch,
                       const BatchDraws& draws, double beta, const ObjectiveOptions& options,
                       bool want_grads = true);

struct ValidationRecord {
  std::int64_t step = 0;
  double nll = 0.0;  // per token
  double ppl = 0.0;
  double kl_plus = 0.0;
  double kl_minus = 0.0;   // over examples with a negative
  double gap = 0.0;        // mean(KL- - KL+) over examples with a negative
  std::size_t examples = 0;
  std::size_t with_negatives = 0;
  std::size_t tokens = 0;

  nlohmann::json to_json() const;
};

ValidationRecord validate(const CvaeModel& model, std::span<const TrainingExample> examples,
                          bool sampled_z = false, std::uint64_t seed = 1);

struct TrainState {
  std::int64_t step = 0;
  double best_valid_nll = std::numeric_limits<double>::infinity();
  Optimizer optimizer;
};

class Trainer {
 public:
  Trainer(CvaeModel& model, const TrainConfig& config);

  // One update on the next batch of the schedule. Throws ErrorKind::numeric,
  // naming the offending examples, when the loss or gradient is not finite.
  LossBreakdown train_step(std::span<const TrainingExample> data, const BatchSchedule& schedule);
  // One update on an explicit batch, with draws derived from the step.
  LossBreakdown train_on(std::span<const TrainingExample* const> batch);

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return config_; }
  ObjectiveOptions objective_options() const;

 private:
  CvaeModel& model_;
  TrainConfig config_;
  TrainState state_;
};

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Settings settings;
  Vocab vocab;
  CvaeModel model;
  TrainState state;
};

void save_checkpoint(const std::filesystem::path& path, const Settings& settings, const Vocab& vocab,
                     const CvaeModel& model, const TrainState& state);
// Refuses other format versions (ErrorKind::version) and damaged files
// (ErrorKind::parse).
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- driver ----

struct TrainingSummary {
  std::int64_t start_step = 0;
  std::int64_t final_step = 0;
  bool resumed = false;
  std::optional<ValidationRecord> last_validation;
  LossBreakdown last_loss;
};

struct TrainingCallbacks {
  std::function<void(std::int64_t step, const LossBreakdown&)> on_step;
  std::function<void(const ValidationRecord&)> on_validation;
};

// Trains up to settings.train.max_steps inside out_dir, writing
// out_dir/steps.jsonl (a config line, then one line per step and per
// validation), out_dir/last and out_dir/best. Resumes from
// out_dir/last when it exists.
TrainingSummary run_training(const Settings& settings, const Vocab& vocab,
                             std::span<const TrainingExample> train,
                             std::span<const TrainingExample> valid,
                             const std::filesystem::path& out_dir,
                             const TrainingCallbacks& callbacks = {});

}  // namespace cvaet
