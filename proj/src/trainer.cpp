#include "cvaet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>

#include "cvaet/error.hpp"
#include "cvaet/negatives.hpp"

namespace cvaet {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5a11;
constexpr std::uint64_t kBatchOrderStream = 0x5a12;
constexpr std::uint64_t kStepStream = 0x57e9;
constexpr std::uint64_t kValidStream = 0x7a1d;

std::vector<ad::Matrix> zeros_like(const ParameterSet& params) {
  std::vector<ad::Matrix> out;
  out.reserve(params.size());
  for (const auto& p : params.all()) out.push_back(ad::Matrix::Zero(p.value.rows(), p.value.cols()));
  return out;
}

ad::Matrix standard_normal(int cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  ad::Matrix m(1, cols);
  for (int i = 0; i < cols; ++i) m(0, i) = dist(rng);
  return m;
}

std::string batch_ids(std::span<const TrainingExample* const> batch) {
  std::string out;
  for (const auto* ex : batch) {
    if (!out.empty()) out += ", ";
    out += "episode " + std::to_string(ex->episode_index) + " turn " + std::to_string(ex->turn_index);
  }
  return out;
}

}  // namespace

// ---- optimizer --------------------------------------------------------------------

Optimizer::Optimizer(const TrainConfig& config, const ParameterSet& params)
    : name_(config.optimizer),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.optimizer_eps),
      m_(zeros_like(params)),
      u_(zeros_like(params)) {
  require(name_ == "adamax" || name_ == "adam", ErrorKind::config,
          "optimizer must be adamax or adam, got '" + name_ + "'");
}

void Optimizer::step(ParameterSet& params, const std::vector<ad::Matrix>& grads, double lr) {
  require(grads.size() == params.size() && m_.size() == params.size(), ErrorKind::internal,
          "optimizer: gradient count differs from parameter count");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[static_cast<ParamId>(i)].value;
    const auto& g = grads[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    if (name_ == "adamax") {
      u_[i] = (beta2_ * u_[i].array()).max(g.array().abs()).matrix();
      p.array() -= (lr / c1) * m_[i].array() / (u_[i].array() + eps_);
    } else {
      u_[i] = beta2_ * u_[i] + (1.0 - beta2_) * g.cwiseAbs2();
      p.array() -= lr * (m_[i].array() / c1) / ((u_[i].array() / c2).sqrt() + eps_);
    }
  }
}

double clip_gradients(std::vector<ad::Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) g *= f;
  }
  return norm;
}

// ---- batches ----------------------------------------------------------------------

BatchSchedule::BatchSchedule(std::span<const TrainingExample> examples, int batch_size,
                             std::uint64_t seed)
    : batch_size_(batch_size), seed_(seed) {
  require(!examples.empty(), ErrorKind::invalid_argument, "batch schedule: no training examples");
  require(batch_size > 0, ErrorKind::config, "batch_size must be positive");
  for (const auto& e : examples) lengths_.push_back(e.context_ids.size());
  batches_per_epoch_ = (lengths_.size() + static_cast<std::size_t>(batch_size) - 1) /
                       static_cast<std::size_t>(batch_size);
}

std::vector<std::vector<std::size_t>> BatchSchedule::epoch_batches(std::int64_t epoch) const {
  std::vector<std::size_t> order(lengths_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle = make_rng(seed_, kShuffleStream, static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), shuffle);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return lengths_[a] < lengths_[b]; });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size_)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size_));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  Rng reorder = make_rng(seed_, kBatchOrderStream, static_cast<std::uint64_t>(epoch));
  std::shuffle(batches.begin(), batches.end(), reorder);
  return batches;
}

std::vector<std::size_t> BatchSchedule::batch(std::int64_t step) const {
  require(step >= 0, ErrorKind::invalid_argument, "batch schedule: negative step");
  const auto nb = static_cast<std::int64_t>(batches_per_epoch_);
  const std::int64_t epoch = step / nb;
  if (epoch != cached_epoch_) {
    cached_ = epoch_batches(epoch);
    cached_epoch_ = epoch;
  }
  return cached_[static_cast<std::size_t>(step % nb)];
}

// ---- batch loss -------------------------------------------------------------------

BatchDraws draw_batch(const CvaeModel& model, std::span<const TrainingExample* const> batch,
                      std::uint64_t seed, std::int64_t step) {
  BatchDraws d;
  const std::uint64_t base = derive_seed(seed, kStepStream, static_cast<std::uint64_t>(step));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Rng rng = make_rng(base, i);
    d.noise.push_back(standard_normal(model.config().d_z, rng));
    d.negative.push_back(batch[i]->negatives.empty() ? nullptr : &sample_negative(*batch[i], rng));
    d.dropout_seed.push_back(rng());
  }
  return d;
}

BatchResult batch_loss(const CvaeModel& model, std::span<const TrainingExample* const> batch,
                       const BatchDraws& draws, double beta, const ObjectiveOptions& options,
                       bool want_grads) {
  require(!batch.empty(), ErrorKind::invalid_argument, "batch_loss: empty batch");
  require(draws.noise.size() == batch.size() && draws.negative.size() == batch.size(),
          ErrorKind::invalid_argument, "batch_loss: draws do not match the batch");
  std::vector<std::unique_ptr<ad::Tape>> tapes;
  std::vector<ExampleTerms> terms;
  std::vector<ExampleLoss> values;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    tapes.push_back(std::make_unique<ad::Tape>(want_grads));
    Rng drop_rng(draws.dropout_seed.empty() ? 0 : draws.dropout_seed[i]);
    const DropoutContext dropout{model.config().dropout, &drop_rng};
    terms.push_back(model.forward_example(*tapes.back(), *batch[i], draws.negative[i],
                                          draws.noise[i], &dropout));
    const ExampleTerms& t = terms.back();
    ExampleLoss v{t.nll.scalar(), t.bow.scalar(), t.kl_plus.scalar(), std::nullopt};
    if (t.kl_minus.valid()) v.kl_minus = t.kl_minus.scalar();
    values.push_back(v);
  }
  BatchResult result;
  LossSeeds seeds;
  result.loss = total_loss(values, beta, options, want_grads ? &seeds : nullptr);
  if (!result.loss.finite()) {
    fail(ErrorKind::numeric, "non-finite loss in batch [" + batch_ids(batch) + "]");
  }
  if (!want_grads) return result;

  result.grads = zeros_like(model.parameters());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ExampleTerms& t = terms[i];
    std::vector<std::pair<ad::Var, double>> roots = {
        {t.nll, seeds.nll[i]}, {t.bow, seeds.bow[i]}, {t.kl_plus, seeds.kl_plus[i]}};
    if (t.kl_minus.valid()) roots.emplace_back(t.kl_minus, seeds.kl_minus[i]);
    tapes[i]->backward(roots);
    tapes[i]->for_each_parameter_grad([&](int index, const ad::Matrix& g) {
      result.grads[static_cast<std::size_t>(index)] += g;
    });
    tapes[i].reset();
  }
  return result;
}

// ---- validation ---------------------------------------------------------------------

nlohmann::json ValidationRecord::to_json() const {
  return {{"step", step},         {"split", "valid"},         {"nll", nll},
          {"ppl", ppl},           {"kl_plus", kl_plus},       {"kl_minus", kl_minus},
          {"gap", gap},           {"examples", examples},     {"with_negatives", with_negatives},
          {"tokens", tokens}};
}

ValidationRecord validate(const CvaeModel& model, std::span<const TrainingExample> examples,
                          bool sampled_z, std::uint64_t seed) {
  ValidationRecord r;
  double nll_sum = 0.0;
  double kl_minus_sum = 0.0;
  double gap_sum = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const TrainingExample& ex = examples[i];
    Rng rng = make_rng(seed, kValidStream, i);
    ad::Tape tape(false);
    const ContextEncoding ctx = model.encode_context(tape, ex);
    const GaussianParams post = model.recognize(tape, ex, ex.response_ids);
    const double kp = ad::gaussian_kl(post.mean, post.log_variance, ctx.prior.mean,
                                      ctx.prior.log_variance).scalar();
    r.kl_plus += kp;
    if (!ex.negatives.empty()) {
      const GaussianParams neg = model.recognize(tape, ex, sample_negative(ex, rng));
      const double km = ad::gaussian_kl(neg.mean, neg.log_variance, ctx.prior.mean,
                                        ctx.prior.log_variance).scalar();
      kl_minus_sum += km;
      gap_sum += km - kp;
      ++r.with_negatives;
    }
    ad::Var z = ctx.prior.mean;
    if (sampled_z) {
      z = CvaeModel::reparameterize(tape, ctx.prior, standard_normal(model.config().d_z, rng));
    }
    const ad::Var logits = model.forward_teacher_forced(tape, ex, ctx, z);
    const std::vector<int> targets = decoder_targets(ex.response_ids);
    nll_sum += ad::cross_entropy(logits, targets).scalar();
    r.tokens += targets.size();
  }
  r.examples = examples.size();
  if (r.examples > 0) r.kl_plus /= static_cast<double>(r.examples);
  if (r.with_negatives > 0) {
    r.kl_minus = kl_minus_sum / static_cast<double>(r.with_negatives);
    r.gap = gap_sum / static_cast<double>(r.with_negatives);
  }
  if (r.tokens > 0) {
    r.nll = nll_sum / static_cast<double>(r.tokens);
    r.ppl = std::exp(r.nll);
  }
  return r;
}

// ---- trainer ------------------------------------------------------------------------

Trainer::Trainer(CvaeModel& model, const TrainConfig& config) : model_(model), config_(config) {
  require(config.learning_rate > 0.0, ErrorKind::config, "learning_rate must be positive");
  require(config.epsilon < 0.0, ErrorKind::config, "epsilon must be negative");
  require(config.anneal_steps > 0, ErrorKind::config, "anneal_steps must be positive");
  state_.optimizer = Optimizer(config, model.parameters());
}

ObjectiveOptions Trainer::objective_options() const {
  return {config_.epsilon, parse_ld_reduction(config_.ld_reduction), config_.use_ld};
}

LossBreakdown Trainer::train_step(std::span<const TrainingExample> data,
                                  const BatchSchedule& schedule) {
  std::vector<const TrainingExample*> batch;
  for (std::size_t i : schedule.batch(state_.step)) batch.push_back(&data[i]);
  return train_on(batch);
}

LossBreakdown Trainer::train_on(std::span<const TrainingExample* const> batch) {
  const double beta = anneal_beta(state_.step, config_.anneal_steps);
  const BatchDraws draws = draw_batch(model_, batch, config_.seed, state_.step);
  BatchResult r = batch_loss(model_, batch, draws, beta, objective_options());
  const double norm = clip_gradients(r.grads, config_.grad_clip);
  if (!std::isfinite(norm)) {
    fail(ErrorKind::numeric, "non-finite gradient in batch [" + batch_ids(batch) + "]");
  }
  state_.optimizer.step(model_.parameters(), r.grads, config_.learning_rate);
  ++state_.step;
  return r.loss;
}

// ---- checkpoints --------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'V', 'A', 'E', 'T', 'C', 'K', 'P'};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  template <class T>
  T get() {
    T v;
    read(&v, sizeof(T));
    return v;
  }
  void read(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) fail(ErrorKind::parse, "checkpoint is truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Settings& settings, const Vocab& vocab,
                     const CvaeModel& model, const TrainState& state) {
  const ParameterSet& params = model.parameters();
  const Optimizer& opt = state.optimizer;
  const bool has_moments = opt.first_moments().size() == params.size();

  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : params.all()) tensors.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  nlohmann::json header = {
      {"settings", settings.to_json()},
      {"model_config", model.config().to_json()},
      {"vocab", vocab.to_json()},
      {"state",
       {{"step", state.step},
        {"best_valid_nll", std::isfinite(state.best_valid_nll) ? nlohmann::json(state.best_valid_nll)
                                                               : nlohmann::json(nullptr)},
        {"optimizer", opt.name()},
        {"updates", opt.updates()},
        {"moments", has_moments}}},
      {"tensors", tensors}};
  const std::string header_text = header.dump();

  std::string body;
  body.append(kMagic, sizeof(kMagic));
  put(body, kCheckpointVersion);
  put(body, static_cast<std::uint64_t>(header_text.size()));
  body += header_text;
  auto put_matrix = [&](const ad::Matrix& m) {
    body.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
  };
  for (const auto& p : params.all()) put_matrix(p.value);
  if (has_moments) {
    for (const auto& m : opt.first_moments()) put_matrix(m);
    for (const auto& m : opt.second_moments()) put_matrix(m);
  }
  put(body, fnv1a(body));

  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write checkpoint " + tmp.string());
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    require(static_cast<bool>(out), ErrorKind::io, "failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  const std::string where = "checkpoint " + path.string();

  require(bytes.size() >= sizeof(kMagic) + 4 + 8 + 8 &&
              std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0,
          ErrorKind::parse, where + " is not a checkpoint file");
  Reader r(bytes);
  char magic[8];
  r.read(magic, sizeof(magic));
  const auto version = r.get<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorKind::version,
          where + " has format version " + std::to_string(version) + ", this build reads version " +
              std::to_string(kCheckpointVersion));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
  require(fnv1a(bytes.substr(0, bytes.size() - sizeof(stored))) == stored, ErrorKind::parse,
          where + " is corrupted (checksum mismatch)");

  const auto header_len = r.get<std::uint64_t>();
  require(header_len < bytes.size(), ErrorKind::parse, where + " has a bad header length");
  std::string header_text(header_len, '\0');
  r.read(header_text.data(), header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, where + ": bad header: " + e.what());
  }

  try {
    Settings settings;
    settings.from_json(header.at("settings"));
    Vocab vocab = Vocab::from_json(header.at("vocab"));
    const ModelConfig config = ModelConfig::from_json(header.at("model_config"));
    require(config.vocab_size == vocab.size(), ErrorKind::validation,
            where + ": model vocabulary size differs from the stored vocabulary");
    CvaeModel model(config, 0);
    ParameterSet& params = model.parameters();
    const auto& tensors = header.at("tensors");
    require(tensors.size() == params.size(), ErrorKind::validation,
            where + ": tensor count does not match the configured model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[static_cast<ParamId>(i)];
      const auto& t = tensors[i];
      require(t.at("name").get<std::string>() == p.name && t.at("rows").get<Eigen::Index>() == p.value.rows() &&
                  t.at("cols").get<Eigen::Index>() == p.value.cols(),
              ErrorKind::validation, where + ": tensor " + t.at("name").get<std::string>() +
                                         " does not match the configured model");
      r.read(p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()));
    }
    const auto& st = header.at("state");
    TrainState state;
    state.step = st.at("step").get<std::int64_t>();
    if (!st.at("best_valid_nll").is_null()) state.best_valid_nll = st.at("best_valid_nll").get<double>();
    TrainConfig tc = settings.train;
    tc.optimizer = st.at("optimizer").get<std::string>();
    state.optimizer = Optimizer(tc, params);
    state.optimizer.set_updates(st.at("updates").get<std::int64_t>());
    if (st.at("moments").get<bool>()) {
      for (auto* group : {&state.optimizer.first_moments(), &state.optimizer.second_moments()}) {
        for (auto& m : *group) r.read(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
      }
    }
    require(r.pos() + sizeof(stored) == bytes.size(), ErrorKind::parse,
            where + " has trailing bytes");
    return Checkpoint{std::move(settings), std::move(vocab), std::move(model), std::move(state)};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, where + ": bad header: " + e.what());
  }
}

// ---- driver -------------------------------------------------------------------------

TrainingSummary run_training(const Settings& settings, const Vocab& vocab,
                             std::span<const TrainingExample> train,
                             std::span<const TrainingExample> valid,
                             const std::filesystem::path& out_dir,
                             const TrainingCallbacks& callbacks) {
  settings.validate();
  const TrainConfig& tc = settings.train;
  std::filesystem::create_directories(out_dir);
  const auto last_path = out_dir / "last";
  const auto best_path = out_dir / "best";
  const auto log_path = out_dir / "steps.jsonl";

  TrainingSummary summary;
  std::optional<Checkpoint> resumed;
  if (std::filesystem::exists(last_path)) {
    resumed.emplace(load_checkpoint(last_path));
    require(resumed->vocab == vocab, ErrorKind::validation,
            "cannot resume from " + last_path.string() + ": vocabulary differs from the training data");
    require(resumed->model.config() == settings.model_config(vocab.size()), ErrorKind::validation,
            "cannot resume from " + last_path.string() + ": model configuration differs");
  }
  CvaeModel model = resumed ? resumed->model : CvaeModel(settings.model_config(vocab.size()), tc.seed);
  Trainer trainer(model, tc);
  if (resumed) {
    trainer.state() = resumed->state;
    summary.resumed = true;
  }
  summary.start_step = trainer.state().step;

  // Keep only log lines up to the resumed step. The config line is rewritten.
  std::vector<std::string> kept;
  if (summary.resumed && std::filesystem::exists(log_path)) {
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        if (nlohmann::json::parse(line).at("step").get<std::int64_t>() <= summary.start_step) kept.push_back(line);
      } catch (const nlohmann::json::exception&) {
      }
    }
  }
  std::ofstream log(log_path, std::ios::trunc);
  require(static_cast<bool>(log), ErrorKind::io, "cannot write " + log_path.string());
  log << nlohmann::json{{"format", "cvaet-steps"}, {"config", settings.to_json()}}.dump() << '\n';
  for (const auto& l : kept) log << l << '\n';

  const BatchSchedule schedule(train, tc.batch_size, tc.seed);
  auto checkpoint = [&](const std::filesystem::path& p) {
    save_checkpoint(p, settings, vocab, model, trainer.state());
  };

  while (trainer.state().step < tc.max_steps) {
    const LossBreakdown loss = trainer.train_step(train, schedule);
    const std::int64_t step = trainer.state().step;
    summary.last_loss = loss;
    nlohmann::json line = loss.to_json();
    line["step"] = step;
    line["split"] = "train";
    log << line.dump() << '\n';
    if (callbacks.on_step) callbacks.on_step(step, loss);

    const bool last_step = step == tc.max_steps;
    if (!valid.empty() && (step % tc.valid_interval == 0 || last_step)) {
      ValidationRecord v = validate(model, valid, tc.sampled_valid_z, tc.seed);
      v.step = step;
      log << v.to_json().dump() << '\n';
      summary.last_validation = v;
      if (callbacks.on_validation) callbacks.on_validation(v);
      if (v.nll < trainer.state().best_valid_nll) {
        trainer.state().best_valid_nll = v.nll;
        checkpoint(best_path);
      }
    }
    log.flush();
    if (step % tc.checkpoint_interval == 0 || last_step) checkpoint(last_path);
  }
  if (valid.empty() || !std::filesystem::exists(best_path)) {
    if (!std::filesystem::exists(last_path)) checkpoint(last_path);
    std::filesystem::copy_file(last_path, best_path, std::filesystem::copy_options::overwrite_existing);
  }
  summary.final_step = trainer.state().step;
  return summary;
}

}  // namespace cvaet
