#include "cvaet/model.hpp"

#include <algorithm>
#include <cmath>

#include "cvaet/error.hpp"

namespace cvaet {

namespace {

constexpr std::uint64_t kInitStream = 0x1f17;

ad::Matrix normal_matrix(int rows, int cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  ad::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

ad::Matrix xavier(int in, int out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  ad::Matrix m(in, out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void check_aligned(const SequenceInput& in) {
  require(in.turns.size() == in.size() && in.roles.size() == in.size() &&
              in.valid.size() == in.size(),
          ErrorKind::invalid_argument, "sequence input: misaligned id arrays");
  require(in.size() > 0, ErrorKind::invalid_argument, "sequence input: empty sequence");
}

void check_finite(const ad::Var& v, const char* what) {
  if (!v.value().allFinite()) fail(ErrorKind::numeric, std::string("non-finite values in ") + what);
}

}  // namespace

// ---- ParameterSet -------------------------------------------------------------

ParamId ParameterSet::add(std::string name, ad::Matrix init) {
  params_.push_back({std::move(name), std::move(init)});
  return static_cast<ParamId>(params_.size() - 1);
}

std::optional<ParamId> ParameterSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return static_cast<ParamId>(i);
  }
  return std::nullopt;
}

ad::Var ParameterSet::on(ad::Tape& tape, ParamId id) const {
  return tape.parameter((*this)[id], id);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

// ---- inputs -------------------------------------------------------------------

SequenceInput context_input(const TrainingExample& example, const ModelConfig& config) {
  SequenceInput in;
  if (example.context_ids.empty()) {
    in.tokens = {Vocab::kDelimiterId};
    in.turns = {std::min(1, config.max_turn_id)};
    in.roles = {1 - example.response_role_id};
    in.valid = {1};
    return in;
  }
  in.tokens = example.context_ids;
  in.turns.reserve(in.tokens.size());
  for (int t : example.context_turn_ids) in.turns.push_back(std::clamp(t, 0, config.max_turn_id));
  in.roles = example.context_role_ids;
  in.valid.assign(in.tokens.size(), 1);
  return in;
}

SequenceInput joint_input(const TrainingExample& example, std::span<const int> response,
                          const ModelConfig& config) {
  SequenceInput in = context_input(example, config);
  for (int id : response) {
    in.tokens.push_back(id);
    in.turns.push_back(0);
    in.roles.push_back(example.response_role_id);
    in.valid.push_back(1);
  }
  return in;
}

SequenceInput decoder_input(const TrainingExample& example, std::span<const int> response) {
  require(response.size() >= 2, ErrorKind::invalid_argument,
          "decoder input: response must hold both sentinels");
  SequenceInput in;
  in.tokens.assign(response.begin(), response.end() - 1);
  in.turns.assign(in.tokens.size(), 0);
  in.roles.assign(in.tokens.size(), example.response_role_id);
  in.valid.assign(in.tokens.size(), 1);
  return in;
}

std::vector<int> decoder_targets(std::span<const int> response) {
  require(response.size() >= 2, ErrorKind::invalid_argument,
          "decoder targets: response must hold both sentinels");
  return {response.begin() + 1, response.end()};
}

std::vector<int> bow_targets(std::span<const int> response) {
  std::vector<int> out;
  for (int id : response) {
    if (id != Vocab::kStartId && id != Vocab::kEndId && id != Vocab::kNullId) out.push_back(id);
  }
  return out;
}

ad::Matrix key_padding_mask(std::size_t queries, std::span<const std::uint8_t> valid) {
  ad::Matrix m = ad::Matrix::Zero(static_cast<Eigen::Index>(queries),
                                  static_cast<Eigen::Index>(valid.size()));
  for (std::size_t j = 0; j < valid.size(); ++j) {
    if (valid[j] == 0) m.col(static_cast<Eigen::Index>(j)).setConstant(ad::kMaskedLogit);
  }
  return m;
}

ad::Matrix causal_mask(std::size_t length) {
  const auto n = static_cast<Eigen::Index>(length);
  ad::Matrix m = ad::Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) m(i, j) = ad::kMaskedLogit;
  }
  return m;
}

// ---- construction ---------------------------------------------------------------

LinearLayer CvaeModel::make_linear(const std::string& name, int in, int out, bool bias, Rng& rng) {
  LinearLayer l;
  l.weight = params_.add(name + ".weight", xavier(in, out, rng));
  if (bias) l.bias = params_.add(name + ".bias", ad::Matrix::Zero(1, out));
  return l;
}

LayerNormLayer CvaeModel::make_norm(const std::string& name, int dim) {
  return {params_.add(name + ".gain", ad::Matrix::Ones(1, dim)),
          params_.add(name + ".shift", ad::Matrix::Zero(1, dim))};
}

AttentionLayer CvaeModel::make_attention(const std::string& name, Rng& rng) {
  const int d = config_.d_model;
  return {make_linear(name + ".query", d, d, true, rng), make_linear(name + ".key", d, d, true, rng),
          make_linear(name + ".value", d, d, true, rng),
          make_linear(name + ".output", d, d, true, rng)};
}

FeedForwardLayer CvaeModel::make_ffn(const std::string& name, Rng& rng) {
  return {make_linear(name + ".in", config_.d_model, config_.d_ffn, true, rng),
          make_linear(name + ".out", config_.d_ffn, config_.d_model, true, rng)};
}

PoolingLayer CvaeModel::make_pool(const std::string& name, Rng& rng) {
  const int d = config_.d_model;
  PoolingLayer p;
  p.queries = params_.add(name + ".queries",
                          normal_matrix(config_.k_queries, d, 1.0 / std::sqrt(d), rng));
  p.project = make_linear(name + ".project", config_.k_queries * d, d, true, rng);
  return p;
}

CvaeModel::CvaeModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = make_rng(seed, kInitStream);
  const int d = config_.d_model;
  const double emb_sd = 1.0 / std::sqrt(static_cast<double>(d));

  word_emb_ = params_.add("embed.word", normal_matrix(config_.vocab_size, d, emb_sd, rng));
  pos_emb_ = params_.add("embed.position", normal_matrix(config_.max_positions(), d, emb_sd, rng));
  turn_emb_ = params_.add("embed.turn", normal_matrix(config_.max_turn_id + 1, d, emb_sd, rng));
  role_emb_ = params_.add("embed.role", normal_matrix(2, d, emb_sd, rng));

  for (int l = 0; l < config_.n_enc_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderBlock b;
    b.self_attention = make_attention(p + ".self", rng);
    b.self_norm = make_norm(p + ".self_norm", d);
    b.ffn = make_ffn(p + ".ffn", rng);
    b.ffn_norm = make_norm(p + ".ffn_norm", d);
    encoder_.push_back(b);
  }
  for (int l = 0; l < config_.n_dec_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderBlock b;
    b.self_attention = make_attention(p + ".self", rng);
    b.self_norm = make_norm(p + ".self_norm", d);
    b.memory_attention = make_attention(p + ".memory", rng);
    b.context_norm = make_norm(p + ".context_norm", d);
    b.latent_norm = make_norm(p + ".latent_norm", d);
    b.ffn = make_ffn(p + ".ffn", rng);
    b.ffn_norm = make_norm(p + ".ffn_norm", d);
    decoder_.push_back(b);
  }

  prior_pool_ = make_pool("pool.prior", rng);
  recog_pool_ = make_pool("pool.recognition", rng);
  prior_mlp_ = {make_linear("prior.hidden", d, d, true, rng),
                make_linear("prior.out", d, 2 * config_.d_z, true, rng)};
  posterior_ = make_linear("posterior", d, 2 * config_.d_z, true, rng);
  bridge_ = params_.add("bridge.weight", xavier(config_.d_z, config_.n_latent_vectors * d, rng));
  bow_mlp_ = {make_linear("bow.hidden", d + config_.d_z, d, true, rng),
              make_linear("bow.out", d, config_.vocab_size, true, rng)};
  output_ = make_linear("output", d, config_.vocab_size, true, rng);
}

// ---- helpers ----------------------------------------------------------------------

ad::Var CvaeModel::apply(ad::Tape& tape, const LinearLayer& layer, ad::Var x) const {
  const ad::Var bias = layer.bias >= 0 ? params_.on(tape, layer.bias) : ad::Var{};
  return ad::linear(x, params_.on(tape, layer.weight), bias);
}

ad::Var CvaeModel::apply(ad::Tape& tape, const LayerNormLayer& layer, ad::Var x) const {
  return ad::layer_norm(x, params_.on(tape, layer.gain), params_.on(tape, layer.shift));
}

ad::Var CvaeModel::attend(ad::Tape& tape, const AttentionLayer& layer, ad::Var query,
                          ad::Var memory, const ad::Matrix* mask,
                          std::vector<ad::Matrix>* probs) const {
  const ad::Var q = apply(tape, layer.query, query);
  const ad::Var k = apply(tape, layer.key, memory);
  const ad::Var v = apply(tape, layer.value, memory);
  return apply(tape, layer.output, ad::multi_head_attention(q, k, v, config_.n_heads, mask, probs));
}

ad::Var CvaeModel::maybe_dropout(ad::Var x, const DropoutContext* dropout) const {
  if (dropout == nullptr || dropout->rng == nullptr || dropout->rate <= 0.0) return x;
  return ad::dropout(x, dropout->rate, *dropout->rng);
}

ad::Var CvaeModel::feed_forward(ad::Tape& tape, const FeedForwardLayer& layer, ad::Var x,
                                const DropoutContext* dropout) const {
  return apply(tape, layer.out, maybe_dropout(ad::relu(apply(tape, layer.in, x)), dropout));
}

GaussianParams CvaeModel::split_gaussian(ad::Var raw) const {
  return {ad::slice_cols(raw, 0, config_.d_z), ad::slice_cols(raw, config_.d_z, config_.d_z)};
}

// ---- blocks -------------------------------------------------------------------------

ad::Var CvaeModel::embed(ad::Tape& tape, const SequenceInput& input) const {
  check_aligned(input);
  const auto n = static_cast<int>(input.size());
  require(n <= config_.max_positions(), ErrorKind::invalid_argument,
          "embed: sequence of " + std::to_string(n) + " exceeds " +
              std::to_string(config_.max_positions()) + " positions");
  std::vector<int> positions(input.size());
  for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
  ad::Var out = ad::gather_rows(params_.on(tape, word_emb_), input.tokens);
  out = ad::add(out, ad::gather_rows(params_.on(tape, pos_emb_), positions));
  out = ad::add(out, ad::gather_rows(params_.on(tape, turn_emb_), input.turns));
  out = ad::add(out, ad::gather_rows(params_.on(tape, role_emb_), input.roles));
  return out;
}

ad::Var CvaeModel::encode(ad::Tape& tape, ad::Var embedded, std::span<const std::uint8_t> valid,
                          const DropoutContext* dropout,
                          std::vector<std::vector<ad::Matrix>>* attention) const {
  require(static_cast<std::size_t>(embedded.rows()) == valid.size(), ErrorKind::invalid_argument,
          "encode: mask length differs from input length");
  const ad::Matrix mask = key_padding_mask(valid.size(), valid);
  ad::Var x = maybe_dropout(embedded, dropout);
  if (attention != nullptr) attention->clear();
  for (const EncoderBlock& b : encoder_) {
    std::vector<ad::Matrix> probs;
    const ad::Var a = attend(tape, b.self_attention, x, x, &mask, attention ? &probs : nullptr);
    if (attention != nullptr) attention->push_back(std::move(probs));
    x = apply(tape, b.self_norm, ad::add(x, maybe_dropout(a, dropout)));
    x = apply(tape, b.ffn_norm, ad::add(x, maybe_dropout(feed_forward(tape, b.ffn, x, dropout), dropout)));
  }
  check_finite(x, "encoder output");
  return x;
}

ad::Var CvaeModel::pool(ad::Tape& tape, ad::Var encoded, std::span<const std::uint8_t> valid,
                        PoolSide side, PoolTrace* trace) const {
  require(static_cast<std::size_t>(encoded.rows()) == valid.size(), ErrorKind::invalid_argument,
          "pool: mask length differs from input length");
  require(std::any_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }),
          ErrorKind::precondition, "pool: every position is masked");
  const PoolingLayer& p = pooling(side);
  const ad::Matrix mask = key_padding_mask(static_cast<std::size_t>(config_.k_queries), valid);
  std::vector<ad::Matrix> weights;
  const ad::Var attended =
      ad::multi_head_attention(params_.on(tape, p.queries), encoded, encoded, 1, &mask, &weights);
  if (trace != nullptr) {
    trace->attended = attended;
    trace->weights = std::move(weights);
  }
  const ad::Var flat = ad::reshape(attended, 1, static_cast<Eigen::Index>(config_.k_queries) * config_.d_model);
  return apply(tape, p.project, flat);
}

GaussianParams CvaeModel::prior(ad::Tape& tape, ad::Var pooled_context) const {
  const ad::Var h = ad::tanh(apply(tape, prior_mlp_.hidden, pooled_context));
  return split_gaussian(apply(tape, prior_mlp_.out, h));
}

GaussianParams CvaeModel::posterior(ad::Tape& tape, ad::Var pooled_joint) const {
  return split_gaussian(apply(tape, posterior_, pooled_joint));
}

ad::Var CvaeModel::reparameterize(ad::Tape& tape, const GaussianParams& params,
                                  const ad::Matrix& noise) {
  require(noise.rows() == params.mean.rows() && noise.cols() == params.mean.cols(),
          ErrorKind::invalid_argument, "reparameterize: noise shape differs from the latent");
  const ad::Var sd = ad::exp(ad::scale(params.log_variance, 0.5));
  return ad::add(params.mean, ad::hadamard(sd, tape.constant(noise)));
}

ad::Var CvaeModel::bridge(ad::Tape& tape, ad::Var z) const {
  require(z.rows() == 1 && z.cols() == config_.d_z, ErrorKind::invalid_argument,
          "bridge: latent must be 1 x d_z");
  const ad::Var flat = ad::linear(z, params_.on(tape, bridge_), ad::Var{});
  return ad::reshape(flat, config_.n_latent_vectors, config_.d_model);
}

ad::Var CvaeModel::decoder_block(ad::Tape& tape, int layer, ad::Var input, ad::Var memory,
                                 std::span<const std::uint8_t> memory_valid, ad::Var latent,
                                 const DropoutContext* dropout, DecoderTrace* trace) const {
  const DecoderBlock& b = decoder_.at(static_cast<std::size_t>(layer));
  require(input.cols() == config_.d_model && memory.cols() == config_.d_model &&
              latent.cols() == config_.d_model,
          ErrorKind::invalid_argument, "decoder block: width mismatch");
  require(static_cast<std::size_t>(memory.rows()) == memory_valid.size(),
          ErrorKind::invalid_argument, "decoder block: memory mask length mismatch");
  const auto n = static_cast<std::size_t>(input.rows());
  const ad::Matrix self_mask = causal_mask(n);
  const ad::Matrix memory_mask = key_padding_mask(n, memory_valid);

  ad::Var a = attend(tape, b.self_attention, input, input, &self_mask);
  a = apply(tape, b.self_norm, ad::add(input, maybe_dropout(a, dropout)));
  ad::Var c = attend(tape, b.memory_attention, a, memory, &memory_mask);
  c = apply(tape, b.context_norm, ad::add(a, maybe_dropout(c, dropout)));
  const ad::Var lat = attend(tape, b.memory_attention, c, latent, nullptr);
  const ad::Var l = apply(tape, b.latent_norm, ad::add(c, maybe_dropout(lat, dropout)));
  const ad::Var out =
      apply(tape, b.ffn_norm, ad::add(l, maybe_dropout(feed_forward(tape, b.ffn, l, dropout), dropout)));
  if (trace != nullptr) *trace = {a, c, lat, l};
  return out;
}

ad::Var CvaeModel::decode(ad::Tape& tape, const SequenceInput& input, ad::Var memory,
                          std::span<const std::uint8_t> memory_valid, ad::Var latent,
                          const DropoutContext* dropout) const {
  ad::Var x = maybe_dropout(embed(tape, input), dropout);
  for (int l = 0; l < decoder_layers(); ++l) {
    x = decoder_block(tape, l, x, memory, memory_valid, latent, dropout);
  }
  const ad::Var logits = apply(tape, output_, x);
  check_finite(logits, "decoder logits");
  return logits;
}

ad::Var CvaeModel::bow_logits(ad::Tape& tape, ad::Var pooled_context, ad::Var z) const {
  const std::vector<ad::Var> parts = {pooled_context, z};
  const ad::Var h = ad::tanh(apply(tape, bow_mlp_.hidden, ad::concat_cols(parts)));
  return apply(tape, bow_mlp_.out, h);
}

// ---- composites -----------------------------------------------------------------------

ContextEncoding CvaeModel::encode_context(ad::Tape& tape, const TrainingExample& example,
                                          const DropoutContext* dropout) const {
  ContextEncoding ctx;
  ctx.input = context_input(example, config_);
  ctx.encoded = encode(tape, embed(tape, ctx.input), ctx.input.valid, dropout);
  ctx.pooled = pool(tape, ctx.encoded, ctx.input.valid, PoolSide::prior);
  ctx.prior = prior(tape, ctx.pooled);
  return ctx;
}

GaussianParams CvaeModel::recognize(ad::Tape& tape, const TrainingExample& example,
                                    std::span<const int> response,
                                    const DropoutContext* dropout) const {
  const SequenceInput in = joint_input(example, response, config_);
  const ad::Var e = encode(tape, embed(tape, in), in.valid, dropout);
  return posterior(tape, pool(tape, e, in.valid, PoolSide::recognition));
}

ad::Var CvaeModel::forward_teacher_forced(ad::Tape& tape, const TrainingExample& example,
                                          const ContextEncoding& context, ad::Var z,
                                          const DropoutContext* dropout) const {
  const SequenceInput in = decoder_input(example, example.response_ids);
  return decode(tape, in, context.encoded, context.input.valid, bridge(tape, z), dropout);
}

ExampleTerms CvaeModel::forward_example(ad::Tape& tape, const TrainingExample& example,
                                        const std::vector<int>* negative, const ad::Matrix& noise,
                                        const DropoutContext* dropout) const {
  ExampleTerms t;
  const ContextEncoding ctx = encode_context(tape, example, dropout);
  t.prior = ctx.prior;
  t.posterior = recognize(tape, example, example.response_ids, dropout);
  const ad::Var z = reparameterize(tape, t.posterior, noise);

  const ad::Var logits = forward_teacher_forced(tape, example, ctx, z, dropout);
  const std::vector<int> targets = decoder_targets(example.response_ids);
  t.nll = ad::cross_entropy(logits, targets);
  t.target_tokens = static_cast<int>(targets.size());

  t.bow = ad::bag_of_words_nll(bow_logits(tape, ctx.pooled, z), bow_targets(example.response_ids));
  t.kl_plus = ad::gaussian_kl(t.posterior.mean, t.posterior.log_variance, t.prior.mean,
                              t.prior.log_variance);
  if (negative != nullptr) {
    const GaussianParams neg = recognize(tape, example, *negative, dropout);
    t.kl_minus = ad::gaussian_kl(neg.mean, neg.log_variance, t.prior.mean, t.prior.log_variance);
  }
  return t;
}

}  // namespace cvaet
