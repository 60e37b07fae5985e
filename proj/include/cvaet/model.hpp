#pragma once

// The conditional VAE: shared embeddings and encoder, query-attention pooling,
// prior and recognition heads, a latent bridge and a Transformer decoder
// whose blocks also attend over the bridge output.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvaet/autodiff.hpp"
#include "cvaet/config.hpp"
#include "cvaet/corpus.hpp"
#include "cvaet/random.hpp"

namespace cvaet {

using ParamId = int;

// Owns every learnable tensor. Ids are stable; the container never grows
// after model construction, so tape leaves can key on addresses.
class ParameterSet {
 public:
  ParamId add(std::string name, ad::Matrix init);
  ad::Parameter& operator[](ParamId id) { return params_.at(static_cast<std::size_t>(id)); }
  const ad::Parameter& operator[](ParamId id) const { return params_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return params_.size(); }
  std::optional<ParamId> find(const std::string& name) const;
  ad::Var on(ad::Tape& tape, ParamId id) const;
  std::size_t scalar_count() const;

  std::vector<ad::Parameter>& all() { return params_; }
  const std::vector<ad::Parameter>& all() const { return params_; }

 private:
  std::vector<ad::Parameter> params_;
};

struct LinearLayer {
  ParamId weight = -1;
  ParamId bias = -1;  // -1: no bias
};

struct LayerNormLayer {
  ParamId gain = -1;
  ParamId shift = -1;
};

struct AttentionLayer {
  LinearLayer query, key, value, output;
};

struct FeedForwardLayer {
  LinearLayer in, out;
};

struct EncoderBlock {
  AttentionLayer self_attention;
  LayerNormLayer self_norm;
  FeedForwardLayer ffn;
  LayerNormLayer ffn_norm;
};

struct DecoderBlock {
  AttentionLayer self_attention;
  LayerNormLayer self_norm;
  // Used twice: over the encoded context, then over the latent bridge.
  AttentionLayer memory_attention;
  LayerNormLayer context_norm;
  LayerNormLayer latent_norm;
  FeedForwardLayer ffn;
  LayerNormLayer ffn_norm;
};

struct PoolingLayer {
  ParamId queries = -1;  // k x d_model
  LinearLayer project;   // k*d_model -> d_model
};

struct MlpLayer {
  LinearLayer hidden, out;
};

// One encoder or decoder input. Positions are implicit (0..n-1). `valid`
// marks real tokens; padding (valid == 0) is never attended to.
struct SequenceInput {
  std::vector<int> tokens;
  std::vector<int> turns;
  std::vector<int> roles;
  std::vector<std::uint8_t> valid;

  std::size_t size() const { return tokens.size(); }
};

struct GaussianParams {
  ad::Var mean;          // 1 x d_z
  ad::Var log_variance;  // 1 x d_z
};

// Dropout switch: rate comes from the config, randomness from `rng`.
struct DropoutContext {
  double rate = 0.0;
  Rng* rng = nullptr;
};

struct PoolTrace {
  ad::Var attended;  // k x d_model, before the linear map
  std::vector<ad::Matrix> weights;
};

struct DecoderTrace {
  ad::Var self_out;         // after self-attention sublayer
  ad::Var context_out;      // after context attention sublayer
  ad::Var latent_attention; // latent attention output, before residual
  ad::Var latent_out;       // after latent attention sublayer
};

enum class PoolSide { prior, recognition };

struct ContextEncoding {
  SequenceInput input;
  ad::Var encoded;  // E(c)
  ad::Var pooled;   // e(c), prior-side pooling
  GaussianParams prior;
};

// Per-example scalar loss nodes on one tape.
struct ExampleTerms {
  ad::Var nll;
  ad::Var bow;
  ad::Var kl_plus;
  ad::Var kl_minus;  // invalid when no negative was given
  GaussianParams prior;
  GaussianParams posterior;
  int target_tokens = 0;
};

// Input builders. Turn ids above max_turn_id are clamped. An empty context is
// replaced by a lone delimiter so attention always has a key.
SequenceInput context_input(const TrainingExample& example, const ModelConfig& config);
// Context followed by `response` (framed), positions continuing.
SequenceInput joint_input(const TrainingExample& example, std::span<const int> response,
                          const ModelConfig& config);
// __start__ w1 .. wn  (the framed response without its final __end__).
SequenceInput decoder_input(const TrainingExample& example, std::span<const int> response);
// w1 .. wn __end__
std::vector<int> decoder_targets(std::span<const int> response);
// Content tokens of a framed response, sentinels dropped.
std::vector<int> bow_targets(std::span<const int> response);

// Additive attention masks.
ad::Matrix key_padding_mask(std::size_t queries, std::span<const std::uint8_t> valid);
ad::Matrix causal_mask(std::size_t length);

class CvaeModel {
 public:
  CvaeModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  // ---- building blocks ----
  ad::Var embed(ad::Tape& tape, const SequenceInput& input) const;
  ad::Var encode(ad::Tape& tape, ad::Var embedded, std::span<const std::uint8_t> valid,
                 const DropoutContext* dropout = nullptr,
                 std::vector<std::vector<ad::Matrix>>* attention = nullptr) const;
  ad::Var pool(ad::Tape& tape, ad::Var encoded, std::span<const std::uint8_t> valid,
               PoolSide side, PoolTrace* trace = nullptr) const;
  GaussianParams prior(ad::Tape& tape, ad::Var pooled_context) const;
  GaussianParams posterior(ad::Tape& tape, ad::Var pooled_joint) const;
  static ad::Var reparameterize(ad::Tape& tape, const GaussianParams& params,
                                const ad::Matrix& noise);
  ad::Var bridge(ad::Tape& tape, ad::Var z) const;
  ad::Var decoder_block(ad::Tape& tape, int layer, ad::Var input, ad::Var memory,
                        std::span<const std::uint8_t> memory_valid, ad::Var latent,
                        const DropoutContext* dropout = nullptr,
                        DecoderTrace* trace = nullptr) const;
  // Vocabulary logits, one row per decoder position.
  ad::Var decode(ad::Tape& tape, const SequenceInput& input, ad::Var memory,
                 std::span<const std::uint8_t> memory_valid, ad::Var latent,
                 const DropoutContext* dropout = nullptr) const;
  // 1 x |V| logits of the bag-of-words head.
  ad::Var bow_logits(ad::Tape& tape, ad::Var pooled_context, ad::Var z) const;

  // ---- composites ----
  ContextEncoding encode_context(ad::Tape& tape, const TrainingExample& example,
                                 const DropoutContext* dropout = nullptr) const;
  GaussianParams recognize(ad::Tape& tape, const TrainingExample& example,
                           std::span<const int> response,
                           const DropoutContext* dropout = nullptr) const;
  ad::Var forward_teacher_forced(ad::Tape& tape, const TrainingExample& example,
                                 const ContextEncoding& context, ad::Var z,
                                 const DropoutContext* dropout = nullptr) const;
  // Every per-example loss term. z is drawn from the posterior with `noise`.
  ExampleTerms forward_example(ad::Tape& tape, const TrainingExample& example,
                               const std::vector<int>* negative, const ad::Matrix& noise,
                               const DropoutContext* dropout = nullptr) const;

  // ---- structure ----
  int encoder_layers() const { return static_cast<int>(encoder_.size()); }
  int decoder_layers() const { return static_cast<int>(decoder_.size()); }
  const EncoderBlock& encoder_block(int i) const { return encoder_.at(static_cast<std::size_t>(i)); }
  const DecoderBlock& decoder_block_params(int i) const { return decoder_.at(static_cast<std::size_t>(i)); }
  ParamId word_embedding() const { return word_emb_; }
  ParamId position_embedding() const { return pos_emb_; }
  ParamId turn_embedding() const { return turn_emb_; }
  ParamId role_embedding() const { return role_emb_; }
  const PoolingLayer& pooling(PoolSide side) const {
    return side == PoolSide::prior ? prior_pool_ : recog_pool_;
  }
  const MlpLayer& prior_mlp() const { return prior_mlp_; }
  const LinearLayer& posterior_head() const { return posterior_; }
  ParamId bridge_weight() const { return bridge_; }
  const MlpLayer& bow_mlp() const { return bow_mlp_; }
  const LinearLayer& output_projection() const { return output_; }

 private:
  LinearLayer make_linear(const std::string& name, int in, int out, bool bias, Rng& rng);
  LayerNormLayer make_norm(const std::string& name, int dim);
  AttentionLayer make_attention(const std::string& name, Rng& rng);
  FeedForwardLayer make_ffn(const std::string& name, Rng& rng);
  PoolingLayer make_pool(const std::string& name, Rng& rng);

  ad::Var apply(ad::Tape& tape, const LinearLayer& layer, ad::Var x) const;
  ad::Var apply(ad::Tape& tape, const LayerNormLayer& layer, ad::Var x) const;
  ad::Var attend(ad::Tape& tape, const AttentionLayer& layer, ad::Var query, ad::Var memory,
                 const ad::Matrix* mask, std::vector<ad::Matrix>* probs = nullptr) const;
  ad::Var feed_forward(ad::Tape& tape, const FeedForwardLayer& layer, ad::Var x,
                       const DropoutContext* dropout) const;
  ad::Var maybe_dropout(ad::Var x, const DropoutContext* dropout) const;
  GaussianParams split_gaussian(ad::Var raw) const;

  ModelConfig config_;
  ParameterSet params_;
  ParamId word_emb_ = -1, pos_emb_ = -1, turn_emb_ = -1, role_emb_ = -1;
  std::vector<EncoderBlock> encoder_;
  std::vector<DecoderBlock> decoder_;
  PoolingLayer prior_pool_, recog_pool_;
  MlpLayer prior_mlp_;
  LinearLayer posterior_;
  ParamId bridge_ = -1;
  MlpLayer bow_mlp_;
  LinearLayer output_;
};

}  // namespace cvaet
