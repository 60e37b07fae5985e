#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cvaet {

// Network shape. Defaults are the full-size configuration.
struct ModelConfig {
  int vocab_size = 0;
  int d_model = 512;
  int n_enc_layers = 6;
  int n_dec_layers = 6;
  int n_heads = 8;
  int d_ffn = 3072;
  int d_z = 128;
  int k_queries = 4;
  int n_latent_vectors = 6;
  int max_context_len = 360;
  int max_response_len = 72;
  int max_turn_id = 32;
  double dropout = 0.1;

  // Throws ErrorKind::config on any violated invariant.
  void validate() const;
  // Longest encoder input: context followed by a framed response.
  int max_positions() const { return max_context_len + max_response_len; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct CorpusConfig {
  int max_context_len = 360;
  int max_response_len = 72;
  int min_freq = 2;
};

struct KeywordConfig {
  int max_ngram = 3;
  int k_top = 3;
  int window = 1;
};

struct NegativesConfig {
  std::string backend = "statistical";  // statistical | external
  int retries = 5;
  std::string infill_address;           // host:port for the external backend
  int infill_timeout_ms = 5000;
  int infill_max_in_flight = 4;
  int infill_attempts = 2;              // transport-level attempts per request
};

struct TrainConfig {
  int batch_size = 32;
  std::int64_t max_steps = 100000;
  double learning_rate = 1e-4;
  std::string optimizer = "adamax";  // adamax | adam
  double beta1 = 0.9;
  double beta2 = 0.999;
  double optimizer_eps = 1e-8;
  std::int64_t anneal_steps = 20000;
  double epsilon = -2.0;
  std::uint64_t seed = 1;
  std::int64_t valid_interval = 1000;
  double grad_clip = 1.0;
  std::string ld_reduction = "per_example";  // per_example | batch
  bool use_ld = true;
  bool sampled_valid_z = false;
  std::int64_t checkpoint_interval = 1000;
};

struct DecodeConfig {
  int beam_size = 10;
  int block_ngram = 3;
  int max_len = 72;
  int num_samples = 3;
  std::string z_mode = "sample";  // sample | mean
  std::uint64_t seed = 1;
};

// Every tunable of the pipeline, addressable by a flat key. Precedence is
// applied by the caller: defaults, then load_file(), then set() for flags.
class Settings {
 public:
  ModelConfig model;
  CorpusConfig corpus;
  KeywordConfig keywords;
  NegativesConfig negatives;
  TrainConfig train;
  DecodeConfig decode;

  // Sets one key from its textual form. Unknown keys and unparsable values
  // raise ErrorKind::config.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  // `key = value` lines; `#` starts a comment; `[section]` lines are ignored;
  // string values may be double-quoted.
  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin = "<text>");

  void validate() const;

  // Model shape for a given vocabulary, with lengths taken from the corpus
  // section.
  ModelConfig model_config(int vocab_size) const;

  nlohmann::json to_json() const;
  void from_json(const nlohmann::json& j);
  std::string to_text() const;
};

}  // namespace cvaet
