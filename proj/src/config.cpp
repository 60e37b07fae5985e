#include "cvaet/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "cvaet/error.hpp"

namespace cvaet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  fail(ErrorKind::config, "invalid value '" + value + "' for key '" + key + "'");
}

template <class Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value);
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double d = std::stod(value, &used);
    if (used != value.size()) bad_value(key, value);
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, value);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value);
}

std::string format_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

struct Entry {
  std::string key;
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
  // Emits the value with its natural JSON type.
  std::function<nlohmann::json(const Settings&)> json;
};

template <class Section, class T>
Entry make_entry(std::string key, Section Settings::*section, T Section::*field) {
  Entry e;
  e.key = key;
  e.set = [key, section, field](Settings& s, const std::string& v) {
    T& slot = (s.*section).*field;
    if constexpr (std::is_same_v<T, bool>) {
      slot = parse_bool(key, v);
    } else if constexpr (std::is_integral_v<T>) {
      slot = parse_int<T>(key, v);
    } else if constexpr (std::is_floating_point_v<T>) {
      slot = parse_double(key, v);
    } else {
      slot = v;
    }
  };
  e.get = [section, field](const Settings& s) -> std::string {
    const T& slot = (s.*section).*field;
    if constexpr (std::is_same_v<T, bool>) {
      return slot ? "true" : "false";
    } else if constexpr (std::is_integral_v<T>) {
      return std::to_string(slot);
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_double(slot);
    } else {
      return slot;
    }
  };
  e.json = [section, field](const Settings& s) { return nlohmann::json((s.*section).*field); };
  return e;
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> r;
    using S = Settings;
    r.push_back(make_entry("d_model", &S::model, &ModelConfig::d_model));
    r.push_back(make_entry("n_enc_layers", &S::model, &ModelConfig::n_enc_layers));
    r.push_back(make_entry("n_dec_layers", &S::model, &ModelConfig::n_dec_layers));
    r.push_back(make_entry("n_heads", &S::model, &ModelConfig::n_heads));
    r.push_back(make_entry("d_ffn", &S::model, &ModelConfig::d_ffn));
    r.push_back(make_entry("d_z", &S::model, &ModelConfig::d_z));
    r.push_back(make_entry("k_queries", &S::model, &ModelConfig::k_queries));
    r.push_back(make_entry("n_latent_vectors", &S::model, &ModelConfig::n_latent_vectors));
    r.push_back(make_entry("max_turn_id", &S::model, &ModelConfig::max_turn_id));
    r.push_back(make_entry("dropout", &S::model, &ModelConfig::dropout));

    r.push_back(make_entry("max_context_len", &S::corpus, &CorpusConfig::max_context_len));
    r.push_back(make_entry("max_response_len", &S::corpus, &CorpusConfig::max_response_len));
    r.push_back(make_entry("min_freq", &S::corpus, &CorpusConfig::min_freq));

    r.push_back(make_entry("max_ngram", &S::keywords, &KeywordConfig::max_ngram));
    r.push_back(make_entry("k_top", &S::keywords, &KeywordConfig::k_top));
    r.push_back(make_entry("keyword_window", &S::keywords, &KeywordConfig::window));

    r.push_back(make_entry("infill_backend", &S::negatives, &NegativesConfig::backend));
    r.push_back(make_entry("infill_retries", &S::negatives, &NegativesConfig::retries));
    r.push_back(make_entry("infill_address", &S::negatives, &NegativesConfig::infill_address));
    r.push_back(make_entry("infill_timeout_ms", &S::negatives, &NegativesConfig::infill_timeout_ms));
    r.push_back(make_entry("infill_max_in_flight", &S::negatives, &NegativesConfig::infill_max_in_flight));
    r.push_back(make_entry("infill_attempts", &S::negatives, &NegativesConfig::infill_attempts));

    r.push_back(make_entry("batch_size", &S::train, &TrainConfig::batch_size));
    r.push_back(make_entry("max_steps", &S::train, &TrainConfig::max_steps));
    r.push_back(make_entry("learning_rate", &S::train, &TrainConfig::learning_rate));
    r.push_back(make_entry("optimizer", &S::train, &TrainConfig::optimizer));
    r.push_back(make_entry("beta1", &S::train, &TrainConfig::beta1));
    r.push_back(make_entry("beta2", &S::train, &TrainConfig::beta2));
    r.push_back(make_entry("optimizer_eps", &S::train, &TrainConfig::optimizer_eps));
    r.push_back(make_entry("anneal_steps", &S::train, &TrainConfig::anneal_steps));
    r.push_back(make_entry("epsilon", &S::train, &TrainConfig::epsilon));
    r.push_back(make_entry("seed", &S::train, &TrainConfig::seed));
    r.push_back(make_entry("valid_interval", &S::train, &TrainConfig::valid_interval));
    r.push_back(make_entry("grad_clip", &S::train, &TrainConfig::grad_clip));
    r.push_back(make_entry("ld_reduction", &S::train, &TrainConfig::ld_reduction));
    r.push_back(make_entry("use_ld", &S::train, &TrainConfig::use_ld));
    r.push_back(make_entry("sampled_valid_z", &S::train, &TrainConfig::sampled_valid_z));
    r.push_back(make_entry("checkpoint_interval", &S::train, &TrainConfig::checkpoint_interval));

    r.push_back(make_entry("beam_size", &S::decode, &DecodeConfig::beam_size));
    r.push_back(make_entry("block_ngram", &S::decode, &DecodeConfig::block_ngram));
    r.push_back(make_entry("decode_max_len", &S::decode, &DecodeConfig::max_len));
    r.push_back(make_entry("num_samples", &S::decode, &DecodeConfig::num_samples));
    r.push_back(make_entry("z_mode", &S::decode, &DecodeConfig::z_mode));
    r.push_back(make_entry("decode_seed", &S::decode, &DecodeConfig::seed));
    return r;
  }();
  return entries;
}

const Entry& find_entry(const std::string& key) {
  for (const Entry& e : registry()) {
    if (e.key == key) return e;
  }
  fail(ErrorKind::config, "unknown configuration key '" + key + "'");
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    require(v > 0, ErrorKind::config, std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(n_heads, "n_heads");
  positive(d_ffn, "d_ffn");
  positive(d_z, "d_z");
  positive(k_queries, "k_queries");
  positive(n_latent_vectors, "n_latent_vectors");
  positive(max_context_len, "max_context_len");
  positive(max_response_len, "max_response_len");
  positive(max_turn_id, "max_turn_id");
  require(d_model % n_heads == 0, ErrorKind::config, "d_model must be divisible by n_heads");
  require(dropout >= 0.0 && dropout < 1.0, ErrorKind::config, "dropout must lie in [0, 1)");
  require(max_response_len >= 3, ErrorKind::config,
          "max_response_len must leave room for both sentinels and one token");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size},     {"d_model", d_model},
          {"n_enc_layers", n_enc_layers}, {"n_dec_layers", n_dec_layers},
          {"n_heads", n_heads},           {"d_ffn", d_ffn},
          {"d_z", d_z},                   {"k_queries", k_queries},
          {"n_latent_vectors", n_latent_vectors},
          {"max_context_len", max_context_len},
          {"max_response_len", max_response_len},
          {"max_turn_id", max_turn_id},   {"dropout", dropout}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_enc_layers = j.at("n_enc_layers").get<int>();
    c.n_dec_layers = j.at("n_dec_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ffn = j.at("d_ffn").get<int>();
    c.d_z = j.at("d_z").get<int>();
    c.k_queries = j.at("k_queries").get<int>();
    c.n_latent_vectors = j.at("n_latent_vectors").get<int>();
    c.max_context_len = j.at("max_context_len").get<int>();
    c.max_response_len = j.at("max_response_len").get<int>();
    c.max_turn_id = j.at("max_turn_id").get<int>();
    c.dropout = j.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

void Settings::set(const std::string& key, const std::string& value) {
  find_entry(key).set(*this, value);
}

std::string Settings::get(const std::string& key) const { return find_entry(key).get(*this); }

std::vector<std::string> Settings::keys() {
  std::vector<std::string> out;
  for (const Entry& e : registry()) out.push_back(e.key);
  return out;
}

void Settings::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path.string());
}

void Settings::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // '#' inside a quoted value is kept.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::config, origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    try {
      set(key, value);
    } catch (const Error& e) {
      fail(ErrorKind::config, origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void Settings::validate() const {
  model_config(1).validate();
  require(corpus.min_freq >= 1, ErrorKind::config, "min_freq must be at least 1");
  require(keywords.max_ngram >= 1 && keywords.k_top >= 0 && keywords.window >= 1,
          ErrorKind::config, "keyword settings must be positive");
  require(negatives.backend == "statistical" || negatives.backend == "external",
          ErrorKind::config, "infill_backend must be 'statistical' or 'external'");
  require(negatives.retries >= 0, ErrorKind::config, "infill_retries must be nonnegative");
  require(negatives.infill_timeout_ms > 0 && negatives.infill_max_in_flight > 0 &&
              negatives.infill_attempts > 0,
          ErrorKind::config, "infill transport settings must be positive");
  require(train.batch_size > 0, ErrorKind::config, "batch_size must be positive");
  require(train.max_steps >= 0, ErrorKind::config, "max_steps must be nonnegative");
  require(train.learning_rate > 0.0, ErrorKind::config, "learning_rate must be positive");
  require(train.optimizer == "adamax" || train.optimizer == "adam", ErrorKind::config,
          "optimizer must be 'adamax' or 'adam'");
  require(train.anneal_steps > 0, ErrorKind::config, "anneal_steps must be positive");
  require(train.epsilon < 0.0, ErrorKind::config, "epsilon must be negative");
  require(train.valid_interval > 0 && train.checkpoint_interval > 0, ErrorKind::config,
          "intervals must be positive");
  require(train.grad_clip >= 0.0, ErrorKind::config, "grad_clip must be nonnegative");
  require(train.ld_reduction == "per_example" || train.ld_reduction == "batch",
          ErrorKind::config, "ld_reduction must be 'per_example' or 'batch'");
  require(decode.beam_size > 0 && decode.max_len >= 2 && decode.num_samples > 0,
          ErrorKind::config, "decode settings must be positive");
  require(decode.block_ngram == 0 || decode.block_ngram >= 2, ErrorKind::config,
          "block_ngram must be 0 (off) or at least 2");
  require(decode.z_mode == "sample" || decode.z_mode == "mean", ErrorKind::config,
          "z_mode must be 'sample' or 'mean'");
}

ModelConfig Settings::model_config(int vocab_size) const {
  ModelConfig m = model;
  m.vocab_size = vocab_size;
  m.max_context_len = corpus.max_context_len;
  m.max_response_len = corpus.max_response_len;
  return m;
}

nlohmann::json Settings::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const Entry& e : registry()) j[e.key] = e.json(*this);
  return j;
}

void Settings::from_json(const nlohmann::json& j) {
  for (const auto& [key, value] : j.items()) {
    set(key, value.is_string() ? value.get<std::string>() : value.dump());
  }
}

std::string Settings::to_text() const {
  std::string out;
  for (const Entry& e : registry()) {
    const std::string v = e.get(*this);
    const bool is_string = e.json(*this).is_string();
    out += e.key + " = " + (is_string ? "\"" + v + "\"" : v) + "\n";
  }
  return out;
}

}  // namespace cvaet
