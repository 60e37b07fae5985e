// Command-line driver over the C API.
//
//   cvaet [--config FILE] [--set KEY=VALUE]... [--KEY VALUE]... <command> [options]
//
// Settings precedence: command-line flags > config file > built-in defaults.
// The resolved settings are logged to stderr on every run; reports go to
// stdout as JSON.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cvaet/cvaet.h"

namespace {

struct Settings {
  cvaet_settings* handle = nullptr;
  Settings() { cvaet_settings_create(&handle); }
  ~Settings() { cvaet_settings_destroy(handle); }
  Settings(const Settings&) = delete;
  Settings& operator=(const Settings&) = delete;
};

// Takes ownership of a library-allocated string.
std::string take(char* s) {
  std::string out = s != nullptr ? s : "";
  cvaet_string_free(s);
  return out;
}

int report_failure(cvaet_status status) {
  std::fprintf(stderr, "cvaet: %s: %s\n", cvaet_status_name(status), cvaet_last_error());
  return static_cast<int>(status);
}

// Settings keys known to the library, one per line of the text form.
std::vector<std::string> settings_keys() {
  Settings s;
  char* text = nullptr;
  std::vector<std::string> keys;
  if (cvaet_settings_to_text(s.handle, &text) != CVAET_OK) return keys;
  const std::string all = take(text);
  std::size_t pos = 0;
  while (pos < all.size()) {
    const std::size_t nl = all.find('\n', pos);
    const std::string line = all.substr(pos, nl - pos);
    const std::size_t eq = line.find(" = ");
    if (eq != std::string::npos) keys.push_back(line.substr(0, eq));
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  return keys;
}

struct ProgressState {
  long every = 100;
};

void on_progress(const char* line, void* user) {
  const auto* state = static_cast<const ProgressState*>(user);
  const std::string s = line;
  const bool is_valid = s.find("\"split\":\"valid\"") != std::string::npos;
  long step = 0;
  const std::size_t at = s.find("\"step\":");
  if (at != std::string::npos) step = std::strtol(s.c_str() + at + 7, nullptr, 10);
  if (is_valid || (state->every > 0 && step % state->every == 0)) std::fprintf(stderr, "%s\n", line);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer conditional VAE for dialogue response generation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(cvaet_version()));

  std::string config_file;
  std::vector<std::string> set_pairs;
  app.add_option("--config", config_file, "key = value settings file")->check(CLI::ExistingFile);
  app.add_option("--set", set_pairs, "override one setting, KEY=VALUE (repeatable)");

  const std::vector<std::string> keys = settings_keys();
  std::map<std::string, std::string> flag_values;
  for (const auto& k : keys) {
    app.add_option("--" + k, flag_values[k], "setting " + k)->group("Settings");
  }

  std::string in, out, vocab, data, valid, ckpt, test, steps;
  bool use_vocab = false;
  ProgressState progress;

  auto* prepare = app.add_subcommand("prepare", "raw episodes -> processed examples and vocabulary");
  prepare->add_option("--in", in, "raw episode JSONL")->required()->check(CLI::ExistingFile);
  prepare->add_option("--out", out, "processed example file")->required();
  prepare->add_option("--vocab", vocab, "vocabulary file (written, or read with --use-vocab)")->required();
  prepare->add_flag("--use-vocab", use_vocab, "reuse an existing vocabulary instead of building one");

  auto* keywords = app.add_subcommand("keywords", "key n-grams of every response as JSONL");
  keywords->add_option("--in", in, "raw episodes or processed examples")->required()->check(CLI::ExistingFile);
  keywords->add_option("--out", out, "keyword JSONL")->required();

  auto* negatives = app.add_subcommand("negatives", "add keyword-infilled negative responses");
  negatives->add_option("--in", in, "processed examples")->required()->check(CLI::ExistingFile);
  negatives->add_option("--out", out, "processed examples with negatives")->required();

  auto* train = app.add_subcommand("train", "train, resuming from OUT/last when present");
  train->add_option("--data", data, "processed training examples")->required()->check(CLI::ExistingFile);
  train->add_option("--valid", valid, "processed validation examples")->check(CLI::ExistingFile);
  train->add_option("--out", out, "checkpoint directory")->required();
  train->add_option("--log-every", progress.every, "print every N-th step record to stderr (0: none)");

  auto* generate = app.add_subcommand("generate", "respond to JSONL contexts");
  generate->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  generate->add_option("--in", in, "JSONL lines {\"context\": [utterances]}")->required()->check(CLI::ExistingFile);
  generate->add_option("--out", out, "JSONL responses")->required();

  auto* eval = app.add_subcommand("eval", "PPL, BLEU-1..4 and DISTINCT-1/2 on a test set");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--test", test, "raw episodes or processed examples")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "also write the report to this file");

  auto* plot = app.add_subcommand("plot", "KL+/KL- curves from a training log as SVG");
  plot->add_option("--steps", steps, "steps.jsonl from a training directory")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", out, "SVG image")->required();

  CLI11_PARSE(app, argc, argv);

  Settings settings;
  cvaet_status st = CVAET_OK;
  if (!config_file.empty() && (st = cvaet_settings_load_file(settings.handle, config_file.c_str())) != CVAET_OK) {
    return report_failure(st);
  }
  for (const auto& pair : set_pairs) {
    const std::size_t eq = pair.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "cvaet: --set expects KEY=VALUE, got '%s'\n", pair.c_str());
      return static_cast<int>(CVAET_ERR_INVALID_ARGUMENT);
    }
    const std::string key = pair.substr(0, eq), value = pair.substr(eq + 1);
    if ((st = cvaet_settings_set(settings.handle, key.c_str(), value.c_str())) != CVAET_OK) return report_failure(st);
  }
  for (const auto& k : keys) {
    if (app.count("--" + k) == 0) continue;
    if ((st = cvaet_settings_set(settings.handle, k.c_str(), flag_values[k].c_str())) != CVAET_OK) {
      return report_failure(st);
    }
  }
  if ((st = cvaet_settings_validate(settings.handle)) != CVAET_OK) return report_failure(st);

  char* text = nullptr;
  if ((st = cvaet_settings_to_text(settings.handle, &text)) != CVAET_OK) return report_failure(st);
  std::fprintf(stderr, "# resolved config\n%s", take(text).c_str());

  char* report = nullptr;
  const cvaet_settings* s = settings.handle;
  if (prepare->parsed()) {
    st = cvaet_prepare(s, in.c_str(), out.c_str(), vocab.c_str(), use_vocab ? 1 : 0, &report);
  } else if (keywords->parsed()) {
    st = cvaet_keywords(s, in.c_str(), out.c_str(), &report);
  } else if (negatives->parsed()) {
    st = cvaet_negatives(s, in.c_str(), out.c_str(), &report);
  } else if (train->parsed()) {
    st = cvaet_train(s, data.c_str(), valid.empty() ? nullptr : valid.c_str(), out.c_str(), on_progress, &progress,
                     &report);
  } else if (generate->parsed()) {
    st = cvaet_generate(s, ckpt.c_str(), in.c_str(), out.c_str(), &report);
  } else if (eval->parsed()) {
    st = cvaet_eval(s, ckpt.c_str(), test.c_str(), &report);
  } else if (plot->parsed()) {
    st = cvaet_plot(s, steps.c_str(), out.c_str(), &report);
  }
  if (st != CVAET_OK) return report_failure(st);

  const std::string result = take(report);
  std::printf("%s\n", result.c_str());
  if (eval->parsed() && !out.empty()) {
    std::FILE* f = std::fopen(out.c_str(), "w");
    if (f == nullptr || std::fprintf(f, "%s\n", result.c_str()) < 0 || std::fclose(f) != 0) {
      std::fprintf(stderr, "cvaet: cannot write %s\n", out.c_str());
      return static_cast<int>(CVAET_ERR_IO);
    }
  }
  return 0;
}
