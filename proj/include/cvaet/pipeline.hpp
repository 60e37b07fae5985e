#pragma once

// File-level pipeline stages behind the command-line tool and the C API:
// prepare -> keywords -> negatives -> train -> generate -> eval -> plot.
// Every stage takes the resolved Settings, writes them into the header of
// what it produces, and returns a JSON report.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cvaet/config.hpp"
#include "cvaet/corpus.hpp"
#include "cvaet/trainer.hpp"

namespace cvaet {

// Raw episodes -> processed examples (out) plus a vocabulary file. With
// reuse_vocab the vocabulary is read from vocab_path instead of built, which
// is how validation and test splits share the training vocabulary. The
// vocabulary is also embedded in the processed-file header.
nlohmann::json prepare_data(const Settings& settings, const std::filesystem::path& in,
                            const std::filesystem::path& out, const std::filesystem::path& vocab_path,
                            bool reuse_vocab = false);

// Keywords of every response, one JSONL line each after a header line.
// Accepts raw episodes or a processed-example file.
nlohmann::json keywords_file(const Settings& settings, const std::filesystem::path& in,
                             const std::filesystem::path& out);

// Processed examples -> the same examples with generated negatives.
nlohmann::json negatives_file(const Settings& settings, const std::filesystem::path& in,
                              const std::filesystem::path& out);

// Trains on a processed file (negatives optional). valid may be empty.
nlohmann::json train_files(const Settings& settings, const std::filesystem::path& data,
                           const std::filesystem::path& valid, const std::filesystem::path& out_dir,
                           const TrainingCallbacks& callbacks = {});

// A trained model ready to answer contexts. Model, vocabulary and length
// limits come from the checkpoint; decoding options from the caller.
class Responder {
 public:
  explicit Responder(const std::filesystem::path& checkpoint);

  // Responses to the dialogue `context` (oldest utterance first). Sampled z
  // gives config.num_samples responses; z_mode "mean" gives one.
  std::vector<std::string> respond(const std::vector<std::string>& context, const DecodeConfig& config) const;

  const Checkpoint& checkpoint() const { return checkpoint_; }

 private:
  Checkpoint checkpoint_;
};

// Reads `{"context": [utterances] | "utterance"}` lines and writes
// `{"context": .., "responses": [..]}` lines after a header line. The decode
// seed of line i is derived from (decode_seed, i).
nlohmann::json generate_file(const Settings& settings, const std::filesystem::path& checkpoint,
                             const std::filesystem::path& in, const std::filesystem::path& out);

// {"ppl", "bleu":[1..4], "distinct":[1,2], ...} on a test set given as raw
// episodes or as a processed file sharing the checkpoint's vocabulary.
// Generation uses z = prior mean.
nlohmann::json evaluate(const Settings& settings, const std::filesystem::path& checkpoint,
                        const std::filesystem::path& test);

// KL+ / KL- curves from a steps.jsonl log as an SVG image. Validation
// records are drawn when present, training records otherwise.
nlohmann::json plot_steps(const Settings& settings, const std::filesystem::path& steps,
                          const std::filesystem::path& out_svg);

// True when the file starts with a processed-example header line.
bool is_example_file(const std::filesystem::path& path);

}  // namespace cvaet
