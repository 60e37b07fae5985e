#include "cvaet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cvaet/decoding.hpp"
#include "cvaet/error.hpp"
#include "cvaet/keywords.hpp"
#include "cvaet/metrics.hpp"
#include "cvaet/negatives.hpp"
#include "cvaet/random.hpp"

namespace cvaet {

namespace {

constexpr std::uint64_t kGenerateStream = 0x6e47;

struct Processed {
  nlohmann::json header;
  Vocab vocab;
  std::vector<TrainingExample> examples;
};

Processed load_processed(const std::filesystem::path& path) {
  ExampleFile file = read_examples(path);
  require(file.header.contains("vocab"), ErrorKind::validation,
          path.string() + ": processed file carries no vocabulary; re-run prepare");
  return {file.header, Vocab::from_json(file.header.at("vocab")), std::move(file.examples)};
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  return out;
}

void finish_output(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  require(static_cast<bool>(out), ErrorKind::io, "failed writing " + path.string());
}

// Examples must fit the length limits the model will be built with.
void check_lengths(const std::vector<TrainingExample>& examples, const CorpusConfig& limits,
                   const std::filesystem::path& origin) {
  const auto ctx = static_cast<std::size_t>(limits.max_context_len);
  const auto resp = static_cast<std::size_t>(limits.max_response_len);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const TrainingExample& ex = examples[i];
    bool fits = ex.context_ids.size() <= ctx && ex.response_ids.size() <= resp;
    for (const auto& n : ex.negatives) fits = fits && n.size() <= resp;
    require(fits, ErrorKind::config,
            origin.string() + ": example " + std::to_string(i) +
                " exceeds max_context_len/max_response_len; prepare and train with the same limits");
  }
}

std::vector<std::string> parse_context(const nlohmann::json& j) {
  const nlohmann::json& c = j.at("context");
  if (c.is_string()) return {c.get<std::string>()};
  return c.get<std::vector<std::string>>();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace

bool is_example_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    return j.is_object() && j.value("format", "") == "cvaet-examples";
  }
  return false;
}

nlohmann::json prepare_data(const Settings& settings, const std::filesystem::path& in,
                            const std::filesystem::path& out, const std::filesystem::path& vocab_path,
                            bool reuse_vocab) {
  const WordTokenizer tok;
  const auto episodes = load_episodes(in);
  Vocab vocab;
  if (reuse_vocab) {
    vocab = Vocab::load(vocab_path);
  } else {
    vocab = build_vocab(episodes, tok, settings.corpus.min_freq);
    auto vout = open_output(vocab_path);
    nlohmann::json j = vocab.to_json();
    j["config"] = settings.to_json();
    vout << j.dump() << '\n';
    finish_output(vout, vocab_path);
  }
  ExampleBuildStats stats;
  const auto examples = episodes_to_examples(episodes, tok, vocab, settings.corpus, &stats);
  nlohmann::json report = {{"episodes", episodes.size()},
                           {"examples", stats.examples},
                           {"skipped_empty_response", stats.skipped_empty_response},
                           {"truncated_context", stats.truncated_context},
                           {"truncated_response", stats.truncated_response},
                           {"vocab_size", vocab.size()}};
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  write_examples(out, examples, settings.to_json(),
                 {{"vocab", vocab.to_json()}, {"tokenizer", tok.name()}, {"source", in.string()}, {"stats", report}});
  return report;
}

nlohmann::json keywords_file(const Settings& settings, const std::filesystem::path& in,
                             const std::filesystem::path& out) {
  std::vector<std::string> responses;
  if (is_example_file(in)) {
    for (auto& ex : read_examples(in).examples) responses.push_back(std::move(ex.response_text));
  } else {
    for (const auto& ep : load_episodes(in)) {
      for (std::size_t i = 1; i < ep.utterances.size(); ++i) responses.push_back(ep.utterances[i].text);
    }
  }
  auto os = open_output(out);
  os << nlohmann::json{{"format", "cvaet-keywords"}, {"config", settings.to_json()}}.dump() << '\n';
  std::size_t total = 0, empty = 0;
  for (const auto& r : responses) {
    nlohmann::json kws = nlohmann::json::array();
    for (const auto& k : extract_keywords(r, settings.keywords)) {
      kws.push_back({{"text", k.text()}, {"span", {k.start, k.end}}, {"score", k.score}});
    }
    total += kws.size();
    if (kws.empty()) ++empty;
    os << nlohmann::json{{"response", r}, {"keywords", kws}}.dump() << '\n';
  }
  finish_output(os, out);
  return {{"responses", responses.size()}, {"keywords", total}, {"without_keywords", empty}};
}

nlohmann::json negatives_file(const Settings& settings, const std::filesystem::path& in,
                              const std::filesystem::path& out) {
  Processed data = load_processed(in);
  const WordTokenizer tok;
  auto backend = make_infill_backend(settings.negatives, data.vocab, data.examples);
  const AugmentStats stats = augment_with_negatives(data.examples, *backend, settings.keywords, settings.negatives,
                                                    tok, data.vocab, settings.train.seed);
  nlohmann::json report = stats.to_json();
  report["backend"] = settings.negatives.backend;
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  write_examples(out, data.examples, settings.to_json(),
                 {{"vocab", data.vocab.to_json()},
                  {"tokenizer", tok.name()},
                  {"source", in.string()},
                  {"prepared_with", data.header.value("config", nlohmann::json())},
                  {"negatives", report}});
  return report;
}

nlohmann::json train_files(const Settings& settings, const std::filesystem::path& data,
                           const std::filesystem::path& valid, const std::filesystem::path& out_dir,
                           const TrainingCallbacks& callbacks) {
  const Processed train = load_processed(data);
  require(!train.examples.empty(), ErrorKind::validation, data.string() + ": no training examples");
  check_lengths(train.examples, settings.corpus, data);
  Processed val;
  if (!valid.empty()) {
    val = load_processed(valid);
    require(val.vocab == train.vocab, ErrorKind::validation,
            valid.string() + ": vocabulary differs from " + data.string() + "; prepare it with --use-vocab");
    check_lengths(val.examples, settings.corpus, valid);
  }
  const TrainingSummary s = run_training(settings, train.vocab, train.examples, val.examples, out_dir, callbacks);
  nlohmann::json report = {{"start_step", s.start_step},
                           {"final_step", s.final_step},
                           {"resumed", s.resumed},
                           {"out", out_dir.string()}};
  if (s.final_step > s.start_step) report["last_loss"] = s.last_loss.to_json();
  if (s.last_validation) report["last_validation"] = s.last_validation->to_json();
  return report;
}

Responder::Responder(const std::filesystem::path& checkpoint) : checkpoint_(load_checkpoint(checkpoint)) {}

std::vector<std::string> Responder::respond(const std::vector<std::string>& context,
                                            const DecodeConfig& config) const {
  const WordTokenizer tok;
  const TrainingExample ex = context_example(context, tok, checkpoint_.vocab, checkpoint_.settings.corpus);
  std::vector<BeamResult> results;
  if (config.z_mode == "mean") {
    results.push_back(generate_with_mean(checkpoint_.model, ex, beam_options(config)));
  } else {
    results = sample_responses(checkpoint_.model, ex, config.num_samples, config);
  }
  std::vector<std::string> out;
  for (const auto& r : results) out.push_back(decode(tok, checkpoint_.vocab, r.best.tokens));
  return out;
}

nlohmann::json generate_file(const Settings& settings, const std::filesystem::path& checkpoint,
                             const std::filesystem::path& in, const std::filesystem::path& out) {
  const Responder responder(checkpoint);
  std::ifstream is(in);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + in.string());
  std::vector<nlohmann::json> requests;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    require(j.is_object() && j.contains("context") && (j["context"].is_string() || j["context"].is_array()),
            ErrorKind::parse, in.string() + ":" + std::to_string(lineno) + ": expected {\"context\": [..]}");
    try {
      parse_context(j);
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::parse, in.string() + ":" + std::to_string(lineno) + ": context must hold strings");
    }
    requests.push_back(j);
  }

  auto os = open_output(out);
  os << nlohmann::json{{"format", "cvaet-generations"}, {"config", settings.to_json()},
                       {"checkpoint", checkpoint.string()}}
            .dump()
     << '\n';
  std::size_t responses = 0;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    DecodeConfig dc = settings.decode;
    dc.seed = derive_seed(settings.decode.seed, kGenerateStream, i);
    const auto r = responder.respond(parse_context(requests[i]), dc);
    responses += r.size();
    os << nlohmann::json{{"context", requests[i]["context"]}, {"responses", r}}.dump() << '\n';
  }
  finish_output(os, out);
  return {{"contexts", requests.size()}, {"responses", responses}, {"out", out.string()}};
}

nlohmann::json evaluate(const Settings& settings, const std::filesystem::path& checkpoint,
                        const std::filesystem::path& test) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const WordTokenizer tok;
  std::vector<TrainingExample> examples;
  if (is_example_file(test)) {
    Processed p = load_processed(test);
    require(p.vocab == ck.vocab, ErrorKind::validation,
            test.string() + ": vocabulary differs from the checkpoint's; prepare it with --use-vocab or pass raw episodes");
    examples = std::move(p.examples);
    check_lengths(examples, ck.settings.corpus, test);
  } else {
    examples = episodes_to_examples(load_episodes(test), tok, ck.vocab, ck.settings.corpus);
  }
  require(!examples.empty(), ErrorKind::validation, test.string() + ": no test examples");

  const PerplexityResult ppl = perplexity(ck.model, examples);
  const BeamOptions opts = beam_options(settings.decode);
  std::vector<TokenSeq> hyps, refs;
  for (const auto& ex : examples) {
    const BeamResult r = generate_with_mean(ck.model, ex, opts);
    hyps.push_back(whitespace_tokens(decode(tok, ck.vocab, r.best.tokens)));
    refs.push_back(whitespace_tokens(decode(tok, ck.vocab, ex.response_ids)));
  }
  return {{"ppl", ppl.ppl},
          {"bleu", bleu(hyps, refs, 4)},
          {"distinct", {distinct_n(hyps, 1), distinct_n(hyps, 2)}},
          {"examples", examples.size()},
          {"tokens", ppl.tokens},
          {"checkpoint", checkpoint.string()},
          {"config", settings.to_json()}};
}

nlohmann::json plot_steps(const Settings& settings, const std::filesystem::path& steps,
                          const std::filesystem::path& out_svg) {
  struct Point {
    double step, plus, minus;
  };
  std::vector<Point> train, valid;
  nlohmann::json run_config;
  std::ifstream in(steps);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + steps.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    require(j.is_object(), ErrorKind::parse, steps.string() + ":" + std::to_string(lineno) + ": malformed JSON");
    if (j.contains("format")) {
      run_config = j.value("config", nlohmann::json());
      continue;
    }
    if (!j.contains("step") || !j.contains("kl_plus") || !j.contains("kl_minus")) continue;
    const Point p{j["step"].get<double>(), j["kl_plus"].get<double>(), j["kl_minus"].get<double>()};
    (j.value("split", "train") == "valid" ? valid : train).push_back(p);
  }
  require(!train.empty() || !valid.empty(), ErrorKind::validation, steps.string() + ": no KL records to plot");

  double x0 = 1e300, x1 = -1e300, y1 = 0.0, y0 = 0.0;
  for (const auto* series : {&train, &valid}) {
    for (const auto& p : *series) {
      x0 = std::min(x0, p.step);
      x1 = std::max(x1, p.step);
      y0 = std::min({y0, p.plus, p.minus});
      y1 = std::max({y1, p.plus, p.minus});
    }
  }
  if (x1 <= x0) x1 = x0 + 1.0;
  if (y1 <= y0) y1 = y0 + 1.0;
  y1 += 0.05 * (y1 - y0);

  const double W = 800, H = 480, L = 70, R = 150, T = 40, B = 50;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<desc>" << xml_escape(nlohmann::json{{"run_config", run_config}, {"plot_config", settings.to_json()}}.dump())
      << "</desc>\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << L << "\" y=\"24\" font-size=\"15\">KL divergence during training"
      << (valid.empty() ? " (training batches)" : " (validation set)") << "</text>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x0 + (x1 - x0) * i / 5.0, yv = y0 + (y1 - y0) * i / 5.0;
    svg << "<line x1=\"" << px(xv) << "\" y1=\"" << H - B << "\" x2=\"" << px(xv) << "\" y2=\"" << H - B + 5
        << "\" stroke=\"black\"/><text x=\"" << px(xv) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
        << num(std::round(xv)) << "</text>\n";
    svg << "<line x1=\"" << L - 5 << "\" y1=\"" << py(yv) << "\" x2=\"" << W - R << "\" y2=\"" << py(yv)
        << "\" stroke=\"#ddd\"/><text x=\"" << L - 8 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">"
        << num(yv) << "</text>\n";
  }
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">step</text>\n";

  auto polyline = [&](const std::vector<Point>& pts, bool plus, const char* color, double width, double opacity) {
    if (pts.empty()) return;
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width << "\" stroke-opacity=\""
        << opacity << "\" points=\"";
    for (const auto& p : pts) svg << px(p.step) << ',' << py(plus ? p.plus : p.minus) << ' ';
    svg << "\"/>\n";
  };
  const bool faint_train = !valid.empty();
  polyline(train, true, "#d62728", 1.0, faint_train ? 0.3 : 1.0);
  polyline(train, false, "#2ca02c", 1.0, faint_train ? 0.3 : 1.0);
  polyline(valid, true, "#d62728", 2.0, 1.0);
  polyline(valid, false, "#2ca02c", 2.0, 1.0);

  const double lx = W - R + 15;
  svg << "<line x1=\"" << lx << "\" y1=\"" << T + 10 << "\" x2=\"" << lx + 25 << "\" y2=\"" << T + 10
      << "\" stroke=\"#d62728\" stroke-width=\"2\"/><text x=\"" << lx + 30 << "\" y=\"" << T + 14
      << "\">KL+ (response)</text>\n";
  svg << "<line x1=\"" << lx << "\" y1=\"" << T + 30 << "\" x2=\"" << lx + 25 << "\" y2=\"" << T + 30
      << "\" stroke=\"#2ca02c\" stroke-width=\"2\"/><text x=\"" << lx + 30 << "\" y=\"" << T + 34
      << "\">KL- (negative)</text>\n";
  svg << "</svg>\n";

  auto os = open_output(out_svg);
  os << svg.str();
  finish_output(os, out_svg);
  return {{"train_points", train.size()}, {"valid_points", valid.size()}, {"out", out_svg.string()}};
}

}  // namespace cvaet
