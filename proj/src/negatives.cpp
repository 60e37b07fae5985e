#include "cvaet/negatives.hpp"

#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <fcntl.h>
#include <map>
#include <mutex>

#include <nlohmann/json.hpp>

#include "cvaet/error.hpp"

namespace cvaet {

// ---- masking -----------------------------------------------------------------

std::vector<int> MaskedSentence::mask_positions() const {
  std::vector<int> out;
  for (std::size_t i = mask_span.start; i < mask_span.end; ++i) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> MaskedSentence::restore() const {
  std::vector<int> out = ids;
  for (std::size_t i = 0; i < original_tokens.size(); ++i) out[mask_span.start + i] = original_tokens[i];
  return out;
}

std::vector<TokenSpan> keyword_token_spans(std::string_view text,
                                           const std::vector<KeywordCandidate>& keywords,
                                           const Tokenizer& tokenizer) {
  const auto words = WordTokenizer::split(text);
  // offsets[i] = token offset of word i inside the framed response.
  std::vector<std::size_t> offsets(words.size() + 1);
  offsets[0] = 1;
  for (std::size_t i = 0; i < words.size(); ++i) {
    offsets[i + 1] = offsets[i] + tokenizer.tokenize(words[i]).size();
  }
  std::vector<TokenSpan> out;
  for (const auto& k : keywords) {
    if (k.end > words.size() || k.start >= k.end) continue;
    out.push_back({offsets[k.start], offsets[k.end]});
  }
  return out;
}

std::vector<MaskedSentence> make_masked_variants(std::span<const int> response,
                                                 std::span<const TokenSpan> spans,
                                                 MaskingStats* stats) {
  std::vector<MaskedSentence> out;
  MaskingStats local;
  for (const TokenSpan& s : spans) {
    // Sentinels at 0 and size-1 are never masked.
    if (s.start < 1 || s.end <= s.start || s.end + 1 > response.size()) {
      ++local.skipped_out_of_bounds;
      continue;
    }
    MaskedSentence m;
    m.ids.assign(response.begin(), response.end());
    m.mask_span = s;
    for (std::size_t i = s.start; i < s.end; ++i) {
      m.original_tokens.push_back(m.ids[i]);
      m.ids[i] = Vocab::kMaskId;
    }
    out.push_back(std::move(m));
  }
  if (stats != nullptr) *stats = local;
  return out;
}

// ---- statistical backend -------------------------------------------------------

StatisticalBackend::StatisticalBackend(const Vocab& vocab, std::span<const TrainingExample> corpus)
    : StatisticalBackend(vocab, [&] {
        std::vector<double> counts(static_cast<std::size_t>(vocab.size()), 0.0);
        for (const auto& ex : corpus) {
          for (int id : ex.response_ids) {
            if (vocab.contains_id(id)) counts[static_cast<std::size_t>(id)] += 1.0;
          }
          for (int id : ex.context_ids) {
            if (vocab.contains_id(id)) counts[static_cast<std::size_t>(id)] += 1.0;
          }
        }
        return counts;
      }()) {}

StatisticalBackend::StatisticalBackend(const Vocab& vocab, std::vector<double> unigram_counts)
    : vocab_(vocab), counts_(std::move(unigram_counts)) {
  require(counts_.size() == static_cast<std::size_t>(vocab.size()), ErrorKind::invalid_argument,
          "unigram counts must cover the vocabulary");
  punct_.resize(counts_.size());
  for (int id = 0; id < vocab.size(); ++id) {
    const std::string& t = vocab.token(id);
    punct_[static_cast<std::size_t>(id)] =
        t.size() == 1 && std::isalnum(static_cast<unsigned char>(t[0])) == 0 &&
        static_cast<unsigned char>(t[0]) < 0x80;
    // Special tokens never serve as fills.
    if (id < Vocab::kNumBuiltin) counts_[static_cast<std::size_t>(id)] = 0.0;
  }
}

bool StatisticalBackend::is_punctuation(int id) const {
  return vocab_.contains_id(id) && punct_[static_cast<std::size_t>(id)];
}

std::optional<int> StatisticalBackend::sample(int original, Rng& rng) const {
  const bool cls = is_punctuation(original);
  double total = 0.0;
  for (std::size_t id = 0; id < counts_.size(); ++id) {
    if (static_cast<int>(id) == original || punct_[id] != cls) continue;
    total += counts_[id];
  }
  if (total <= 0.0) return std::nullopt;
  std::uniform_real_distribution<double> u(0.0, total);
  double r = u(rng);
  int last = -1;
  for (std::size_t id = 0; id < counts_.size(); ++id) {
    if (static_cast<int>(id) == original || punct_[id] != cls || counts_[id] <= 0.0) continue;
    last = static_cast<int>(id);
    r -= counts_[id];
    if (r < 0.0) return last;
  }
  return last;
}

std::vector<int> StatisticalBackend::infill(const MaskedSentence& masked, Rng& rng) {
  std::vector<int> out;
  for (int original : masked.original_tokens) {
    // Without any alternative the original is echoed; the caller's retry and
    // forcing logic decides what happens next.
    out.push_back(sample(original, rng).value_or(original));
  }
  return out;
}

std::optional<int> StatisticalBackend::best_alternative(const MaskedSentence& masked, std::size_t index) {
  if (index >= masked.original_tokens.size()) return std::nullopt;
  const int original = masked.original_tokens[index];
  const bool cls = is_punctuation(original);
  std::optional<int> best;
  for (std::size_t id = 0; id < counts_.size(); ++id) {
    if (static_cast<int>(id) == original || punct_[id] != cls || counts_[id] <= 0.0) continue;
    if (!best || counts_[id] > counts_[static_cast<std::size_t>(*best)]) best = static_cast<int>(id);
  }
  return best;
}

// ---- external backend ----------------------------------------------------------

struct ExternalBackend::Gate {
  std::mutex mu;
  std::condition_variable cv;
  int free_slots;
  explicit Gate(int n) : free_slots(n) {}
};

namespace {

class Socket {
 public:
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() {
    if (fd_ >= 0) ::close(fd_);
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  int fd() const { return fd_; }

 private:
  int fd_;
};

[[noreturn]] void backend_fail(const std::string& what) { fail(ErrorKind::backend, "infill service: " + what); }

void wait_ready(int fd, short events, std::chrono::steady_clock::time_point deadline) {
  for (;;) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) backend_fail("timed out");
    pollfd p{fd, events, 0};
    const int r = ::poll(&p, 1, static_cast<int>(left.count()));
    if (r > 0) return;
    if (r < 0 && errno != EINTR) backend_fail(std::string("poll failed: ") + std::strerror(errno));
  }
}

int connect_to(const std::string& address, std::chrono::steady_clock::time_point deadline) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) backend_fail("address must be host:port, got '" + address + "'");
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr) {
    backend_fail("cannot resolve " + address);
  }
  std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, &::freeaddrinfo);
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL, 0) | O_NONBLOCK);
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) return fd;
    if (errno == EINPROGRESS) {
      try {
        wait_ready(fd, POLLOUT, deadline);
      } catch (...) {
        ::close(fd);
        throw;
      }
      int err = 0;
      socklen_t len = sizeof(err);
      ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
      if (err == 0) return fd;
    }
    ::close(fd);
  }
  backend_fail("cannot connect to " + address);
}

}  // namespace

ExternalBackend::ExternalBackend(const Vocab& vocab, Options options)
    : vocab_(vocab), options_(std::move(options)), gate_(std::make_unique<Gate>(std::max(1, options_.max_in_flight))) {
  require(!options_.address.empty(), ErrorKind::config, "external infill backend needs an address");
}

ExternalBackend::~ExternalBackend() = default;

std::string ExternalBackend::exchange(const std::string& line) {
  {
    std::unique_lock lock(gate_->mu);
    gate_->cv.wait(lock, [&] { return gate_->free_slots > 0; });
    --gate_->free_slots;
  }
  struct Release {
    Gate& g;
    ~Release() {
      {
        std::lock_guard lock(g.mu);
        ++g.free_slots;
      }
      g.cv.notify_one();
    }
  } release{*gate_};

  const auto deadline = std::chrono::steady_clock::now() + options_.timeout;
  Socket sock(connect_to(options_.address, deadline));
  std::string payload = line + "\n";
  std::size_t sent = 0;
  while (sent < payload.size()) {
    wait_ready(sock.fd(), POLLOUT, deadline);
    const ssize_t n = ::send(sock.fd(), payload.data() + sent, payload.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) continue;
      backend_fail(std::string("send failed: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(n);
  }
  std::string reply;
  char buf[4096];
  for (;;) {
    wait_ready(sock.fd(), POLLIN, deadline);
    const ssize_t n = ::recv(sock.fd(), buf, sizeof(buf), 0);
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) continue;
      backend_fail(std::string("recv failed: ") + std::strerror(errno));
    }
    if (n == 0) break;
    reply.append(buf, static_cast<std::size_t>(n));
    if (const auto nl = reply.find('\n'); nl != std::string::npos) {
      reply.resize(nl);
      return reply;
    }
  }
  if (reply.empty()) backend_fail("connection closed without a reply");
  return reply;
}

std::vector<std::vector<std::string>> ExternalBackend::request(const std::vector<std::string>& tokens,
                                                               const std::vector<int>& mask_positions,
                                                               int samples) {
  const nlohmann::json req = {{"tokens", tokens}, {"mask_positions", mask_positions}, {"samples", samples}};
  std::string last_error;
  for (int attempt = 0; attempt < std::max(1, options_.attempts); ++attempt) {
    try {
      const std::string reply = exchange(req.dump());
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(reply);
      } catch (const nlohmann::json::exception&) {
        backend_fail("malformed reply");
      }
      if (!j.contains("fills") || !j["fills"].is_array()) backend_fail("reply lacks 'fills'");
      auto fills = j["fills"].get<std::vector<std::vector<std::string>>>();
      for (const auto& f : fills) {
        if (f.size() != mask_positions.size()) backend_fail("fill count does not match mask count");
      }
      if (fills.empty()) backend_fail("reply has no samples");
      return fills;
    } catch (const Error& e) {
      last_error = e.what();
    } catch (const nlohmann::json::exception& e) {
      last_error = e.what();
    }
  }
  backend_fail(last_error);
}

std::vector<int> ExternalBackend::infill(const MaskedSentence& masked, Rng& /*rng*/) {
  const auto fills = request(to_tokens_with_masks(masked), masked.mask_positions(), 1);
  std::vector<int> out;
  // Special tokens in a fill are treated like unknown words.
  for (const auto& s : fills.front()) {
    const int id = vocab_.id(s);
    out.push_back(vocab_.is_special(id) ? Vocab::kUnkId : id);
  }
  return out;
}

std::optional<int> ExternalBackend::best_alternative(const MaskedSentence& masked, std::size_t index) {
  if (index >= masked.original_tokens.size()) return std::nullopt;
  const auto fills = request(to_tokens_with_masks(masked), masked.mask_positions(),
                             options_.alternative_samples);
  std::map<int, int> votes;
  std::vector<int> order;
  for (const auto& f : fills) {
    const int id = vocab_.id(f[index]);
    if (id == masked.original_tokens[index] || id == Vocab::kMaskId || vocab_.is_special(id)) continue;
    if (votes[id]++ == 0) order.push_back(id);
  }
  std::optional<int> best;
  for (int id : order) {
    if (!best || votes[id] > votes[*best]) best = id;
  }
  return best;
}

std::vector<std::string> ExternalBackend::to_tokens_with_masks(const MaskedSentence& masked) const {
  std::vector<std::string> out;
  for (int id : masked.ids) out.push_back(vocab_.token(id));
  return out;
}

// ---- generation ----------------------------------------------------------------

NegativeResult generate_negatives(std::span<const int> response, std::span<const TokenSpan> spans,
                                  InfillBackend& backend, int retries, Rng& rng, const Vocab& vocab) {
  NegativeResult result;
  const auto variants = make_masked_variants(response, spans);
  for (const auto& m : variants) {
    const auto positions = m.mask_positions();
    std::optional<std::vector<int>> accepted;
    bool failed = false;
    for (int attempt = 0; attempt <= retries && !accepted; ++attempt) {
      std::vector<int> fills;
      try {
        fills = backend.infill(m, rng);
      } catch (const Error&) {
        failed = true;
        break;
      }
      const bool valid = fills.size() == positions.size() &&
                         std::all_of(fills.begin(), fills.end(), [&](int id) {
                           return vocab.contains_id(id) && id != Vocab::kMaskId;
                         });
      if (!valid) {
        failed = true;
        break;
      }
      if (fills != m.original_tokens) {
        std::vector<int> neg = m.ids;
        for (std::size_t i = 0; i < positions.size(); ++i) neg[static_cast<std::size_t>(positions[i])] = fills[i];
        accepted = std::move(neg);
      }
    }
    if (failed) {
      ++result.backend_errors;
      ++result.dropped;
      continue;
    }
    if (!accepted) {
      std::optional<int> alt;
      try {
        alt = backend.best_alternative(m, 0);
      } catch (const Error&) {
        ++result.backend_errors;
      }
      if (alt && vocab.contains_id(*alt) && *alt != Vocab::kMaskId && *alt != m.original_tokens[0]) {
        std::vector<int> neg = m.restore();
        neg[m.mask_span.start] = *alt;
        accepted = std::move(neg);
        ++result.forced;
      }
    }
    if (!accepted) {
      ++result.dropped;
      continue;
    }
    result.negatives.push_back(std::move(*accepted));
  }
  result.no_negatives = result.negatives.empty();
  return result;
}

nlohmann::json AugmentStats::to_json() const {
  return {{"examples", examples},         {"with_negatives", with_negatives}, {"negatives", negatives},
          {"keywords", keywords},         {"backend_errors", backend_errors}, {"forced", forced},
          {"dropped", dropped}};
}

AugmentStats augment_with_negatives(std::vector<TrainingExample>& examples, InfillBackend& backend,
                                    const KeywordConfig& keywords, const NegativesConfig& config,
                                    const Tokenizer& tokenizer, const Vocab& vocab, std::uint64_t seed) {
  constexpr std::uint64_t kAugmentStream = 0xa6e7;
  AugmentStats stats;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    TrainingExample& ex = examples[i];
    Rng rng = make_rng(seed, kAugmentStream, i);
    const auto found = extract_keywords(ex.response_text, keywords);
    const auto spans = keyword_token_spans(ex.response_text, found, tokenizer);
    const NegativeResult r = generate_negatives(ex.response_ids, spans, backend, config.retries, rng, vocab);
    ex.negatives = r.negatives;
    ++stats.examples;
    stats.keywords += found.size();
    stats.negatives += r.negatives.size();
    stats.backend_errors += r.backend_errors;
    stats.forced += r.forced;
    stats.dropped += r.dropped;
    if (!r.no_negatives) ++stats.with_negatives;
  }
  return stats;
}

std::unique_ptr<InfillBackend> make_infill_backend(const NegativesConfig& config, const Vocab& vocab,
                                                   std::span<const TrainingExample> corpus) {
  if (config.backend == "statistical") return std::make_unique<StatisticalBackend>(vocab, corpus);
  if (config.backend == "external") {
    ExternalBackend::Options o;
    o.address = config.infill_address;
    if (o.address.empty()) {
      if (const char* env = std::getenv(kInfillAddressEnv)) o.address = env;
    }
    require(!o.address.empty(), ErrorKind::config,
            std::string("external infill backend needs infill_address or ") + kInfillAddressEnv);
    o.timeout = std::chrono::milliseconds(config.infill_timeout_ms);
    o.max_in_flight = config.infill_max_in_flight;
    o.attempts = config.infill_attempts;
    return std::make_unique<ExternalBackend>(vocab, o);
  }
  fail(ErrorKind::config, "infill_backend must be statistical or external, got '" + config.backend + "'");
}

const std::vector<int>& sample_negative(const TrainingExample& example, Rng& rng) {
  if (example.negatives.empty()) fail(ErrorKind::precondition, "example has no negatives");
  std::uniform_int_distribution<std::size_t> pick(0, example.negatives.size() - 1);
  return example.negatives[pick(rng)];
}

}  // namespace cvaet
