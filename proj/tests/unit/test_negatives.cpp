#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <functional>
#include <thread>

#include "doctest.h"

#include "cvaet/error.hpp"
#include "cvaet/negatives.hpp"

using namespace cvaet;

namespace {

Vocab small_vocab() {
  return Vocab::from_counts({{"i", 9}, {"can", 8}, {"speak", 7}, {"french", 6}, {"german", 5}, {"sing", 4},
                             {"we", 3}, {".", 3}, {",", 2}},
                            1);
}

std::vector<int> frame(const Vocab& v, std::initializer_list<const char*> words) {
  std::vector<int> out{Vocab::kStartId};
  for (const char* w : words) out.push_back(v.id(w));
  out.push_back(Vocab::kEndId);
  return out;
}

// Fills every mask with a fixed token.
class ConstantBackend final : public InfillBackend {
 public:
  explicit ConstantBackend(int fill, std::optional<int> alternative = std::nullopt)
      : fill_(fill), alternative_(alternative) {}
  std::string name() const override { return "constant"; }
  std::vector<int> infill(const MaskedSentence& m, Rng&) override {
    ++calls;
    return std::vector<int>(m.original_tokens.size(), fill_ < 0 ? m.original_tokens[0] : fill_);
  }
  std::optional<int> best_alternative(const MaskedSentence&, std::size_t) override { return alternative_; }
  int calls = 0;

 private:
  int fill_;
  std::optional<int> alternative_;
};

class ThrowingBackend final : public InfillBackend {
 public:
  std::string name() const override { return "throwing"; }
  std::vector<int> infill(const MaskedSentence&, Rng&) override { fail(ErrorKind::backend, "down"); }
  std::optional<int> best_alternative(const MaskedSentence&, std::size_t) override {
    fail(ErrorKind::backend, "down");
  }
};

// Loopback server handing each connection to `handler` on its own thread.
class FakeServer {
 public:
  explicit FakeServer(std::function<void(int)> handler) : handler_(std::move(handler)) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    REQUIRE(::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
    REQUIRE(::listen(fd_, 64) == 0);
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    acceptor_ = std::thread([this] {
      for (;;) {
        const int c = ::accept(fd_, nullptr, nullptr);
        if (c < 0 || stop_) {
          if (c >= 0) ::close(c);
          return;
        }
        workers_.emplace_back([this, c] {
          handler_(c);
          ::close(c);
        });
      }
    });
  }
  ~FakeServer() {
    stop_ = true;
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    acceptor_.join();
    for (auto& w : workers_) w.join();
  }
  std::string address() const { return "127.0.0.1:" + std::to_string(port_); }

 private:
  std::function<void(int)> handler_;
  int fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stop_{false};
  std::thread acceptor_;
  std::vector<std::thread> workers_;
};

std::string read_line(int fd) {
  std::string s;
  char c = 0;
  while (::recv(fd, &c, 1, 0) == 1 && c != '\n') s.push_back(c);
  return s;
}

void write_all(int fd, const std::string& s) {
  std::size_t sent = 0;
  while (sent < s.size()) {
    const ssize_t n = ::send(fd, s.data() + sent, s.size() - sent, MSG_NOSIGNAL);
    if (n <= 0) return;
    sent += static_cast<std::size_t>(n);
  }
}

// Answers every request with `word` at each mask position.
std::function<void(int)> reply_with(const std::string& word) {
  return [word](int fd) {
    const auto req = nlohmann::json::parse(read_line(fd));
    nlohmann::json fills = nlohmann::json::array();
    for (int s = 0; s < req.at("samples").get<int>(); ++s) {
      fills.push_back(std::vector<std::string>(req.at("mask_positions").size(), word));
    }
    write_all(fd, nlohmann::json{{"fills", fills}}.dump() + "\n");
  };
}

}  // namespace

TEST_CASE("two key spans give two masked variants that restore to the original") {
  const Vocab v = small_vocab();
  const auto r = frame(v, {"i", "can", "speak", "french"});
  const std::vector<TokenSpan> spans{{3, 5}, {1, 2}};
  const auto masked = make_masked_variants(r, spans);
  REQUIRE(masked.size() == 2);
  CHECK(masked[0].ids == std::vector<int>{Vocab::kStartId, v.id("i"), v.id("can"), Vocab::kMaskId, Vocab::kMaskId,
                                          Vocab::kEndId});
  CHECK(masked[0].mask_positions() == std::vector<int>{3, 4});
  CHECK(masked[1].original_tokens == std::vector<int>{v.id("i")});
  for (const auto& m : masked) CHECK(m.restore() == r);
}

TEST_CASE("masking edge cases") {
  const Vocab v = small_vocab();
  const auto r = frame(v, {"i", "can", "speak"});
  CHECK(make_masked_variants(r, std::vector<TokenSpan>{}).empty());
  // The whole interior may be masked.
  const std::vector<TokenSpan> whole{{1, 4}};
  const auto w = make_masked_variants(r, whole);
  REQUIRE(w.size() == 1);
  CHECK(w[0].ids == std::vector<int>{Vocab::kStartId, Vocab::kMaskId, Vocab::kMaskId, Vocab::kMaskId, Vocab::kEndId});
  // Spans reaching a sentinel or beyond are skipped and counted.
  const std::vector<TokenSpan> bad{{0, 2}, {3, 5}, {2, 9}, {2, 2}, {2, 3}};
  MaskingStats stats;
  const auto m = make_masked_variants(r, bad, &stats);
  CHECK(m.size() == 1);
  CHECK(stats.skipped_out_of_bounds == 4);
}

TEST_CASE("keyword word spans map onto framed token offsets") {
  const WordTokenizer tok;
  const auto kw = extract_keywords("I can speak French", KeywordConfig{});
  REQUIRE(!kw.empty());
  const auto spans = keyword_token_spans("I can speak French", kw, tok);
  REQUIRE(spans.size() == kw.size());
  for (std::size_t i = 0; i < kw.size(); ++i) {
    CHECK(spans[i].start == kw[i].start + 1);
    CHECK(spans[i].end == kw[i].end + 1);
  }
}

TEST_CASE("a statistical negative differs from the response exactly inside the span") {
  const Vocab v = small_vocab();
  const WordTokenizer tok;
  std::vector<TrainingExample> corpus(1);
  corpus[0].response_ids = frame(v, {"i", "can", "speak", "french", "german", "sing", "we", ".", ","});
  StatisticalBackend backend(v, corpus);
  const auto r = frame(v, {"i", "can", "speak", "french"});
  const auto kw = extract_keywords("i can speak french", KeywordConfig{});
  const auto spans = keyword_token_spans("i can speak french", kw, tok);
  REQUIRE(!spans.empty());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto res = generate_negatives(r, spans, backend, 5, rng, v);
    REQUIRE(res.negatives.size() == spans.size());
    CHECK_FALSE(res.no_negatives);
    for (std::size_t k = 0; k < spans.size(); ++k) {
      const auto& neg = res.negatives[k];
      REQUIRE(neg.size() == r.size());
      bool differs = false;
      for (std::size_t i = 0; i < r.size(); ++i) {
        const bool inside = i >= spans[k].start && i < spans[k].end;
        if (!inside) CHECK(neg[i] == r[i]);
        if (inside) {
          differs = differs || neg[i] != r[i];
          CHECK_FALSE(v.is_special(neg[i]));
          // Words stay words.
          CHECK(v.token(neg[i]) != ".");
          CHECK(v.token(neg[i]) != ",");
        }
      }
      CHECK(differs);
    }
  }
}

TEST_CASE("a backend that only echoes the original is forced once, or dropped without an alternative") {
  const Vocab v = small_vocab();
  const auto r = frame(v, {"i", "can", "speak", "french"});
  const std::vector<TokenSpan> spans{{4, 5}};
  Rng rng(1);
  ConstantBackend forced(-1, v.id("german"));
  const auto a = generate_negatives(r, spans, forced, 3, rng, v);
  CHECK(forced.calls == 4);
  REQUIRE(a.negatives.size() == 1);
  CHECK(a.negatives[0] == frame(v, {"i", "can", "speak", "german"}));
  CHECK(a.forced == 1);

  ConstantBackend degenerate(-1);
  const auto b = generate_negatives(r, spans, degenerate, 3, rng, v);
  CHECK(b.negatives.empty());
  CHECK(b.no_negatives);
  CHECK(b.dropped == 1);
}

TEST_CASE("backend failures are counted and the example degrades to no negatives") {
  const Vocab v = small_vocab();
  const auto r = frame(v, {"i", "can", "speak", "french"});
  const std::vector<TokenSpan> spans{{3, 5}, {1, 2}};
  ThrowingBackend backend;
  Rng rng(2);
  const auto res = generate_negatives(r, spans, backend, 5, rng, v);
  CHECK(res.no_negatives);
  CHECK(res.backend_errors == 2);
  // A fill naming the mask token is refused like a failure.
  ConstantBackend masky(Vocab::kMaskId);
  CHECK(generate_negatives(r, spans, masky, 5, rng, v).no_negatives);
}

TEST_CASE("no spans means no negatives") {
  const Vocab v = small_vocab();
  ConstantBackend backend(v.id("we"));
  Rng rng(3);
  const auto res = generate_negatives(frame(v, {"i"}), std::vector<TokenSpan>{}, backend, 5, rng, v);
  CHECK(res.no_negatives);
  CHECK(backend.calls == 0);
}

TEST_CASE("sample_negative picks uniformly and deterministically") {
  TrainingExample ex;
  Rng rng(0);
  CHECK_THROWS_AS(sample_negative(ex, rng), Error);
  try {
    sample_negative(ex, rng);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::precondition);
  }

  ex.negatives = {{1, 7, 2}};
  CHECK(sample_negative(ex, rng) == std::vector<int>{1, 7, 2});

  ex.negatives = {{1, 7, 2}, {1, 8, 2}, {1, 9, 2}};
  Rng a(42), b(42);
  for (int i = 0; i < 50; ++i) CHECK(&sample_negative(ex, a) == &sample_negative(ex, b));

  // Chi-square goodness of fit, 2 degrees of freedom, p = 0.0027.
  Rng rng2(7);
  std::array<int, 3> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto* p = &sample_negative(ex, rng2);
    ++counts[static_cast<std::size_t>(p - ex.negatives.data())];
  }
  double chi2 = 0;
  for (int c : counts) chi2 += (c - n / 3.0) * (c - n / 3.0) / (n / 3.0);
  CHECK(chi2 < 11.83);
}

TEST_CASE("augmentation is a pure function of the seed") {
  const WordTokenizer tok;
  const std::vector<DialogueEpisode> eps = {
      {{{"do you speak french", 0}, {"i can speak french and german", 1}, {"we sing in german", 0}}}};
  const Vocab v = build_vocab(eps, tok, 1);
  auto ex = episodes_to_examples(eps, tok, v, CorpusConfig{});
  StatisticalBackend backend(v, ex);
  auto a = ex, b = ex;
  const auto sa = augment_with_negatives(a, backend, KeywordConfig{}, NegativesConfig{}, tok, v, 11);
  augment_with_negatives(b, backend, KeywordConfig{}, NegativesConfig{}, tok, v, 11);
  CHECK(a == b);
  CHECK(sa.examples == ex.size());
  CHECK(sa.with_negatives == ex.size());
  CHECK(sa.negatives == sa.keywords);
}

TEST_CASE("external backend exchanges one JSON line per request") {
  const Vocab v = small_vocab();
  std::atomic<int> seen_masks{-1};
  FakeServer server([&](int fd) {
    const auto req = nlohmann::json::parse(read_line(fd));
    seen_masks = static_cast<int>(req.at("mask_positions").size());
    CHECK(req.at("tokens").at(3) == "[MASK]");
    write_all(fd, R"({"fills":[["german","sing"]]})" "\n");
  });
  ExternalBackend backend(v, {server.address(), std::chrono::milliseconds(2000), 2, 1, 8});
  const auto m = make_masked_variants(frame(v, {"i", "can", "speak", "french"}), std::vector<TokenSpan>{{3, 5}});
  Rng rng(0);
  CHECK(backend.infill(m[0], rng) == std::vector<int>{v.id("german"), v.id("sing")});
  CHECK(seen_masks == 2);
}

TEST_CASE("external fills naming special tokens become unknown words") {
  const Vocab v = small_vocab();
  FakeServer server(reply_with("[MASK]"));
  ExternalBackend backend(v, {server.address(), std::chrono::milliseconds(2000), 2, 1, 8});
  const auto m = make_masked_variants(frame(v, {"i", "can"}), std::vector<TokenSpan>{{1, 2}});
  Rng rng(0);
  CHECK(backend.infill(m[0], rng) == std::vector<int>{Vocab::kUnkId});
}

TEST_CASE("a silent external service times out with a backend error") {
  const Vocab v = small_vocab();
  FakeServer server([](int fd) {
    read_line(fd);
    std::this_thread::sleep_for(std::chrono::milliseconds(600));
  });
  ExternalBackend backend(v, {server.address(), std::chrono::milliseconds(150), 1, 1, 8});
  const auto start = std::chrono::steady_clock::now();
  try {
    backend.request({"i", "[MASK]"}, {1}, 1);
    FAIL("expected a timeout");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::backend);
  }
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::milliseconds(550));
}

TEST_CASE("an unreachable or malformed service is a backend error") {
  const Vocab v = small_vocab();
  FakeServer wrong([](int fd) {
    read_line(fd);
    write_all(fd, "{\"fills\":[[\"a\",\"b\"]]}\n");
  });
  ExternalBackend backend(v, {wrong.address(), std::chrono::milliseconds(1000), 1, 2, 8});
  CHECK_THROWS_AS(backend.request({"i", "[MASK]"}, {1}, 1), Error);
  CHECK_THROWS_AS(ExternalBackend(v, {"", std::chrono::milliseconds(1), 1, 1, 1}), Error);
}

TEST_CASE("concurrent callers never exceed max_in_flight requests") {
  const Vocab v = small_vocab();
  std::atomic<int> active{0}, peak{0}, served{0};
  FakeServer server([&](int fd) {
    const std::string line = read_line(fd);
    const int now = ++active;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(40));
    --active;
    ++served;
    write_all(fd, R"({"fills":[["we"]]})" "\n");
  });
  ExternalBackend backend(v, {server.address(), std::chrono::milliseconds(5000), 2, 1, 8});
  std::vector<std::thread> callers;
  std::atomic<int> ok{0};
  for (int t = 0; t < 6; ++t) {
    callers.emplace_back([&] {
      if (backend.request({"i", "[MASK]"}, {1}, 1).front().front() == "we") ++ok;
    });
  }
  for (auto& c : callers) c.join();
  CHECK(ok == 6);
  CHECK(served == 6);
  CHECK(peak <= 2);
  CHECK(peak >= 1);
}
