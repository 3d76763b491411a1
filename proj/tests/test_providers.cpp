#include <gtest/gtest.h>

#include <deque>
#include <fstream>
#include <random>
#include <set>

#include "caf/providers.hpp"
#include "test_support.hpp"

using namespace caf;
using caf_test::TempDir;

namespace {

ChatRequest request(const std::string& text, double temperature = 0.0) {
  ChatRequest r;
  r.model = "gpt-3.5-turbo";
  r.temperature = temperature;
  r.messages = {{Role::user, text}};
  return r;
}

/// Serves canned HTTP responses in order and records what it was sent.
class FakeTransport : public Transport {
 public:
  explicit FakeTransport(std::deque<HttpResponse> responses) : responses_(std::move(responses)) {}

  HttpResponse post_json(const std::string& path, const std::string& body, const Headers& headers) override {
    paths.push_back(path);
    bodies.push_back(body);
    last_headers = headers;
    if (responses_.empty()) return {0, "", "no more canned responses"};
    auto r = responses_.front();
    responses_.pop_front();
    return r;
  }

  std::vector<std::string> paths;
  std::vector<std::string> bodies;
  Headers last_headers;

 private:
  std::deque<HttpResponse> responses_;
};

std::string chat_body(const std::string& text) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}}, {"finish_reason", "stop"}}}},
                        {"usage", {{"prompt_tokens", 10}, {"completion_tokens", 3}}}}
      .dump();
}

std::shared_ptr<Backoff> no_sleep(std::vector<std::chrono::milliseconds>* slept = nullptr) {
  return std::make_shared<Backoff>(RetryPolicy{}, [slept](std::chrono::milliseconds d) {
    if (slept) slept->push_back(d);
  });
}

EndpointSettings settings() { return {"sk-test", "http://localhost"}; }

}  // namespace

TEST(Fingerprint, IgnoresKeyOrder) {
  const auto a = nlohmann::json::parse(
      R"({"model":"m","temperature":0,"max_tokens":64,"messages":[{"role":"user","content":"hi"}]})");
  const auto b = nlohmann::json::parse(
      R"({"messages":[{"content":"hi","role":"user"}],"max_tokens":64,"temperature":0,"model":"m"})");
  EXPECT_EQ(fingerprint_json(a), fingerprint_json(b));
}

TEST(Fingerprint, SensitiveToEveryField) {
  const auto base = request("hello");
  EXPECT_NE(fingerprint(base), fingerprint(request("hello", 0.1)));
  auto other_model = base;
  other_model.model = "gpt-4";
  EXPECT_NE(fingerprint(base), fingerprint(other_model));
  auto other_tokens = base;
  other_tokens.max_tokens = 65;
  EXPECT_NE(fingerprint(base), fingerprint(other_tokens));
  auto no_tokens = base;
  no_tokens.max_tokens.reset();
  EXPECT_NE(fingerprint(base), fingerprint(no_tokens));
  auto role = base;
  role.messages.insert(role.messages.begin(), {Role::system, "hello"});
  EXPECT_NE(fingerprint(base), fingerprint(role));
}

TEST(Fingerprint, NoCollisionsOnSingleCharacterEdits) {
  std::mt19937 rng(11);
  std::uniform_int_distribution<int> ch('a', 'z'), len(1, 40);
  std::set<std::string> seen;
  for (int i = 0; i < 1000; ++i) {
    std::string text;
    for (int k = len(rng); k > 0; --k) text += static_cast<char>(ch(rng));
    std::string edited = text;
    auto& c = edited[std::uniform_int_distribution<std::size_t>(0, edited.size() - 1)(rng)];
    c = c == 'z' ? 'a' : static_cast<char>(c + 1);
    const auto fa = fingerprint(request(text));
    const auto fb = fingerprint(request(edited));
    EXPECT_NE(fa, fb);
    seen.insert(fa);
    seen.insert(fb);
    EXPECT_EQ(fa.size(), 64u);
  }
  EXPECT_GT(seen.size(), 1900u);  // random texts may repeat; edits never collide with their source
}

TEST(Fingerprint, RequestJsonRoundTrip) {
  auto r = request("x", 0.7);
  r.messages.insert(r.messages.begin(), {Role::assistant, "y"});
  EXPECT_EQ(chat_request_from_json(to_json(r)), r);
}

TEST(RaiseForStatus, Mapping) {
  auto kind = [](HttpResponse r) {
    try {
      raise_for_status(r, "x");
    } catch (const Error& e) {
      return std::optional<ErrorKind>(e.kind());
    }
    return std::optional<ErrorKind>();
  };
  EXPECT_EQ(kind({200, "", ""}), std::nullopt);
  EXPECT_EQ(kind({0, "", "refused"}), ErrorKind::network);
  EXPECT_EQ(kind({401, "", ""}), ErrorKind::auth);
  EXPECT_EQ(kind({403, "", ""}), ErrorKind::auth);
  EXPECT_EQ(kind({429, "", ""}), ErrorKind::rate_limit);
  EXPECT_EQ(kind({408, "", ""}), ErrorKind::network);
  EXPECT_EQ(kind({503, "", ""}), ErrorKind::network);
  EXPECT_EQ(kind({400, "bad", ""}), ErrorKind::http);
  EXPECT_EQ(kind({404, "", ""}), ErrorKind::http);
}

TEST(Backoff, DelaysDoubleWithinJitter) {
  Backoff b(RetryPolicy{5, std::chrono::milliseconds(500), 0.25}, [](auto) {}, 1);
  for (int attempt = 1; attempt <= 4; ++attempt) {
    const double nominal = 500.0 * (1 << (attempt - 1));
    for (int i = 0; i < 50; ++i) {
      const auto d = static_cast<double>(b.delay_for(attempt).count());
      EXPECT_GE(d, nominal * 0.75 - 1);
      EXPECT_LE(d, nominal * 1.25 + 1);
    }
  }
  Backoff exact(RetryPolicy{5, std::chrono::milliseconds(100), 0.0}, [](auto) {});
  EXPECT_EQ(exact.delay_for(1).count(), 100);
  EXPECT_EQ(exact.delay_for(3).count(), 400);
}

TEST(Backoff, RetriesTransientUpToMaxAttempts) {
  std::vector<std::chrono::milliseconds> slept;
  auto b = no_sleep(&slept);
  int calls = 0;
  EXPECT_THROW(b->run([&]() -> int {
    ++calls;
    throw Error(ErrorKind::rate_limit, "slow down");
  }),
               Error);
  EXPECT_EQ(calls, 5);
  EXPECT_EQ(slept.size(), 4u);
}

TEST(Backoff, DoesNotRetryPermanentErrors) {
  auto b = no_sleep();
  int calls = 0;
  EXPECT_THROW(b->run([&]() -> int {
    ++calls;
    throw Error(ErrorKind::auth, "bad key");
  }),
               Error);
  EXPECT_EQ(calls, 1);
}

TEST(Backoff, RecoversAfterTransientFailures) {
  auto b = no_sleep();
  int calls = 0;
  const int v = b->run([&] {
    if (++calls < 3) throw Error(ErrorKind::network, "reset");
    return 42;
  });
  EXPECT_EQ(v, 42);
  EXPECT_EQ(calls, 3);
}

TEST(OpenAIChat, SendsRequestAndParses) {
  auto t = std::make_shared<FakeTransport>(std::deque<HttpResponse>{{200, chat_body("Option 3"), ""}});
  OpenAIChatProvider p(t, settings(), no_sleep());
  const auto r = p.chat_complete(request("pick"));
  EXPECT_EQ(r.text, "Option 3");
  ASSERT_TRUE(r.usage);
  EXPECT_EQ(r.usage->completion_tokens, 3);
  ASSERT_EQ(t->paths.size(), 1u);
  EXPECT_EQ(t->paths[0], "/chat/completions");
  const auto sent = nlohmann::json::parse(t->bodies[0]);
  EXPECT_EQ(sent["model"], "gpt-3.5-turbo");
  EXPECT_EQ(sent["max_tokens"], 64);
  EXPECT_EQ(sent["messages"][0]["content"], "pick");
  EXPECT_EQ(t->last_headers.at(0).second, "Bearer sk-test");
}

TEST(OpenAIChat, RetriesThenSucceeds) {
  auto t = std::make_shared<FakeTransport>(
      std::deque<HttpResponse>{{429, "", ""}, {502, "", ""}, {200, chat_body("ok"), ""}});
  std::vector<std::chrono::milliseconds> slept;
  OpenAIChatProvider p(t, settings(), no_sleep(&slept));
  EXPECT_EQ(p.chat_complete(request("x")).text, "ok");
  EXPECT_EQ(t->paths.size(), 3u);
  EXPECT_EQ(slept.size(), 2u);
}

TEST(OpenAIChat, AuthFailsFast) {
  auto t = std::make_shared<FakeTransport>(std::deque<HttpResponse>{{401, "", ""}});
  OpenAIChatProvider p(t, settings(), no_sleep());
  try {
    p.chat_complete(request("x"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::auth);
  }
  EXPECT_EQ(t->paths.size(), 1u);
}

TEST(OpenAIChat, MissingKeyIsAuthError) {
  auto t = std::make_shared<FakeTransport>(std::deque<HttpResponse>{});
  OpenAIChatProvider p(t, {"", "http://x"}, no_sleep());
  try {
    p.chat_complete(request("x"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::auth);
  }
  EXPECT_TRUE(t->paths.empty());
}

TEST(OpenAIChat, MalformedBodies) {
  for (const auto* body : {"not json", "{}", R"({"choices":[]})",
                           R"({"choices":[{"message":{"content":null},"finish_reason":"stop"}]})"}) {
    try {
      OpenAIChatProvider::parse(body);
      ADD_FAILURE() << body;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::malformed_response) << body;
    }
  }
  const auto truncated =
      OpenAIChatProvider::parse(R"({"choices":[{"message":{"content":null},"finish_reason":"length"}]})");
  EXPECT_EQ(truncated.text, "");
  EXPECT_EQ(truncated.finish_reason, "length");
}

TEST(ChatRequestValidation, Rules) {
  auto r = request("x");
  r.temperature = 2.5;
  EXPECT_THROW(validate(r), Error);
  r = request("x");
  r.messages.push_back({Role::assistant, "y"});
  EXPECT_THROW(validate(r), Error);
  r = request("x");
  r.max_tokens = 0;
  EXPECT_THROW(validate(r), Error);
  r.messages.clear();
  r.max_tokens = 5;
  EXPECT_THROW(validate(r), Error);
}

TEST(Mock, ScriptedFingerprintEcho) {
  MockChatProvider mock;
  const auto req = request("clause text");
  mock.script(fingerprint(req), {"Tenant indemnifies Landlord."});
  EXPECT_EQ(mock.chat_complete(req).text, "Tenant indemnifies Landlord.");
  EXPECT_THROW(mock.chat_complete(request("something else")), Error);
}

TEST(Mock, RulesCycleAndDefault) {
  auto mock = MockChatProvider::from_json(nlohmann::json::parse(
      R"({"rules":[{"contains":"alpha","responses":["a1","a2"]}],"default":"d"})"));
  EXPECT_EQ(mock->chat_complete(request("has alpha")).text, "a1");
  EXPECT_EQ(mock->chat_complete(request("has alpha")).text, "a2");
  EXPECT_EQ(mock->chat_complete(request("has alpha")).text, "a1");
  EXPECT_EQ(mock->chat_complete(request("beta")).text, "d");
}

TEST(Cassette, RecordThenReplayInOrder) {
  TempDir dir;
  const auto path = dir / "c.jsonl";
  auto inner = std::make_shared<MockChatProvider>();
  inner->add_rule({"q", {"first", "second"}});
  {
    auto cassette = std::make_shared<Cassette>();
    cassette->attach(path, [] { return std::string("2026-01-01T00:00:00Z"); });
    RecordingChatProvider rec(inner, cassette);
    EXPECT_EQ(rec.chat_complete(request("q")).text, "first");
    EXPECT_EQ(rec.chat_complete(request("q")).text, "second");
    EXPECT_EQ(cassette->count(fingerprint(request("q"))), 2u);
    EXPECT_EQ(cassette->fingerprints(), 1u);
  }
  const auto loaded = Cassette::load(path);
  ReplayChatProvider replay(loaded);
  EXPECT_EQ(replay.chat_complete(request("q")).text, "first");
  EXPECT_EQ(replay.chat_complete(request("q")).text, "second");
  try {
    replay.chat_complete(request("q"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::replay_miss);
    EXPECT_NE(std::string(e.what()).find(fingerprint(request("q"))), std::string::npos);
  }
  // a fresh replayer starts from the beginning
  EXPECT_EQ(ReplayChatProvider(loaded).chat_complete(request("q")).text, "first");
}

TEST(Cassette, LineFormat) {
  TempDir dir;
  const auto path = dir / "c.jsonl";
  auto cassette = std::make_shared<Cassette>();
  cassette->attach(path, [] { return std::string("T"); });
  cassette->append("fp", nlohmann::json{{"text", "x"}});
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, R"({"fingerprint":"fp","index":0,"response":{"text":"x"},"recorded_at":"T"})");
}

TEST(Cassette, GapsAndDuplicatesAreParseErrors) {
  TempDir dir;
  auto write = [&](const std::string& body) {
    std::ofstream(dir / "c.jsonl") << body;
    return dir / "c.jsonl";
  };
  EXPECT_THROW(Cassette::load(write(R"({"fingerprint":"f","index":1,"response":{"text":"x"}})" "\n")), Error);
  EXPECT_THROW(Cassette::load(write(R"({"fingerprint":"f","index":0,"response":{}})" "\n"
                                    R"({"fingerprint":"f","index":0,"response":{}})" "\n")),
               Error);
  EXPECT_THROW(Cassette::load(write("garbage\n")), Error);
  // out-of-order lines are fine as long as indices are contiguous
  const auto ok = Cassette::load(write(R"({"fingerprint":"f","index":1,"response":{"text":"b"}})" "\n"
                                       R"({"fingerprint":"f","index":0,"response":{"text":"a"}})" "\n"));
  EXPECT_EQ(ok->get("f", 0)->at("text"), "a");
  try {
    Cassette::load(dir / "missing.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(OpenAIEmbeddings, ParsesByIndex) {
  const auto v = OpenAIEmbeddingBackend::parse(
      R"({"data":[{"index":1,"embedding":[0,1]},{"index":0,"embedding":[1,0]}]})", 2);
  EXPECT_EQ(v[0], (std::vector<double>{1, 0}));
  EXPECT_EQ(v[1], (std::vector<double>{0, 1}));
  EXPECT_THROW(OpenAIEmbeddingBackend::parse(R"({"data":[{"embedding":[1]}]})", 2), Error);
  EXPECT_THROW(OpenAIEmbeddingBackend::parse("nope", 1), Error);
}

TEST(OpenAIEmbeddings, SendsBatch) {
  auto t = std::make_shared<FakeTransport>(std::deque<HttpResponse>{
      {200, R"({"data":[{"index":0,"embedding":[3,4]},{"index":1,"embedding":[1,0]}]})", ""}});
  OpenAIEmbeddingBackend backend(t, settings(), no_sleep());
  const auto v = backend.fetch({"a", "b"}, "text-embedding-ada-002");
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(t->paths[0], "/embeddings");
  EXPECT_EQ(nlohmann::json::parse(t->bodies[0])["input"], nlohmann::json({"a", "b"}));
}

TEST(Embedder, DeduplicatesAndNormalizes) {
  auto backend = std::make_shared<ScriptedEmbeddingBackend>(
      std::map<std::string, std::vector<double>>{{"a", {3, 4}}, {"b", {0, 2}}});
  Embedder e(backend);
  const auto v = e.embed({"a", "b", "a"}, "m");
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0], v[2]);
  EXPECT_DOUBLE_EQ(v[0].values[0], 0.6);
  EXPECT_DOUBLE_EQ(v[0].values[1], 0.8);
  EXPECT_EQ(v[1].values, (std::vector<double>{0, 1}));
  EXPECT_EQ(backend->texts_fetched(), 2u);
  e.embed({"a", "b"}, "m");
  EXPECT_EQ(backend->calls(), 1u);
}

TEST(Embedder, RejectsBadVectors) {
  Embedder zero(std::make_shared<ScriptedEmbeddingBackend>(std::map<std::string, std::vector<double>>{{"z", {0, 0}}}));
  EXPECT_THROW(zero.embed({"z"}, "m"), Error);
  Embedder mixed(std::make_shared<ScriptedEmbeddingBackend>(
      std::map<std::string, std::vector<double>>{{"a", {1, 0}}, {"b", {1, 0, 0}}}));
  try {
    mixed.embed({"a", "b"}, "m");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
  Embedder later(std::make_shared<ScriptedEmbeddingBackend>(
      std::map<std::string, std::vector<double>>{{"a", {1, 0}}, {"b", {1, 0, 0}}}));
  later.embed({"a"}, "m");
  EXPECT_THROW(later.embed({"b"}, "m"), Error);
  EXPECT_THROW(later.embed({}, "m"), Error);
}

TEST(Embedder, PersistentCacheSkipsBackend) {
  TempDir dir;
  const auto cache = dir / "emb.jsonl";
  {
    Embedder e(std::make_shared<ScriptedEmbeddingBackend>(std::map<std::string, std::vector<double>>{{"a", {1, 1}}}),
               cache);
    e.embed({"a"}, "m");
  }
  auto backend = std::make_shared<ScriptedEmbeddingBackend>(std::map<std::string, std::vector<double>>{});
  Embedder again(backend, cache);
  const auto v = again.embed({"a"}, "m");
  EXPECT_EQ(backend->calls(), 0u);
  EXPECT_NEAR(v[0].values[0], 1 / std::sqrt(2.0), 1e-12);
}

TEST(Embedder, RecordReplayIsByteIdentical) {
  TempDir dir;
  const auto path = dir / "emb_cassette.jsonl";
  std::vector<EmbeddingVector> recorded;
  {
    auto cassette = std::make_shared<Cassette>();
    cassette->attach(path);
    Embedder e(std::make_shared<RecordingEmbeddingBackend>(std::make_shared<HashingEmbeddingBackend>(16), cassette));
    recorded = e.embed({"Tenant indemnifies Landlord.", "No indemnification."}, "hashing-16");
  }
  for (int i = 0; i < 2; ++i) {
    Embedder e(std::make_shared<ReplayEmbeddingBackend>(Cassette::load(path)));
    const auto replayed = e.embed({"Tenant indemnifies Landlord.", "No indemnification."}, "hashing-16");
    EXPECT_EQ(replayed, recorded);
    EXPECT_EQ(nlohmann::json(replayed[0].values).dump(), nlohmann::json(recorded[0].values).dump());
  }
  Embedder e(std::make_shared<ReplayEmbeddingBackend>(Cassette::load(path)));
  EXPECT_THROW(e.embed({"unseen"}, "hashing-16"), Error);
}

TEST(HashingBackend, DeterministicAndWordSensitive) {
  HashingEmbeddingBackend h(32);
  EXPECT_EQ(h.embed_one("Tenant indemnifies Landlord"), h.embed_one("tenant, INDEMNIFIES landlord!"));
  EXPECT_NE(h.embed_one("Tenant indemnifies Landlord"), h.embed_one("No indemnification"));
  EXPECT_EQ(h.embed_one("").size(), 32u);
}
