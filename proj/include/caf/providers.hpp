#pragma once

#include <nlohmann/json.hpp>

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "caf/error.hpp"
#include "caf/templating.hpp"
#include "caf/util.hpp"

// Chat-completion and embedding backends behind small interfaces, plus the
// cassette machinery that makes runs replayable without a network.
namespace caf {

inline constexpr double kDefaultTemperature = 0.0;
inline constexpr int kDefaultMaxTokens = 64;

struct ChatRequest {
  std::string model;
  double temperature = kDefaultTemperature;
  std::optional<int> max_tokens = kDefaultMaxTokens;
  std::vector<Message> messages;

  bool operator==(const ChatRequest&) const = default;
};

inline void validate(const ChatRequest& r) {
  if (r.messages.empty()) throw Error(ErrorKind::validation, "chat request has no messages");
  if (r.messages.back().role != Role::user) throw Error(ErrorKind::validation, "last chat message must be from the user");
  if (!(r.temperature >= 0.0 && r.temperature <= 2.0)) {
    throw Error(ErrorKind::validation, "temperature must be in [0, 2]");
  }
  if (r.max_tokens && *r.max_tokens <= 0) throw Error(ErrorKind::validation, "max_tokens must be positive");
}

struct Usage {
  int prompt_tokens = 0;
  int completion_tokens = 0;

  bool operator==(const Usage&) const = default;
};

struct ChatResponse {
  std::string text;
  std::string finish_reason = "stop";
  std::optional<Usage> usage;

  bool operator==(const ChatResponse&) const = default;
};

inline nlohmann::json to_json(const ChatRequest& r) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : r.messages) messages.push_back(to_json(m));
  nlohmann::json j{{"model", r.model}, {"temperature", r.temperature}, {"messages", std::move(messages)}};
  j["max_tokens"] = r.max_tokens ? nlohmann::json(*r.max_tokens) : nlohmann::json(nullptr);
  return j;
}

inline ChatRequest chat_request_from_json(const nlohmann::json& j) {
  ChatRequest r;
  r.model = j.at("model").get<std::string>();
  r.temperature = j.value("temperature", kDefaultTemperature);
  if (auto it = j.find("max_tokens"); it != j.end()) {
    r.max_tokens = it->is_null() ? std::nullopt : std::optional<int>(it->get<int>());
  }
  for (const auto& m : j.at("messages")) {
    r.messages.push_back({role_from_string(m.at("role").get<std::string>()), m.at("content").get<std::string>()});
  }
  return r;
}

inline nlohmann::json to_json(const ChatResponse& r) {
  nlohmann::json j{{"text", r.text}, {"finish_reason", r.finish_reason}};
  if (r.usage) {
    j["usage"] = {{"prompt_tokens", r.usage->prompt_tokens}, {"completion_tokens", r.usage->completion_tokens}};
  }
  return j;
}

inline ChatResponse chat_response_from_json(const nlohmann::json& j) {
  ChatResponse r;
  r.text = j.at("text").get<std::string>();
  r.finish_reason = j.value("finish_reason", "stop");
  if (auto it = j.find("usage"); it != j.end() && it->is_object()) {
    r.usage = Usage{it->value("prompt_tokens", 0), it->value("completion_tokens", 0)};
  }
  return r;
}

// ---------------------------------------------------------------------------
// Fingerprints

/// Content hash over every semantic field of the request. The hashed form is
/// rebuilt from the parsed fields, so input key order never matters.
inline std::string fingerprint(const ChatRequest& r) {
  nlohmann::json canonical = to_json(r);  // std::map-backed: keys sorted
  canonical["kind"] = "chat";
  return sha256_hex(canonical.dump());
}

inline std::string fingerprint_json(const nlohmann::json& request) { return fingerprint(chat_request_from_json(request)); }

inline std::string embedding_fingerprint(const std::string& model, const std::string& text) {
  const nlohmann::json canonical{{"kind", "embedding"}, {"model", model}, {"input", text}};
  return sha256_hex(canonical.dump());
}

// ---------------------------------------------------------------------------
// Transport and retry

struct HttpResponse {
  int status = 0;  // 0 when no HTTP response was received
  std::string body;
  std::string error;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post_json(const std::string& path, const std::string& body, const Headers& headers) = 0;
};

// Throws the error that matches a failed HTTP exchange.
inline void raise_for_status(const HttpResponse& r, const std::string& what) {
  if (r.status == 0) throw Error(ErrorKind::network, what + ": " + (r.error.empty() ? "no response" : r.error));
  if (r.status >= 200 && r.status < 300) return;
  const std::string detail = what + ": HTTP " + std::to_string(r.status);
  if (r.status == 401 || r.status == 403) throw Error(ErrorKind::auth, detail);
  if (r.status == 429) throw Error(ErrorKind::rate_limit, detail);
  if (r.status == 408 || r.status >= 500) throw Error(ErrorKind::network, detail);
  throw Error(ErrorKind::http, detail + ": " + r.body.substr(0, 200));
}

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{500};
  double jitter = 0.25;  // fraction of the nominal delay, applied +/-
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

/// Backoff state shared by every request a provider makes.
class Backoff {
 public:
  explicit Backoff(RetryPolicy policy = {}, Sleeper sleeper = real_sleeper(), std::uint64_t seed = 0x5eed)
      : policy_(policy), sleeper_(std::move(sleeper)), rng_(seed) {}

  const RetryPolicy& policy() const { return policy_; }

  // Wait before retry number `attempt` (1-based): base * 2^(attempt-1) +/- jitter.
  std::chrono::milliseconds delay_for(int attempt) {
    const double nominal = static_cast<double>(policy_.base_delay.count()) * std::ldexp(1.0, attempt - 1);
    double factor = 1.0;
    if (policy_.jitter > 0) {
      std::lock_guard lock(mutex_);
      std::uniform_real_distribution<double> dist(-policy_.jitter, policy_.jitter);
      factor += dist(rng_);
    }
    return std::chrono::milliseconds(static_cast<std::int64_t>(std::llround(nominal * factor)));
  }

  template <class F>
  auto run(F&& attempt_fn) -> decltype(attempt_fn()) {
    for (int attempt = 1;; ++attempt) {
      try {
        return attempt_fn();
      } catch (const Error& e) {
        if (!e.transient() || attempt >= policy_.max_attempts) throw;
        sleeper_(delay_for(attempt));
      }
    }
  }

 private:
  RetryPolicy policy_;
  Sleeper sleeper_;
  std::mutex mutex_;
  std::mt19937_64 rng_;
};

struct EndpointSettings {
  std::string api_key;
  std::string base_url = "https://api.openai.com/v1";
};

/// Reads CAF_API_KEY and CAF_BASE_URL.
inline EndpointSettings endpoint_from_env() {
  EndpointSettings s;
  if (const char* key = std::getenv("CAF_API_KEY")) s.api_key = key;
  if (const char* base = std::getenv("CAF_BASE_URL"); base && *base) s.base_url = base;
  return s;
}

// ---------------------------------------------------------------------------
// Chat providers

class ChatProvider {
 public:
  virtual ~ChatProvider() = default;
  virtual ChatResponse chat_complete(const ChatRequest& request) = 0;
};

/// OpenAI-compatible POST {base}/chat/completions.
class OpenAIChatProvider : public ChatProvider {
 public:
  OpenAIChatProvider(std::shared_ptr<Transport> transport, EndpointSettings settings,
                     std::shared_ptr<Backoff> backoff = std::make_shared<Backoff>())
      : transport_(std::move(transport)), settings_(std::move(settings)), backoff_(std::move(backoff)) {}

  ChatResponse chat_complete(const ChatRequest& request) override {
    validate(request);
    if (settings_.api_key.empty()) throw Error(ErrorKind::auth, "CAF_API_KEY is not set");
    nlohmann::json body{{"model", request.model}, {"temperature", request.temperature}};
    if (request.max_tokens) body["max_tokens"] = *request.max_tokens;
    body["messages"] = nlohmann::json::array();
    for (const auto& m : request.messages) body["messages"].push_back(to_json(m));
    const auto payload = body.dump();
    const Headers headers{{"Authorization", "Bearer " + settings_.api_key}};
    return backoff_->run([&] {
      const auto response = transport_->post_json("/chat/completions", payload, headers);
      raise_for_status(response, "chat completion");
      return parse(response.body);
    });
  }

  static ChatResponse parse(const std::string& body) {
    try {
      const auto j = nlohmann::json::parse(body);
      const auto& choice = j.at("choices").at(0);
      ChatResponse r;
      r.finish_reason = choice.value("finish_reason", "stop");
      const auto& content = choice.at("message").at("content");
      if (content.is_string()) {
        r.text = content.get<std::string>();
      } else if (r.finish_reason == "stop") {
        throw Error(ErrorKind::malformed_response, "chat completion: stop without message content");
      }
      if (auto it = j.find("usage"); it != j.end() && it->is_object()) {
        r.usage = Usage{it->value("prompt_tokens", 0), it->value("completion_tokens", 0)};
      }
      return r;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::malformed_response, std::string("chat completion body: ") + e.what());
    }
  }

 private:
  std::shared_ptr<Transport> transport_;
  EndpointSettings settings_;
  std::shared_ptr<Backoff> backoff_;
};

/// Scripted provider. Responses are looked up by exact fingerprint first,
/// then by the first rule whose needle occurs in the final user message,
/// then the default. Repeated calls cycle through a response list.
class MockChatProvider : public ChatProvider {
 public:
  struct Rule {
    std::string contains;
    std::vector<std::string> responses;
  };

  MockChatProvider() = default;

  void script(const std::string& fingerprint, std::vector<std::string> responses) {
    std::lock_guard lock(mutex_);
    by_fingerprint_[fingerprint] = std::move(responses);
  }
  void add_rule(Rule rule) {
    std::lock_guard lock(mutex_);
    rules_.push_back(std::move(rule));
  }
  void set_default(std::string text) {
    std::lock_guard lock(mutex_);
    default_ = std::move(text);
  }

  /// Script file: {"by_fingerprint":{fp:[...]}, "rules":[{"contains","responses"}], "default"}.
  static std::shared_ptr<MockChatProvider> from_json(const nlohmann::json& j) {
    auto mock = std::make_shared<MockChatProvider>();
    if (auto it = j.find("by_fingerprint"); it != j.end()) {
      for (const auto& [fp, list] : it->items()) mock->script(fp, list.get<std::vector<std::string>>());
    }
    if (auto it = j.find("rules"); it != j.end()) {
      for (const auto& r : *it) {
        mock->add_rule({r.at("contains").get<std::string>(), r.at("responses").get<std::vector<std::string>>()});
      }
    }
    if (auto it = j.find("default"); it != j.end() && it->is_string()) mock->set_default(it->get<std::string>());
    return mock;
  }

  ChatResponse chat_complete(const ChatRequest& request) override {
    validate(request);
    const auto fp = fingerprint(request);
    std::lock_guard lock(mutex_);
    const auto n = calls_[fp]++;
    if (auto it = by_fingerprint_.find(fp); it != by_fingerprint_.end() && !it->second.empty()) {
      return {it->second[n % it->second.size()], "stop", std::nullopt};
    }
    const auto& prompt = request.messages.back().content;
    for (const auto& rule : rules_) {
      if (!rule.responses.empty() && prompt.find(rule.contains) != std::string::npos) {
        return {rule.responses[n % rule.responses.size()], "stop", std::nullopt};
      }
    }
    if (default_) return {*default_, "stop", std::nullopt};
    throw Error(ErrorKind::replay_miss, "mock provider has no script for fingerprint " + fp);
  }

 private:
  std::mutex mutex_;
  std::map<std::string, std::vector<std::string>> by_fingerprint_;
  std::vector<Rule> rules_;
  std::optional<std::string> default_;
  std::map<std::string, std::size_t> calls_;
};

// ---------------------------------------------------------------------------
// Cassettes

/// Recorded responses keyed by request fingerprint, in call order. When
/// attached to a file, every append is written through immediately.
class Cassette {
 public:
  using Clock = std::function<std::string()>;

  Cassette() = default;

  static std::shared_ptr<Cassette> load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open cassette: " + path.string());
    auto cassette = std::make_shared<Cassette>();
    std::string line;
    std::size_t line_no = 0;
    std::map<std::string, std::map<std::size_t, nlohmann::json>> staged;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        const auto fp = j.at("fingerprint").get<std::string>();
        const auto index = j.at("index").get<std::size_t>();
        if (!staged[fp].emplace(index, j.at("response")).second) {
          throw Error(ErrorKind::parse, "duplicate index " + std::to_string(index) + " for " + fp);
        }
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      } catch (const Error& e) {
        throw Error(ErrorKind::parse, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    for (auto& [fp, by_index] : staged) {
      auto& list = cassette->entries_[fp];
      for (auto& [index, response] : by_index) {
        if (index != list.size()) {
          throw Error(ErrorKind::parse, path.string() + ": fingerprint " + fp + " has a gap at index " +
                                            std::to_string(list.size()));
        }
        list.push_back(std::move(response));
      }
    }
    return cassette;
  }

  /// Appends go to `path` from now on (the file is created or appended to).
  void attach(const std::filesystem::path& path, Clock clock = utc_now) {
    std::lock_guard lock(mutex_);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::binary | std::ios::app);
    if (!out_) throw Error(ErrorKind::io, "cannot write cassette: " + path.string());
    clock_ = std::move(clock);
  }

  std::size_t append(const std::string& fp, nlohmann::json response) {
    std::lock_guard lock(mutex_);
    auto& list = entries_[fp];
    const auto index = list.size();
    if (out_.is_open()) {
      nlohmann::ordered_json line;
      line["fingerprint"] = fp;
      line["index"] = index;
      line["response"] = response;
      line["recorded_at"] = clock_ ? clock_() : utc_now();
      out_ << line.dump() << '\n';
      out_.flush();
      if (!out_) throw Error(ErrorKind::io, "cassette write failed");
    }
    list.push_back(std::move(response));
    return index;
  }

  const nlohmann::json* get(const std::string& fp, std::size_t index) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(fp);
    if (it == entries_.end() || index >= it->second.size()) return nullptr;
    return &it->second[index];
  }

  std::size_t count(const std::string& fp) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(fp);
    return it == entries_.end() ? 0 : it->second.size();
  }

  std::size_t fingerprints() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::vector<nlohmann::json>> entries_;
  std::ofstream out_;
  Clock clock_;
};

/// Passes requests to `inner` and stores every response in the cassette.
class RecordingChatProvider : public ChatProvider {
 public:
  RecordingChatProvider(std::shared_ptr<ChatProvider> inner, std::shared_ptr<Cassette> cassette)
      : inner_(std::move(inner)), cassette_(std::move(cassette)) {}

  ChatResponse chat_complete(const ChatRequest& request) override {
    auto response = inner_->chat_complete(request);
    cassette_->append(fingerprint(request), to_json(response));
    return response;
  }

 private:
  std::shared_ptr<ChatProvider> inner_;
  std::shared_ptr<Cassette> cassette_;
};

/// Serves recorded responses in order; never touches the network.
class ReplayChatProvider : public ChatProvider {
 public:
  explicit ReplayChatProvider(std::shared_ptr<const Cassette> cassette) : cassette_(std::move(cassette)) {}

  ChatResponse chat_complete(const ChatRequest& request) override {
    validate(request);
    const auto fp = fingerprint(request);
    std::size_t index;
    {
      std::lock_guard lock(mutex_);
      index = cursor_[fp]++;
    }
    const auto* entry = cassette_->get(fp, index);
    if (!entry) {
      throw Error(ErrorKind::replay_miss, "replay miss: no recorded response #" + std::to_string(index) +
                                              " for fingerprint " + fp);
    }
    return chat_response_from_json(*entry);
  }

 private:
  std::shared_ptr<const Cassette> cassette_;
  std::mutex mutex_;
  std::map<std::string, std::size_t> cursor_;
};

// ---------------------------------------------------------------------------
// Embeddings

struct EmbeddingVector {
  std::vector<double> values;
  std::string model;

  bool operator==(const EmbeddingVector&) const = default;
};

/// Raw vectors from some backend, one per input text, same order.
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual std::vector<std::vector<double>> fetch(const std::vector<std::string>& texts, const std::string& model) = 0;
};

/// OpenAI-compatible POST {base}/embeddings.
class OpenAIEmbeddingBackend : public EmbeddingBackend {
 public:
  OpenAIEmbeddingBackend(std::shared_ptr<Transport> transport, EndpointSettings settings,
                         std::shared_ptr<Backoff> backoff = std::make_shared<Backoff>())
      : transport_(std::move(transport)), settings_(std::move(settings)), backoff_(std::move(backoff)) {}

  std::vector<std::vector<double>> fetch(const std::vector<std::string>& texts, const std::string& model) override {
    if (settings_.api_key.empty()) throw Error(ErrorKind::auth, "CAF_API_KEY is not set");
    const nlohmann::json body{{"model", model}, {"input", texts}};
    const auto payload = body.dump();
    const Headers headers{{"Authorization", "Bearer " + settings_.api_key}};
    return backoff_->run([&] {
      const auto response = transport_->post_json("/embeddings", payload, headers);
      raise_for_status(response, "embeddings");
      return parse(response.body, texts.size());
    });
  }

  static std::vector<std::vector<double>> parse(const std::string& body, std::size_t expected) {
    try {
      const auto j = nlohmann::json::parse(body);
      std::vector<std::vector<double>> out(expected);
      const auto& data = j.at("data");
      if (data.size() != expected) {
        throw Error(ErrorKind::malformed_response, "embeddings: expected " + std::to_string(expected) +
                                                       " vectors, got " + std::to_string(data.size()));
      }
      for (std::size_t i = 0; i < data.size(); ++i) {
        const auto index = data[i].value("index", i);
        if (index >= expected) throw Error(ErrorKind::malformed_response, "embeddings: index out of range");
        out[index] = data[i].at("embedding").get<std::vector<double>>();
      }
      return out;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::malformed_response, std::string("embeddings body: ") + e.what());
    }
  }

 private:
  std::shared_ptr<Transport> transport_;
  EndpointSettings settings_;
  std::shared_ptr<Backoff> backoff_;
};

/// Deterministic bag-of-words feature hashing. Texts sharing words get
/// correlated vectors, which is enough to exercise the baseline offline.
class HashingEmbeddingBackend : public EmbeddingBackend {
 public:
  explicit HashingEmbeddingBackend(std::size_t dimension = 64) : dimension_(dimension) {}

  std::vector<std::vector<double>> fetch(const std::vector<std::string>& texts, const std::string&) override {
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
  }

  std::vector<double> embed_one(const std::string& text) const {
    std::vector<double> v(dimension_, 0.0);
    std::string token;
    auto flush = [&] {
      if (token.empty()) return;
      std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
      for (unsigned char c : token) {
        h ^= c;
        h *= 1099511628211ULL;
      }
      v[h % dimension_] += (h >> 63) ? -1.0 : 1.0;
      token.clear();
    };
    for (char c : text) {
      if (std::isalnum(static_cast<unsigned char>(c))) {
        token += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      } else {
        flush();
      }
    }
    flush();
    bool all_zero = true;
    for (double x : v) all_zero = all_zero && x == 0.0;
    if (all_zero) v[0] = 1.0;
    return v;
  }

 private:
  std::size_t dimension_;
};

/// Fixed text -> vector table, for tests.
class ScriptedEmbeddingBackend : public EmbeddingBackend {
 public:
  explicit ScriptedEmbeddingBackend(std::map<std::string, std::vector<double>> table) : table_(std::move(table)) {}

  std::vector<std::vector<double>> fetch(const std::vector<std::string>& texts, const std::string&) override {
    std::lock_guard lock(mutex_);
    ++calls_;
    std::vector<std::vector<double>> out;
    for (const auto& t : texts) {
      auto it = table_.find(t);
      if (it == table_.end()) throw Error(ErrorKind::replay_miss, "no scripted embedding for text: " + t.substr(0, 60));
      out.push_back(it->second);
      ++texts_fetched_;
    }
    return out;
  }

  std::size_t calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
  }
  std::size_t texts_fetched() const {
    std::lock_guard lock(mutex_);
    return texts_fetched_;
  }

 private:
  std::map<std::string, std::vector<double>> table_;
  mutable std::mutex mutex_;
  std::size_t calls_ = 0;
  std::size_t texts_fetched_ = 0;
};

class RecordingEmbeddingBackend : public EmbeddingBackend {
 public:
  RecordingEmbeddingBackend(std::shared_ptr<EmbeddingBackend> inner, std::shared_ptr<Cassette> cassette)
      : inner_(std::move(inner)), cassette_(std::move(cassette)) {}

  std::vector<std::vector<double>> fetch(const std::vector<std::string>& texts, const std::string& model) override {
    auto vectors = inner_->fetch(texts, model);
    for (std::size_t i = 0; i < texts.size() && i < vectors.size(); ++i) {
      cassette_->append(embedding_fingerprint(model, texts[i]), nlohmann::json{{"embedding", vectors[i]}});
    }
    return vectors;
  }

 private:
  std::shared_ptr<EmbeddingBackend> inner_;
  std::shared_ptr<Cassette> cassette_;
};

/// Embeddings are deterministic per (model, text), so replay always serves
/// the first recorded vector.
class ReplayEmbeddingBackend : public EmbeddingBackend {
 public:
  explicit ReplayEmbeddingBackend(std::shared_ptr<const Cassette> cassette) : cassette_(std::move(cassette)) {}

  std::vector<std::vector<double>> fetch(const std::vector<std::string>& texts, const std::string& model) override {
    std::vector<std::vector<double>> out;
    for (const auto& t : texts) {
      const auto fp = embedding_fingerprint(model, t);
      const auto* entry = cassette_->get(fp, 0);
      if (!entry) throw Error(ErrorKind::replay_miss, "replay miss: no recorded embedding for fingerprint " + fp);
      out.push_back(entry->at("embedding").get<std::vector<double>>());
    }
    return out;
  }

 private:
  std::shared_ptr<const Cassette> cassette_;
};

/// Front end for embedding backends: unit-normalizes, validates shape, and
/// caches by (model, text) so each distinct text reaches the backend once.
class Embedder {
 public:
  explicit Embedder(std::shared_ptr<EmbeddingBackend> backend,
                    std::optional<std::filesystem::path> cache_file = std::nullopt)
      : backend_(std::move(backend)) {
    if (cache_file) {
      if (std::filesystem::exists(*cache_file)) load_cache(*cache_file);
      if (cache_file->has_parent_path()) std::filesystem::create_directories(cache_file->parent_path());
      cache_out_.open(*cache_file, std::ios::binary | std::ios::app);
      if (!cache_out_) throw Error(ErrorKind::io, "cannot write embedding cache: " + cache_file->string());
    }
  }

  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts, const std::string& model) {
    if (texts.empty()) throw Error(ErrorKind::validation, "embed needs at least one text");
    std::vector<std::string> missing;
    {
      std::lock_guard lock(mutex_);
      std::set<std::string> queued;
      for (const auto& t : texts) {
        const auto key = cache_key(model, t);
        if (!cache_.contains(key) && queued.insert(key).second) missing.push_back(t);
      }
    }
    if (!missing.empty()) {
      auto vectors = backend_->fetch(missing, model);
      if (vectors.size() != missing.size()) {
        throw Error(ErrorKind::malformed_response, "embedding backend returned " + std::to_string(vectors.size()) +
                                                       " vectors for " + std::to_string(missing.size()) + " texts");
      }
      std::lock_guard lock(mutex_);
      for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (vectors[i].empty()) throw Error(ErrorKind::dimension, "embedding backend returned an empty vector");
        if (vectors[i].size() != vectors.front().size() || (dimensions_.contains(model) && vectors[i].size() != dimensions_.at(model))) {
          throw Error(ErrorKind::dimension, "embedding backend returned vectors of differing dimension");
        }
      }
      for (std::size_t i = 0; i < vectors.size(); ++i) {
        auto unit = unit_normalize(std::move(vectors[i]));
        const auto key = cache_key(model, missing[i]);
        if (cache_out_.is_open()) {
          nlohmann::ordered_json line;
          line["model"] = model;
          line["text_hash"] = key;
          line["values"] = unit;
          cache_out_ << line.dump() << '\n';
        }
        cache_.emplace(key, std::move(unit));
      }
      if (cache_out_.is_open()) cache_out_.flush();
      dimensions_.emplace(model, cache_.at(cache_key(model, missing.front())).size());
    }
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    std::lock_guard lock(mutex_);
    for (const auto& t : texts) out.push_back({cache_.at(cache_key(model, t)), model});
    return out;
  }

  static std::vector<double> unit_normalize(std::vector<double> v) {
    double sq = 0.0;
    for (double x : v) {
      if (!std::isfinite(x)) throw Error(ErrorKind::malformed_response, "embedding contains a non-finite value");
      sq += x * x;
    }
    const double norm = std::sqrt(sq);
    if (norm == 0.0) throw Error(ErrorKind::malformed_response, "embedding is the zero vector");
    for (double& x : v) x /= norm;
    return v;
  }

  static std::string cache_key(const std::string& model, const std::string& text) {
    return sha256_hex(model + '\0' + text);
  }

 private:
  void load_cache(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        auto values = j.at("values").get<std::vector<double>>();
        dimensions_.emplace(j.at("model").get<std::string>(), values.size());
        cache_.emplace(j.at("text_hash").get<std::string>(), std::move(values));
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, path.string() + ": " + e.what());
      }
    }
  }

  std::shared_ptr<EmbeddingBackend> backend_;
  std::mutex mutex_;
  std::unordered_map<std::string, std::vector<double>> cache_;
  std::map<std::string, std::size_t> dimensions_;
  std::ofstream cache_out_;
};

}  // namespace caf
