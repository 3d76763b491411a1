#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "caf/artifacts.hpp"
#include "caf/baseline.hpp"
#include "caf/canonicalize.hpp"
#include "caf/corpus.hpp"
#include "caf/error.hpp"
#include "caf/eval.hpp"
#include "caf/providers.hpp"
#include "caf/templating.hpp"
#include "caf/util.hpp"

// Batch experiments: resolve a run configuration against an artifact
// directory, drive a provider over every labelled clause, and write
// reproducible JSON and text reports.
namespace caf {

enum class ProviderMode { live, record, replay, mock };

inline const char* to_string(ProviderMode m) {
  switch (m) {
    case ProviderMode::live: return "live";
    case ProviderMode::record: return "record";
    case ProviderMode::replay: return "replay";
    case ProviderMode::mock: return "mock";
  }
  return "live";
}

inline ProviderMode provider_mode_from_string(std::string_view s) {
  if (s == "live") return ProviderMode::live;
  if (s == "record") return ProviderMode::record;
  if (s == "replay") return ProviderMode::replay;
  if (s == "mock") return ProviderMode::mock;
  throw Error(ErrorKind::config, "unknown provider mode: " + std::string(s));
}

struct ProviderConfig {
  ProviderMode mode = ProviderMode::live;
  std::optional<std::string> cassette_path;
  std::string model = "gpt-3.5-turbo";
  double temperature = kDefaultTemperature;
  std::optional<int> max_tokens = kDefaultMaxTokens;
  int parallelism = 4;
  std::optional<std::string> mock_script;  // mock mode, or the source when recording from a mock
  ProviderMode record_source = ProviderMode::live;
  std::string embedding_model = "text-embedding-ada-002";
  std::string embedding_backend = "openai";  // "openai" or "hashing" (offline, deterministic)
  std::optional<std::string> embedding_cache_path;
};

struct ScoringConfig {
  CanonicalizeOptions canonicalize;
  ExampleAnswerStyle example_answer_style = ExampleAnswerStyle::option_text;
};

struct RunConfig {
  std::string artifacts_dir = ".";
  std::string dataset_path;
  std::optional<std::string> question_id;
  std::string template_id;
  std::string option_set_id;
  std::vector<std::string> example_set_ids;
  std::optional<std::string> synonym_table_id;
  std::optional<std::uint64_t> shuffle_seed;
  ProviderConfig provider;
  ScoringConfig scoring;
  std::string output_path;

  // Relative paths resolve against this directory; not part of the echo.
  std::filesystem::path base_dir = ".";

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
};

namespace detail {

template <class T>
std::optional<T> optional_field(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<T>();
}

template <class T>
nlohmann::json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j, std::filesystem::path base_dir = ".") {
  RunConfig c;
  try {
    c.base_dir = std::move(base_dir);
    c.artifacts_dir = j.value("artifacts_dir", std::string("."));
    c.dataset_path = j.value("dataset_path", std::string());
    c.question_id = detail::optional_field<std::string>(j, "question_id");
    c.template_id = j.value("template_id", std::string());
    c.option_set_id = j.value("option_set_id", std::string());
    c.example_set_ids = j.value("example_set_ids", std::vector<std::string>{});
    c.synonym_table_id = detail::optional_field<std::string>(j, "synonym_table_id");
    c.shuffle_seed = detail::optional_field<std::uint64_t>(j, "shuffle_seed");
    c.output_path = j.value("output_path", std::string());
    if (auto it = j.find("provider"); it != j.end()) {
      const auto& p = *it;
      c.provider.mode = provider_mode_from_string(p.value("mode", std::string("live")));
      c.provider.cassette_path = detail::optional_field<std::string>(p, "cassette_path");
      c.provider.model = p.value("model", c.provider.model);
      c.provider.temperature = p.value("temperature", c.provider.temperature);
      if (p.contains("max_tokens")) c.provider.max_tokens = detail::optional_field<int>(p, "max_tokens");
      c.provider.parallelism = p.value("parallelism", c.provider.parallelism);
      c.provider.mock_script = detail::optional_field<std::string>(p, "mock_script");
      c.provider.record_source = provider_mode_from_string(p.value("record_source", std::string("live")));
      c.provider.embedding_model = p.value("embedding_model", c.provider.embedding_model);
      c.provider.embedding_backend = p.value("embedding_backend", c.provider.embedding_backend);
      c.provider.embedding_cache_path = detail::optional_field<std::string>(p, "embedding_cache_path");
    }
    if (auto it = j.find("scoring"); it != j.end()) {
      const auto& s = *it;
      if (s.contains("preambles")) {
        c.scoring.canonicalize.normalize.preambles = s.at("preambles").get<std::vector<std::string>>();
      }
      if (s.contains("segment_markers")) {
        c.scoring.canonicalize.segment_markers = s.at("segment_markers").get<std::vector<std::string>>();
      }
      const auto style = s.value("example_answer_style", std::string("option_text"));
      if (style == "option_text") {
        c.scoring.example_answer_style = ExampleAnswerStyle::option_text;
      } else if (style == "ordinal") {
        c.scoring.example_answer_style = ExampleAnswerStyle::ordinal;
      } else {
        throw Error(ErrorKind::config, "unknown example_answer_style: " + style);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
  return run_config_from_json(j, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

/// The echo embedded in reports. output_path is left out: it names the
/// report itself and would make reports differ by where they were written.
inline nlohmann::json to_json(const RunConfig& c) {
  const auto& p = c.provider;
  return {
      {"artifacts_dir", c.artifacts_dir},
      {"dataset_path", c.dataset_path},
      {"question_id", detail::optional_json(c.question_id)},
      {"template_id", c.template_id},
      {"option_set_id", c.option_set_id},
      {"example_set_ids", c.example_set_ids},
      {"synonym_table_id", detail::optional_json(c.synonym_table_id)},
      {"shuffle_seed", detail::optional_json(c.shuffle_seed)},
      {"provider",
       {{"mode", to_string(p.mode)},
        {"cassette_path", detail::optional_json(p.cassette_path)},
        {"model", p.model},
        {"temperature", p.temperature},
        {"max_tokens", detail::optional_json(p.max_tokens)},
        {"parallelism", p.parallelism},
        {"mock_script", detail::optional_json(p.mock_script)},
        {"record_source", to_string(p.record_source)},
        {"embedding_model", p.embedding_model},
        {"embedding_backend", p.embedding_backend},
        {"embedding_cache_path", detail::optional_json(p.embedding_cache_path)}}},
      {"scoring",
       {{"preambles", c.scoring.canonicalize.normalize.preambles},
        {"segment_markers", c.scoring.canonicalize.segment_markers},
        {"example_answer_style",
         c.scoring.example_answer_style == ExampleAnswerStyle::option_text ? "option_text" : "ordinal"}}},
  };
}

/// Checks the fields every command needs. `needs_template` is false for the
/// baseline, which never renders a prompt.
inline void validate(const RunConfig& c, bool needs_template = true) {
  if (c.dataset_path.empty()) throw Error(ErrorKind::config, "dataset_path is required");
  if (needs_template && c.template_id.empty()) throw Error(ErrorKind::config, "template_id is required");
  if (c.provider.parallelism < 1) throw Error(ErrorKind::config, "provider.parallelism must be >= 1");
  if (c.provider.temperature < 0.0 || c.provider.temperature > 2.0) {
    throw Error(ErrorKind::config, "provider.temperature must be in [0, 2]");
  }
  if (c.provider.max_tokens && *c.provider.max_tokens <= 0) throw Error(ErrorKind::config, "max_tokens must be positive");
  const auto mode = c.provider.mode;
  if ((mode == ProviderMode::record || mode == ProviderMode::replay) && !c.provider.cassette_path) {
    throw Error(ErrorKind::config, std::string(to_string(mode)) + " mode requires provider.cassette_path");
  }
  if (mode == ProviderMode::replay && !std::filesystem::exists(c.resolve(*c.provider.cassette_path))) {
    throw Error(ErrorKind::config, "cassette not found: " + c.resolve(*c.provider.cassette_path).string());
  }
  if (mode == ProviderMode::record &&
      (c.provider.record_source == ProviderMode::record || c.provider.record_source == ProviderMode::replay)) {
    throw Error(ErrorKind::config, "record_source must be live or mock");
  }
  if (c.provider.embedding_backend != "openai" && c.provider.embedding_backend != "hashing") {
    throw Error(ErrorKind::config, "unknown embedding_backend: " + c.provider.embedding_backend);
  }
}

// ---------------------------------------------------------------------------
// Provider construction

using TransportFactory = std::function<std::shared_ptr<Transport>(const std::string& base_url)>;

struct RunEnvironment {
  TransportFactory transport;  // required for live mode only
  EndpointSettings endpoint = endpoint_from_env();
  Sleeper sleeper = real_sleeper();
  Cassette::Clock clock = utc_now;
  // replaces the configured embedding backend when set (tests, offline runs)
  std::function<std::shared_ptr<EmbeddingBackend>()> embedding_source;
};

namespace detail {

inline std::shared_ptr<ChatProvider> make_mock(const RunConfig& c) {
  if (!c.provider.mock_script) return std::make_shared<MockChatProvider>();
  const auto path = c.resolve(*c.provider.mock_script);
  try {
    return MockChatProvider::from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
}

inline std::shared_ptr<Transport> make_transport(const RunEnvironment& env) {
  if (!env.transport) throw Error(ErrorKind::config, "live mode needs an HTTP transport");
  return env.transport(env.endpoint.base_url);
}

}  // namespace detail

inline std::shared_ptr<ChatProvider> make_chat_provider(const RunConfig& c, const RunEnvironment& env) {
  auto live = [&] {
    auto backoff = std::make_shared<Backoff>(RetryPolicy{}, env.sleeper);
    return std::make_shared<OpenAIChatProvider>(detail::make_transport(env), env.endpoint, backoff);
  };
  switch (c.provider.mode) {
    case ProviderMode::live: return live();
    case ProviderMode::mock: return detail::make_mock(c);
    case ProviderMode::replay:
      return std::make_shared<ReplayChatProvider>(Cassette::load(c.resolve(*c.provider.cassette_path)));
    case ProviderMode::record: {
      auto cassette = std::make_shared<Cassette>();
      cassette->attach(c.resolve(*c.provider.cassette_path), env.clock);
      std::shared_ptr<ChatProvider> inner =
          c.provider.record_source == ProviderMode::mock ? detail::make_mock(c) : std::shared_ptr<ChatProvider>(live());
      return std::make_shared<RecordingChatProvider>(std::move(inner), std::move(cassette));
    }
  }
  throw Error(ErrorKind::config, "unsupported provider mode");
}

inline std::shared_ptr<Embedder> make_embedder(const RunConfig& c, const RunEnvironment& env) {
  auto source = [&]() -> std::shared_ptr<EmbeddingBackend> {
    if (env.embedding_source) return env.embedding_source();
    if (c.provider.embedding_backend == "hashing") return std::make_shared<HashingEmbeddingBackend>();
    auto backoff = std::make_shared<Backoff>(RetryPolicy{}, env.sleeper);
    return std::make_shared<OpenAIEmbeddingBackend>(detail::make_transport(env), env.endpoint, backoff);
  };
  std::shared_ptr<EmbeddingBackend> backend;
  switch (c.provider.mode) {
    case ProviderMode::live:
    case ProviderMode::mock:
      backend = source();
      break;
    case ProviderMode::replay:
      backend = std::make_shared<ReplayEmbeddingBackend>(Cassette::load(c.resolve(*c.provider.cassette_path)));
      break;
    case ProviderMode::record: {
      auto cassette = std::make_shared<Cassette>();
      cassette->attach(c.resolve(*c.provider.cassette_path), env.clock);
      backend = std::make_shared<RecordingEmbeddingBackend>(source(), std::move(cassette));
      break;
    }
  }
  std::optional<std::filesystem::path> cache;
  if (c.provider.embedding_cache_path) cache = c.resolve(*c.provider.embedding_cache_path);
  return std::make_shared<Embedder>(std::move(backend), cache);
}

// ---------------------------------------------------------------------------
// Run resolution

struct RunContext {
  ArtifactStore artifacts;
  Dataset dataset;
  Question question;
  std::optional<PromptTemplate> tmpl;
  OptionSet options;
  std::vector<ExampleSet> example_sets;
  std::optional<SynonymTable> synonyms;
  std::map<std::string, std::string> artifact_hashes;
};

inline RunContext resolve_run(const RunConfig& c, bool needs_template = true) {
  validate(c, needs_template);
  RunContext ctx;
  ctx.artifacts = ArtifactStore::load(c.resolve(c.artifacts_dir));
  const auto dataset_path = c.resolve(c.dataset_path);
  const auto dataset_bytes = read_file(dataset_path);
  {
    std::istringstream in(dataset_bytes);
    try {
      ctx.dataset = parse_dataset(in);
    } catch (const Error& e) {
      throw Error(e.kind(), dataset_path.string() + ": " + e.what());
    }
  }
  ctx.artifact_hashes["dataset"] = sha256_hex(dataset_bytes);

  const auto question_id = c.question_id.value_or(ctx.dataset.question_id);
  const auto& q = ctx.artifacts.question(question_id);
  ctx.question = q.value;
  ctx.artifact_hashes["questions"] = q.sha256;

  const auto option_set_id = c.option_set_id.empty() ? ctx.question.option_set_id : c.option_set_id;
  const auto& os = ctx.artifacts.option_set(option_set_id);
  ctx.options = os.value;
  ctx.artifact_hashes["option_set:" + option_set_id] = os.sha256;
  if (c.shuffle_seed) ctx.options = shuffle_options(ctx.options, *c.shuffle_seed);

  for (const auto& l : ctx.dataset.labels) {
    for (const auto& id : l.option_ids) {
      if (l.question_id == ctx.question.id && !ctx.options.contains(id)) {
        throw Error(ErrorKind::validation, "gold label for " + l.clause_id + " names option " + id +
                                               " which is not in option set " + option_set_id);
      }
    }
  }

  if (needs_template) {
    const auto& t = ctx.artifacts.template_(c.template_id);
    ctx.tmpl = t.value;
    ctx.artifact_hashes["template:" + c.template_id] = t.sha256;
  }
  for (const auto& id : c.example_set_ids) {
    const auto& e = ctx.artifacts.example_set(id);
    validate(e.value, ctx.dataset, ctx.options, ctx.question.mode);
    ctx.example_sets.push_back(e.value);
    ctx.artifact_hashes["example_set:" + id] = e.sha256;
  }
  const auto synonym_id = c.synonym_table_id ? c.synonym_table_id : ctx.options.synonym_table_id;
  if (synonym_id) {
    const auto& s = ctx.artifacts.synonym_table(*synonym_id);
    ctx.synonyms = s.value;
    ctx.artifact_hashes["synonym_table:" + *synonym_id] = s.sha256;
  }
  if (c.provider.mode == ProviderMode::replay) {
    ctx.artifact_hashes["cassette"] = sha256_hex(read_file(c.resolve(*c.provider.cassette_path)));
  }
  return ctx;
}

/// The conversation sent for one clause: template render plus any seeded
/// examples.
inline RenderedConversation build_conversation(const RunContext& ctx, const Clause& clause,
                                               ExampleAnswerStyle style = ExampleAnswerStyle::option_text) {
  const Question* q = uses_question(*ctx.tmpl) ? &ctx.question : nullptr;
  auto conv = render(*ctx.tmpl, ctx.options, clause, q);
  return seed_with_examples(conv, ctx.example_sets, *ctx.tmpl, ctx.options, ctx.dataset, q, style);
}

inline ChatRequest build_request(const ProviderConfig& p, const RenderedConversation& conv) {
  ChatRequest r;
  r.model = p.model;
  r.temperature = p.temperature;
  r.max_tokens = p.max_tokens;
  r.messages = conv.messages;
  return r;
}

/// One generation pass over every clause that has a gold label for the
/// run's question. Records come back in dataset order.
inline std::vector<EvalRecord> run_generation(const RunContext& ctx, const RunConfig& c, ChatProvider& provider) {
  std::vector<const Clause*> clauses;
  for (const auto& clause : ctx.dataset.clauses) {
    if (ctx.dataset.find_label(clause.id, ctx.question.id)) clauses.push_back(&clause);
  }
  std::vector<EvalRecord> records(clauses.size());
  parallel_for(clauses.size(), static_cast<std::size_t>(c.provider.parallelism), [&](std::size_t i) {
    const Clause& clause = *clauses[i];
    const auto conv = build_conversation(ctx, clause, c.scoring.example_answer_style);
    const auto response = provider.chat_complete(build_request(c.provider, conv));
    const auto result = canonicalize(response.text, ctx.options, ctx.tmpl->escape_phrases, ctx.synonyms,
                                     ctx.tmpl->selection_mode, c.scoring.canonicalize);
    EvalRecord& r = records[i];
    r.clause_id = clause.id;
    r.raw = response.text;
    r.answer = result.answer;
    r.trace = result.trace;
    r.gold = *ctx.dataset.find_label(clause.id, ctx.question.id);
    r.correct = score(r.answer, r.gold, ctx.question);
  });
  return records;
}

// ---------------------------------------------------------------------------
// Commands

inline constexpr char kScoringConvention[] =
    "escape answers are scored correct iff the gold label is marked insufficient";

struct CommandResult {
  int exit_code = 0;
  nlohmann::json report;
  std::string table;
  std::string error;
};

namespace detail {

inline std::string run_label(const RunConfig& c) {
  std::string label = c.template_id.empty() ? "baseline" : c.template_id;
  label += "/" + c.option_set_id;
  for (const auto& e : c.example_set_ids) label += "+" + e;
  return label;
}

inline void write_reports(const RunConfig& c, const CommandResult& r) {
  if (c.output_path.empty()) return;
  std::filesystem::path json_path = c.resolve(c.output_path);
  write_file(json_path, r.report.dump(2) + "\n");
  if (!r.table.empty()) {
    auto txt = json_path;
    txt.replace_extension(".txt");
    write_file(txt, r.table);
  }
}

inline nlohmann::json records_json(const std::vector<EvalRecord>& records) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : records) out.push_back(to_json(r));
  return out;
}

inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::config:
    case ErrorKind::not_found:
    case ErrorKind::parse:
    case ErrorKind::validation:
    case ErrorKind::io:
      return 2;
    default:
      return 3;
  }
}

template <class F>
CommandResult guarded(F body) {
  try {
    return body();
  } catch (const Error& e) {
    CommandResult r;
    r.exit_code = exit_code_for(e);
    r.error = std::string(to_string(e.kind())) + " error: " + e.what();
    return r;
  }
}

}  // namespace detail

inline CommandResult cmd_eval(RunConfig c, const RunEnvironment& env) {
  return detail::guarded([&] {
    auto ctx = resolve_run(c);
    if (c.option_set_id.empty()) c.option_set_id = ctx.options.id;
    auto provider = make_chat_provider(c, env);
    const auto records = run_generation(ctx, c, *provider);
    CommandResult r;
    nlohmann::json report{{"kind", "eval"},
                          {"config", to_json(c)},
                          {"artifact_hashes", ctx.artifact_hashes},
                          {"question", to_json(ctx.question)},
                          {"scoring_convention", kScoringConvention},
                          {"records", detail::records_json(records)}};
    if (!records.empty()) {
      const auto m = compute_metrics(records, ctx.options);
      report["metrics"] = to_json(m);
      r.table = format_metrics_table({{detail::run_label(c), m}}, ctx.options);
    } else {
      report["metrics"] = nullptr;
    }
    r.report = std::move(report);
    detail::write_reports(c, r);
    return r;
  });
}

inline CommandResult cmd_baseline(RunConfig c, const RunEnvironment& env) {
  return detail::guarded([&] {
    auto ctx = resolve_run(c, /*needs_template=*/false);
    if (c.option_set_id.empty()) c.option_set_id = ctx.options.id;
    auto embedder = make_embedder(c, env);
    const auto run = run_baseline(ctx.dataset, ctx.options, ctx.question, *embedder, c.provider.embedding_model,
                                  static_cast<std::size_t>(c.provider.parallelism));
    CommandResult r;
    nlohmann::json predictions = nlohmann::json::array();
    for (const auto& p : run.predictions) {
      predictions.push_back({{"clause_id", p.clause_id}, {"scores", p.scores}, {"predicted", p.predicted}});
    }
    nlohmann::json report{{"kind", "baseline"},
                          {"config", to_json(c)},
                          {"artifact_hashes", ctx.artifact_hashes},
                          {"question", to_json(ctx.question)},
                          {"scoring_convention", kScoringConvention},
                          {"records", detail::records_json(run.run.records)},
                          {"predictions", std::move(predictions)},
                          {"failures", run.failures}};
    if (!run.run.records.empty()) {
      const auto m = compute_metrics(run.run.records, ctx.options);
      report["metrics"] = to_json(m);
      r.table = format_metrics_table({{"baseline:" + c.provider.embedding_model + "/" + c.option_set_id, m}},
                                     ctx.options);
    } else {
      report["metrics"] = nullptr;
    }
    r.report = std::move(report);
    detail::write_reports(c, r);
    return r;
  });
}

/// Runs the same configuration k times against one provider instance, so
/// a replay cassette must hold k responses per request.
inline CommandResult cmd_consistency(RunConfig c, int k, const RunEnvironment& env) {
  return detail::guarded([&] {
    if (k < 2) throw Error(ErrorKind::config, "consistency needs k >= 2, got " + std::to_string(k));
    auto ctx = resolve_run(c);
    if (c.option_set_id.empty()) c.option_set_id = ctx.options.id;
    auto provider = make_chat_provider(c, env);
    std::vector<std::vector<EvalRecord>> runs;
    nlohmann::json per_run = nlohmann::json::array();
    std::vector<std::pair<std::string, Metrics>> rows;
    for (int i = 0; i < k; ++i) {
      try {
        runs.push_back(run_generation(ctx, c, *provider));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::replay_miss) throw;
        throw Error(ErrorKind::replay_miss, "insufficient recorded entries for run " + std::to_string(i + 1) +
                                                " of " + std::to_string(k) + ": " + e.what());
      }
      if (!runs.back().empty()) {
        const auto m = compute_metrics(runs.back(), ctx.options);
        per_run.push_back(to_json(m));
        rows.emplace_back("run " + std::to_string(i + 1), m);
      }
    }
    const auto report = consistency(runs);
    CommandResult r;
    r.report = {{"kind", "consistency"},
                {"config", to_json(c)},
                {"artifact_hashes", ctx.artifact_hashes},
                {"k", k},
                {"consistency", to_json(report)},
                {"runs", std::move(per_run)}};
    r.table = format_metrics_table(rows, ctx.options);
    char line[96];
    std::snprintf(line, sizeof line, "changed clauses: %zu/%d, stability %.4f\n", report.changed_clauses.size(),
                  report.total, report.stability);
    r.table += line;
    detail::write_reports(c, r);
    return r;
  });
}

}  // namespace caf
