#pragma once

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "caf/artifacts.hpp"
#include "caf/error.hpp"
#include "caf/pipeline.hpp"
#include "caf/session_store.hpp"

// HTTP service behind the exploration workbench. Bundled artifacts are
// read-only; edits arrive as inline templates or option sets and are kept
// as session snapshots.
namespace caf {

struct ServiceOptions {
  std::filesystem::path artifacts_dir = "data";
  std::filesystem::path store_path = "caf_sessions.jsonl";
  // provider and scoring settings; paths resolve against run.base_dir
  RunConfig run;
  std::optional<std::string> token;  // bearer token gate when set
  RunEnvironment env;
  SessionStore::Clock clock = utc_now;
};

inline int http_status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::not_found: return 404;
    case ErrorKind::parse:
    case ErrorKind::validation:
    case ErrorKind::config:
    case ErrorKind::placeholder:
    case ErrorKind::mode:
      return 400;
    case ErrorKind::io: return 500;
    default: return 502;  // provider failures
  }
}

class Service {
 public:
  explicit Service(ServiceOptions options)
      : options_(std::move(options)),
        artifacts_(ArtifactStore::load(options_.artifacts_dir)),
        store_(options_.store_path, options_.clock) {
    validate_provider();
    provider_ = make_chat_provider(options_.run, options_.env);
    for (const auto& run : store_.runs()) runs_[run.at("id").get<std::string>()] = run;
    run_seq_ = static_cast<int>(runs_.size());
    routes();
  }

  ~Service() {
    stop();
    std::lock_guard lock(threads_mutex_);
    for (auto& t : threads_) {
      if (t.joinable()) t.join();
    }
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds to `port` (0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(ErrorKind::config, "cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
    return bound;
  }

  /// Blocks until stop().
  void listen() { server_.listen_after_bind(); }

  void stop() {
    if (server_.is_running()) server_.stop();
  }

  void wait_until_ready() { server_.wait_until_ready(); }

  SessionStore& store() { return store_; }

 private:
  using Json = nlohmann::json;

  struct Resolved {
    PromptTemplate tmpl;
    OptionSet options;
    std::optional<int> template_snapshot;
    std::optional<int> option_set_snapshot;
    std::optional<SynonymTable> synonyms;
    std::optional<Question> question;
  };

  void validate_provider() {
    auto c = options_.run;
    if (c.dataset_path.empty()) c.dataset_path = "-";
    validate(c, /*needs_template=*/false);
  }

  // --- request helpers -----------------------------------------------------

  static Json body_json(const httplib::Request& req) {
    if (req.body.empty()) return Json::object();
    try {
      auto j = Json::parse(req.body);
      if (!j.is_object()) throw Error(ErrorKind::parse, "request body must be a JSON object");
      return j;
    } catch (const Json::exception& e) {
      throw Error(ErrorKind::parse, std::string("request body: ") + e.what());
    }
  }

  static void reply(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <class F>
  static httplib::Server::Handler guarded(F fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        reply(res, http_status_for(e.kind()), {{"error", to_string(e.kind())}, {"message", e.what()}});
      } catch (const Json::exception& e) {
        reply(res, 400, {{"error", "parse"}, {"message", e.what()}});
      }
    };
  }

  template <class T>
  static std::optional<T> opt(const Json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return it->get<T>();
  }

  std::pair<const Clause*, const Dataset*> find_clause(const std::string& id,
                                                       const std::optional<std::string>& dataset) const {
    for (const auto& [name, ds] : artifacts_.datasets()) {
      if (dataset && *dataset != name) continue;
      if (const auto* c = ds.value.find_clause(id)) return {c, &ds.value};
    }
    throw Error(ErrorKind::not_found, "unknown clause: " + id);
  }

  /// Template and option set from an inline object, a session snapshot
  /// version, or a bundled id, in that order of preference. Inline edits in
  /// a session are stored as new snapshots.
  Resolved resolve(const Json& body, const std::optional<std::string>& session_id, bool snapshot_inline) {
    Resolved r;
    if (body.contains("template") && !body.at("template").is_null()) {
      r.tmpl = template_from_json(body.at("template"));
      if (session_id && snapshot_inline) {
        r.template_snapshot = store_.add_snapshot(*session_id, "template", r.tmpl.id, to_json(r.tmpl)).version;
      }
    } else if (auto v = opt<int>(body, "template_snapshot")) {
      if (!session_id) throw Error(ErrorKind::validation, "template_snapshot needs session_id");
      r.tmpl = template_from_json(store_.snapshot(*session_id, "template", *v).value);
      r.template_snapshot = v;
    } else if (auto id = opt<std::string>(body, "template_id")) {
      r.tmpl = artifacts_.template_(*id).value;
    } else {
      throw Error(ErrorKind::validation, "one of template, template_snapshot or template_id is required");
    }

    if (body.contains("option_set") && !body.at("option_set").is_null()) {
      r.options = option_set_from_json(body.at("option_set"));
      if (session_id && snapshot_inline) {
        r.option_set_snapshot = store_.add_snapshot(*session_id, "option_set", r.options.id, to_json(r.options)).version;
      }
    } else if (auto v = opt<int>(body, "option_set_snapshot")) {
      if (!session_id) throw Error(ErrorKind::validation, "option_set_snapshot needs session_id");
      r.options = option_set_from_json(store_.snapshot(*session_id, "option_set", *v).value);
      r.option_set_snapshot = v;
    } else if (auto id = opt<std::string>(body, "option_set_id")) {
      r.options = artifacts_.option_set(*id).value;
    } else {
      throw Error(ErrorKind::validation, "one of option_set, option_set_snapshot or option_set_id is required");
    }

    const auto synonym_id = opt<std::string>(body, "synonym_table_id").value_or(r.options.synonym_table_id.value_or(""));
    if (!synonym_id.empty()) r.synonyms = artifacts_.synonym_table(synonym_id).value;

    const auto question_id = opt<std::string>(body, "question_id").value_or(r.options.question_id);
    if (artifacts_.questions().contains(question_id)) r.question = artifacts_.question(question_id).value;
    return r;
  }

  RenderedConversation render_for(const Json& body, const Resolved& r) const {
    const auto dataset = opt<std::string>(body, "dataset");
    Clause inline_clause;
    const Clause* clause = nullptr;
    const Dataset* corpus = nullptr;
    if (body.contains("clause") && !body.at("clause").is_null()) {
      const auto& c = body.at("clause");
      inline_clause.id = c.value("id", std::string("inline"));
      inline_clause.text = c.at("text").get<std::string>();
      inline_clause.clause_type = c.value("clause_type", std::string());
      clause = &inline_clause;
      if (dataset) corpus = &artifacts_.dataset(*dataset).value;
    } else if (auto id = opt<std::string>(body, "clause_id")) {
      std::tie(clause, corpus) = find_clause(*id, dataset);
    } else {
      throw Error(ErrorKind::validation, "clause_id or clause is required");
    }
    const Question* q = r.question && uses_question(r.tmpl) ? &*r.question : nullptr;
    auto conv = render(r.tmpl, r.options, *clause, q);
    const auto example_ids = body.value("example_set_ids", std::vector<std::string>{});
    if (!example_ids.empty()) {
      if (!corpus) throw Error(ErrorKind::validation, "example sets need a dataset for their clauses");
      std::vector<ExampleSet> sets;
      for (const auto& id : example_ids) {
        sets.push_back(artifacts_.example_set(id).value);
        validate(sets.back(), *corpus, r.options,
                 r.question ? r.question->mode
                            : (r.tmpl.selection_mode == SelectionMode::multi ? QuestionMode::multi_select
                                                                             : QuestionMode::single_select));
      }
      conv = seed_with_examples(conv, sets, r.tmpl, r.options, *corpus, q, options_.run.scoring.example_answer_style);
    }
    return conv;
  }

  ProviderConfig provider_for(const Json& body) const {
    auto p = options_.run.provider;
    if (auto it = body.find("provider"); it != body.end() && it->is_object()) {
      p.model = it->value("model", p.model);
      p.temperature = it->value("temperature", p.temperature);
      if (it->contains("max_tokens")) p.max_tokens = opt<int>(*it, "max_tokens");
      if (it->contains("mode") && it->at("mode").get<std::string>() != to_string(p.mode)) {
        throw Error(ErrorKind::validation, "provider mode is fixed at service start");
      }
    }
    return p;
  }

  Trial make_trial(const RenderedConversation& conv, const std::string& raw, const Resolved& r) const {
    const auto result = canonicalize(raw, r.options, r.tmpl.escape_phrases, r.synonyms, r.tmpl.selection_mode,
                                     options_.run.scoring.canonicalize);
    Trial t;
    t.conversation = conv;
    t.raw_response = raw;
    t.canonical = result.answer;
    t.trace = result.trace;
    t.template_snapshot = r.template_snapshot;
    t.option_set_snapshot = r.option_set_snapshot;
    return t;
  }

  static Json session_summary(const Session& s) {
    return {{"id", s.id},
            {"author", s.author},
            {"created_at", s.created_at},
            {"trial_count", s.trials.size()},
            {"snapshot_count", s.snapshots.size()}};
  }

  Json session_detail(const Session& s) const {
    Json trials = Json::array();
    for (const auto& id : s.trials) trials.push_back(to_json(store_.trial(id)));
    Json snapshots = Json::array();
    for (const auto& snap : s.snapshots) snapshots.push_back(to_json(snap));
    return {{"id", s.id},
            {"author", s.author},
            {"created_at", s.created_at},
            {"trials", std::move(trials)},
            {"snapshots", std::move(snapshots)}};
  }

  // --- batch runs -----------------------------------------------------------

  Json execute_run(const std::string& run_id, const Json& body, const std::optional<std::string>& session_id) {
    Json run{{"id", run_id}, {"session_id", session_id ? Json(*session_id) : Json(nullptr)}, {"request", body}};
    try {
      const auto dataset_id = opt<std::string>(body, "dataset");
      if (!dataset_id) throw Error(ErrorKind::validation, "dataset is required");
      const auto& ds = artifacts_.dataset(*dataset_id);
      auto resolved = resolve(body, session_id, /*snapshot_inline=*/true);

      RunContext ctx;
      ctx.dataset = ds.value;
      ctx.question = resolved.question ? *resolved.question : artifacts_.question(ds.value.question_id).value;
      ctx.tmpl = resolved.tmpl;
      ctx.options = resolved.options;
      ctx.synonyms = resolved.synonyms;
      for (const auto& id : body.value("example_set_ids", std::vector<std::string>{})) {
        ctx.example_sets.push_back(artifacts_.example_set(id).value);
        validate(ctx.example_sets.back(), ctx.dataset, ctx.options, ctx.question.mode);
      }
      if (auto ids = opt<std::vector<std::string>>(body, "clause_ids")) {
        const std::set<std::string> keep(ids->begin(), ids->end());
        for (const auto& id : keep) {
          if (!ctx.dataset.find_clause(id)) throw Error(ErrorKind::not_found, "unknown clause: " + id);
        }
        std::erase_if(ctx.dataset.clauses, [&](const Clause& c) { return !keep.contains(c.id); });
      }
      ctx.artifact_hashes["dataset"] = ds.sha256;

      RunConfig c = options_.run;
      c.provider = provider_for(body);
      const auto records = run_generation(ctx, c, *provider_);
      run["status"] = "done";
      run["records"] = detail::records_json(records);
      run["template_snapshot"] = resolved.template_snapshot ? Json(*resolved.template_snapshot) : Json(nullptr);
      run["option_set_snapshot"] = resolved.option_set_snapshot ? Json(*resolved.option_set_snapshot) : Json(nullptr);
      if (records.empty()) {
        run["metrics"] = nullptr;
      } else {
        const auto m = compute_metrics(records, ctx.options);
        run["metrics"] = to_json(m);
        run["table"] = format_metrics_table({{run_id, m}}, ctx.options);
      }
    } catch (const Error& e) {
      run["status"] = "failed";
      run["error"] = {{"error", to_string(e.kind())}, {"message", e.what()}};
    }
    return run;
  }

  void finish_run(const std::string& key, const Json& run) {
    store_.record_run(run);
    std::lock_guard lock(runs_mutex_);
    runs_[run.at("id").get<std::string>()] = run;
    active_.erase(key);
  }

  // --- routes ---------------------------------------------------------------

  void routes() {
    if (options_.token) {
      server_.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
        if (req.get_header_value("Authorization") == "Bearer " + *options_.token) {
          return httplib::Server::HandlerResponse::Unhandled;
        }
        reply(res, 401, {{"error", "auth"}, {"message", "missing or invalid bearer token"}});
        return httplib::Server::HandlerResponse::Handled;
      });
    }

    server_.Get("/clauses", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto type = req.has_param("type") ? std::optional(req.get_param_value("type")) : std::nullopt;
      Json out = Json::array();
      for (const auto& [name, ds] : artifacts_.datasets()) {
        for (const auto& c : ds.value.clauses) {
          if (type && c.clause_type != *type) continue;
          Json j = to_json(c);
          j["dataset"] = name;
          const auto* gold = ds.value.find_label(c.id);
          j["gold"] = gold ? to_json(*gold) : Json(nullptr);
          out.push_back(std::move(j));
        }
      }
      reply(res, 200, {{"clauses", std::move(out)}});
    }));

    server_.Get("/templates", guarded([this](const httplib::Request&, httplib::Response& res) {
      Json out = Json::array();
      for (const auto& [id, t] : artifacts_.templates()) {
        Json j = to_json(t.value);
        j["sha256"] = t.sha256;
        out.push_back(std::move(j));
      }
      reply(res, 200, {{"templates", std::move(out)}});
    }));

    server_.Get("/option-sets", guarded([this](const httplib::Request&, httplib::Response& res) {
      Json out = Json::array();
      for (const auto& [id, s] : artifacts_.option_sets()) {
        Json j = to_json(s.value);
        j["sha256"] = s.sha256;
        out.push_back(std::move(j));
      }
      reply(res, 200, {{"option_sets", std::move(out)}});
    }));

    server_.Post("/render", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_json(req);
      const auto session_id = opt<std::string>(body, "session_id");
      const auto r = resolve(body, session_id, /*snapshot_inline=*/false);
      reply(res, 200, to_json(render_for(body, r)));
    }));

    server_.Post("/generate", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_json(req);
      const auto session_id = opt<std::string>(body, "session_id");
      if (session_id && !store_.has_session(*session_id)) throw Error(ErrorKind::not_found, "unknown session: " + *session_id);
      const auto r = resolve(body, session_id, /*snapshot_inline=*/true);
      const auto conv = render_for(body, r);
      const auto response = provider_->chat_complete(build_request(provider_for(body), conv));
      auto trial = make_trial(conv, response.text, r);
      if (session_id) {
        trial.session_id = *session_id;
        trial = store_.add_trial(std::move(trial));
      }
      auto j = to_json(trial);
      j["persisted"] = session_id.has_value();
      reply(res, 200, j);
    }));

    server_.Post("/trials", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_json(req);
      const auto session_id = opt<std::string>(body, "session_id");
      if (!session_id) throw Error(ErrorKind::validation, "session_id is required");
      if (!store_.has_session(*session_id)) throw Error(ErrorKind::not_found, "unknown session: " + *session_id);
      Trial trial;
      if (body.contains("canonical") && body.contains("trace")) {
        Json copy = body;
        copy.erase("id");
        trial = trial_from_json(copy);
      } else {
        // canonicalize against the artifacts named in the conversation
        const auto conv = conversation_from_json(body.at("conversation"));
        Json refs = body;
        if (!refs.contains("template") && !refs.contains("template_snapshot")) refs["template_id"] = conv.metadata.template_id;
        if (!refs.contains("option_set") && !refs.contains("option_set_snapshot")) {
          refs["option_set_id"] = conv.metadata.option_set_id;
        }
        const auto r = resolve(refs, session_id, /*snapshot_inline=*/true);
        trial = make_trial(conv, body.at("raw_response").get<std::string>(), r);
        trial.rating = opt<int>(body, "rating");
        trial.notes = opt<std::string>(body, "notes");
      }
      trial.session_id = *session_id;
      reply(res, 201, to_json(store_.add_trial(std::move(trial))));
    }));

    server_.Patch(R"(/trials/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_json(req);
      std::optional<int> rating;
      if (auto it = body.find("rating"); it != body.end() && !it->is_null()) {
        if (!it->is_number_integer()) throw Error(ErrorKind::validation, "rating must be an integer from 1 to 5");
        rating = it->get<int>();
      }
      const auto notes = opt<std::string>(body, "notes");
      if (!rating && !notes) throw Error(ErrorKind::validation, "rating or notes is required");
      reply(res, 200, to_json(store_.annotate_trial(req.matches[1], rating, notes)));
    }));

    server_.Get("/sessions", guarded([this](const httplib::Request&, httplib::Response& res) {
      Json out = Json::array();
      for (const auto& s : store_.sessions()) out.push_back(session_summary(s));
      reply(res, 200, {{"sessions", std::move(out)}});
    }));

    server_.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_json(req);
      reply(res, 201, session_detail(store_.create_session(body.value("author", std::string()))));
    }));

    server_.Get(R"(/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, session_detail(store_.session(req.matches[1])));
    }));

    server_.Post(R"(/sessions/([^/]+)/snapshots)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_json(req);
      const std::string session_id = req.matches[1];
      Snapshot snap;
      if (body.contains("template")) {
        const auto t = template_from_json(body.at("template"));
        snap = store_.add_snapshot(session_id, "template", t.id, to_json(t));
      } else if (body.contains("option_set")) {
        const auto o = option_set_from_json(body.at("option_set"));
        snap = store_.add_snapshot(session_id, "option_set", o.id, to_json(o));
      } else {
        throw Error(ErrorKind::validation, "template or option_set is required");
      }
      reply(res, 201, to_json(snap));
    }));

    server_.Post("/runs", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = body_json(req);
      const auto session_id = opt<std::string>(body, "session_id");
      if (session_id && !store_.has_session(*session_id)) throw Error(ErrorKind::not_found, "unknown session: " + *session_id);
      const auto key = session_id.value_or("");
      std::string run_id;
      {
        std::lock_guard lock(runs_mutex_);
        if (active_.contains(key)) {
          throw Error(ErrorKind::validation, "a batch run is already active for this session");
        }
        run_id = "r" + std::to_string(++run_seq_);
        active_.insert(key);
        runs_[run_id] = {{"id", run_id}, {"status", "running"}};
      }
      if (body.value("wait", false)) {
        const auto run = execute_run(run_id, body, session_id);
        finish_run(key, run);
        reply(res, 201, run);
        return;
      }
      std::lock_guard lock(threads_mutex_);
      threads_.emplace_back([this, run_id, body, session_id, key] { finish_run(key, execute_run(run_id, body, session_id)); });
      reply(res, 202, {{"id", run_id}, {"status", "running"}});
    }));

    server_.Get(R"(/runs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(runs_mutex_);
      auto it = runs_.find(req.matches[1]);
      if (it == runs_.end()) throw Error(ErrorKind::not_found, "unknown run: " + std::string(req.matches[1]));
      reply(res, 200, it->second);
    }));
  }

  ServiceOptions options_;
  ArtifactStore artifacts_;
  SessionStore store_;
  std::shared_ptr<ChatProvider> provider_;
  httplib::Server server_;

  std::mutex runs_mutex_;
  std::map<std::string, Json> runs_;
  std::set<std::string> active_;
  int run_seq_ = 0;

  std::mutex threads_mutex_;
  std::vector<std::thread> threads_;
};

}  // namespace caf
