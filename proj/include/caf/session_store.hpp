#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "caf/canonicalize.hpp"
#include "caf/error.hpp"
#include "caf/templating.hpp"
#include "caf/util.hpp"

// Append-only JSON Lines log of exploration sessions. Every mutation is one
// event line; state is rebuilt by replaying the log on open. Nothing is
// ever rewritten, ratings included: a rating is its own event.
namespace caf {

struct Snapshot {
  int version = 0;
  std::string kind;  // "template" or "option_set"
  std::string artifact_id;
  nlohmann::json value;
  std::string created_at;
};

struct Trial {
  std::string id;
  std::string session_id;
  std::string timestamp;
  RenderedConversation conversation;
  std::string raw_response;
  CanonicalAnswer canonical;
  MatchTrace trace;
  std::optional<int> rating;
  std::optional<std::string> notes;
  std::optional<int> template_snapshot;
  std::optional<int> option_set_snapshot;
};

struct Session {
  std::string id;
  std::string author;
  std::string created_at;
  std::vector<std::string> trials;
  std::vector<Snapshot> snapshots;
};

inline nlohmann::json to_json(const Snapshot& s) {
  return {{"version", s.version},
          {"kind", s.kind},
          {"artifact_id", s.artifact_id},
          {"value", s.value},
          {"created_at", s.created_at}};
}

inline Snapshot snapshot_from_json(const nlohmann::json& j) {
  return {j.at("version").get<int>(), j.at("kind").get<std::string>(), j.at("artifact_id").get<std::string>(),
          j.at("value"), j.at("created_at").get<std::string>()};
}

namespace detail {
template <class T>
nlohmann::json or_null(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
template <class T>
std::optional<T> null_or(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<T>();
}
}  // namespace detail

inline nlohmann::json to_json(const Trial& t) {
  return {{"id", t.id},
          {"session_id", t.session_id},
          {"timestamp", t.timestamp},
          {"conversation", to_json(t.conversation)},
          {"raw_response", t.raw_response},
          {"canonical", to_json(t.canonical)},
          {"trace", to_json(t.trace)},
          {"rating", detail::or_null(t.rating)},
          {"notes", detail::or_null(t.notes)},
          {"template_snapshot", detail::or_null(t.template_snapshot)},
          {"option_set_snapshot", detail::or_null(t.option_set_snapshot)}};
}

inline Trial trial_from_json(const nlohmann::json& j) {
  Trial t;
  t.id = j.value("id", std::string());
  t.session_id = j.value("session_id", std::string());
  t.timestamp = j.value("timestamp", std::string());
  t.conversation = conversation_from_json(j.at("conversation"));
  t.raw_response = j.at("raw_response").get<std::string>();
  t.canonical = canonical_answer_from_json(j.at("canonical"));
  t.trace = match_trace_from_json(j.at("trace"));
  t.rating = detail::null_or<int>(j, "rating");
  t.notes = detail::null_or<std::string>(j, "notes");
  t.template_snapshot = detail::null_or<int>(j, "template_snapshot");
  t.option_set_snapshot = detail::null_or<int>(j, "option_set_snapshot");
  return t;
}

inline void validate_rating(int rating) {
  if (rating < 1 || rating > 5) {
    throw Error(ErrorKind::validation, "rating must be an integer from 1 to 5, got " + std::to_string(rating));
  }
}

class SessionStore {
 public:
  using Clock = std::function<std::string()>;

  explicit SessionStore(std::filesystem::path path, Clock clock = utc_now)
      : path_(std::move(path)), clock_(std::move(clock)) {
    if (std::filesystem::exists(path_)) replay();
    if (path_.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(path_.parent_path(), ec);
    }
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw Error(ErrorKind::io, "session store is not writable: " + path_.string());
  }

  const std::filesystem::path& path() const { return path_; }

  Session create_session(const std::string& author) {
    std::lock_guard lock(mutex_);
    Session s{"s" + std::to_string(++session_seq_), author, clock_(), {}, {}};
    append({{"event", "session_created"}, {"id", s.id}, {"author", s.author}, {"created_at", s.created_at}});
    sessions_[s.id] = s;
    session_order_.push_back(s.id);
    return s;
  }

  /// Adds a snapshot unless it equals the latest one of the same kind and
  /// artifact id, in which case that one is returned.
  Snapshot add_snapshot(const std::string& session_id, const std::string& kind, const std::string& artifact_id,
                        const nlohmann::json& value) {
    if (kind != "template" && kind != "option_set") {
      throw Error(ErrorKind::validation, "snapshot kind must be template or option_set");
    }
    std::lock_guard lock(mutex_);
    auto& s = session_locked(session_id);
    for (auto it = s.snapshots.rbegin(); it != s.snapshots.rend(); ++it) {
      if (it->kind == kind && it->artifact_id == artifact_id) {
        if (it->value == value) return *it;
        break;
      }
    }
    Snapshot snap{s.snapshots.empty() ? 1 : s.snapshots.back().version + 1, kind, artifact_id, value, clock_()};
    append({{"event", "snapshot"}, {"session_id", session_id}, {"snapshot", to_json(snap)}});
    s.snapshots.push_back(snap);
    return snap;
  }

  Snapshot snapshot(const std::string& session_id, const std::string& kind, int version) const {
    std::lock_guard lock(mutex_);
    const auto& s = session_locked(session_id);
    for (const auto& snap : s.snapshots) {
      if (snap.version == version) {
        if (snap.kind != kind) {
          throw Error(ErrorKind::validation, "snapshot " + std::to_string(version) + " is a " + snap.kind);
        }
        return snap;
      }
    }
    throw Error(ErrorKind::not_found, "session " + session_id + " has no snapshot " + std::to_string(version));
  }

  /// Assigns id and timestamp and commits the trial.
  Trial add_trial(Trial t) {
    if (t.rating) validate_rating(*t.rating);
    std::lock_guard lock(mutex_);
    auto& s = session_locked(t.session_id);
    t.id = "t" + std::to_string(++trial_seq_);
    t.timestamp = clock_();
    append({{"event", "trial"}, {"trial", to_json(t)}});
    s.trials.push_back(t.id);
    trials_[t.id] = t;
    return t;
  }

  Trial annotate_trial(const std::string& trial_id, std::optional<int> rating, std::optional<std::string> notes) {
    if (rating) validate_rating(*rating);
    std::lock_guard lock(mutex_);
    auto it = trials_.find(trial_id);
    if (it == trials_.end()) throw Error(ErrorKind::not_found, "unknown trial: " + trial_id);
    nlohmann::json event{{"event", "trial_rated"}, {"trial_id", trial_id}};
    if (rating) event["rating"] = *rating;
    if (notes) event["notes"] = *notes;
    append(event);
    apply_annotation(it->second, event);
    return it->second;
  }

  Trial trial(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = trials_.find(id);
    if (it == trials_.end()) throw Error(ErrorKind::not_found, "unknown trial: " + id);
    return it->second;
  }

  Session session(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return session_locked(id);
  }

  bool has_session(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return sessions_.contains(id);
  }

  std::vector<Session> sessions() const {
    std::lock_guard lock(mutex_);
    std::vector<Session> out;
    for (const auto& id : session_order_) out.push_back(sessions_.at(id));
    return out;
  }

  /// Completed batch runs are logged too so GET /runs/{id} survives a restart.
  void record_run(const nlohmann::json& run) {
    std::lock_guard lock(mutex_);
    append({{"event", "run"}, {"run", run}});
    runs_.push_back(run);
  }

  std::vector<nlohmann::json> runs() const {
    std::lock_guard lock(mutex_);
    return runs_;
  }

 private:
  Session& session_locked(const std::string& id) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorKind::not_found, "unknown session: " + id);
    return it->second;
  }
  const Session& session_locked(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorKind::not_found, "unknown session: " + id);
    return it->second;
  }

  static void apply_annotation(Trial& t, const nlohmann::json& event) {
    if (event.contains("rating")) t.rating = event.at("rating").get<int>();
    if (event.contains("notes")) t.notes = event.at("notes").get<std::string>();
  }

  static int id_number(const std::string& id) {
    try {
      return id.size() > 1 ? std::stoi(id.substr(1)) : 0;
    } catch (const std::exception&) {
      return 0;
    }
  }

  void append(const nlohmann::json& event) {
    out_ << event.dump() << '\n';
    out_.flush();
    if (!out_) throw Error(ErrorKind::io, "session store write failed: " + path_.string());
  }

  void replay() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot read session store: " + path_.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      try {
        apply(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
      } catch (const Error& e) {
        throw Error(ErrorKind::parse, path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  void apply(const nlohmann::json& e) {
    const auto kind = e.at("event").get<std::string>();
    if (kind == "session_created") {
      Session s{e.at("id").get<std::string>(), e.value("author", std::string()), e.value("created_at", std::string()),
                {}, {}};
      session_seq_ = std::max(session_seq_, id_number(s.id));
      session_order_.push_back(s.id);
      sessions_[s.id] = std::move(s);
    } else if (kind == "snapshot") {
      session_locked(e.at("session_id").get<std::string>()).snapshots.push_back(snapshot_from_json(e.at("snapshot")));
    } else if (kind == "trial") {
      auto t = trial_from_json(e.at("trial"));
      session_locked(t.session_id).trials.push_back(t.id);
      trial_seq_ = std::max(trial_seq_, id_number(t.id));
      trials_[t.id] = std::move(t);
    } else if (kind == "trial_rated") {
      auto it = trials_.find(e.at("trial_id").get<std::string>());
      if (it == trials_.end()) throw Error(ErrorKind::parse, "rating for unknown trial");
      apply_annotation(it->second, e);
    } else if (kind == "run") {
      runs_.push_back(e.at("run"));
    } else {
      throw Error(ErrorKind::parse, "unknown event: " + kind);
    }
  }

  std::filesystem::path path_;
  Clock clock_;
  mutable std::mutex mutex_;
  std::ofstream out_;
  std::map<std::string, Session> sessions_;
  std::vector<std::string> session_order_;
  std::map<std::string, Trial> trials_;
  std::vector<nlohmann::json> runs_;
  int session_seq_ = 0;
  int trial_seq_ = 0;
};

}  // namespace caf
