#pragma once

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "caf/error.hpp"
#include "caf/util.hpp"

// Clause datasets: pre-extracted contract clauses plus gold labels for one
// question, stored as JSON Lines with a leading manifest record.
namespace caf {

inline constexpr std::size_t kDefaultMaxChars = 20000;

enum class QuestionMode { single_select, multi_select };

inline const char* to_string(QuestionMode mode) {
  return mode == QuestionMode::single_select ? "single_select" : "multi_select";
}

inline QuestionMode question_mode_from_string(const std::string& s) {
  if (s == "single_select") return QuestionMode::single_select;
  if (s == "multi_select") return QuestionMode::multi_select;
  throw Error(ErrorKind::parse, "unknown question mode: " + s);
}

struct Clause {
  std::string id;
  std::string clause_type;
  std::string text;
  std::optional<std::string> source;

  bool operator==(const Clause&) const = default;
};

struct Question {
  std::string id;
  std::string text;
  QuestionMode mode = QuestionMode::single_select;
  std::string option_set_id;

  bool operator==(const Question&) const = default;
};

struct GoldLabel {
  std::string clause_id;
  std::string question_id;
  std::set<std::string> option_ids;
  bool insufficient = false;

  bool operator==(const GoldLabel&) const = default;
};

struct Dataset {
  std::string question_id;
  std::size_t max_chars = kDefaultMaxChars;
  // Optional per-option label counts declared by the manifest.
  std::map<std::string, int> declared_distribution;
  std::vector<Clause> clauses;
  std::vector<GoldLabel> labels;

  bool operator==(const Dataset&) const = default;

  const Clause* find_clause(std::string_view id) const {
    for (const auto& c : clauses) {
      if (c.id == id) return &c;
    }
    return nullptr;
  }

  const GoldLabel* find_label(std::string_view clause_id, std::string_view question) const {
    for (const auto& l : labels) {
      if (l.clause_id == clause_id && l.question_id == question) return &l;
    }
    return nullptr;
  }

  const GoldLabel* find_label(std::string_view clause_id) const {
    return find_label(clause_id, question_id);
  }

  // Number of labels (for this dataset's question) naming each option id.
  std::map<std::string, int> label_distribution() const {
    std::map<std::string, int> counts;
    for (const auto& l : labels) {
      if (l.question_id != question_id) continue;
      for (const auto& id : l.option_ids) ++counts[id];
    }
    return counts;
  }
};

struct Violation {
  std::string clause_id;
  std::string message;

  bool operator==(const Violation&) const = default;
};

namespace detail {

inline std::string require_string(const nlohmann::json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw Error(ErrorKind::parse,
                "line " + std::to_string(line) + ": missing string field \"" + key + "\"");
  }
  return it->get<std::string>();
}

}  // namespace detail

/// Parses a dataset from JSON Lines. An explicit max_chars overrides the
/// manifest's value. A stream with no records yields an empty dataset.
inline Dataset parse_dataset(std::istream& in, std::optional<std::size_t> max_chars = std::nullopt) {
  Dataset ds;
  bool have_manifest = false;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object()) {
      throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": record is not an object");
    }
    const std::string kind = detail::require_string(j, "kind", line_no);
    if (!have_manifest) {
      if (kind != "manifest") {
        throw Error(ErrorKind::parse,
                    "line " + std::to_string(line_no) + ": first record must be the manifest");
      }
      ds.question_id = detail::require_string(j, "question_id", line_no);
      if (auto it = j.find("max_chars"); it != j.end()) {
        if (!it->is_number_unsigned() || it->get<std::size_t>() == 0) {
          throw Error(ErrorKind::parse,
                      "line " + std::to_string(line_no) + ": max_chars must be a positive integer");
        }
        ds.max_chars = it->get<std::size_t>();
      }
      if (auto it = j.find("distribution"); it != j.end()) {
        ds.declared_distribution = it->get<std::map<std::string, int>>();
      }
      have_manifest = true;
      continue;
    }
    if (kind == "clause") {
      Clause c;
      c.id = detail::require_string(j, "id", line_no);
      c.clause_type = detail::require_string(j, "clause_type", line_no);
      c.text = detail::require_string(j, "text", line_no);
      if (auto it = j.find("source"); it != j.end() && !it->is_null()) c.source = it->get<std::string>();
      ds.clauses.push_back(std::move(c));
    } else if (kind == "label") {
      GoldLabel l;
      l.clause_id = detail::require_string(j, "clause_id", line_no);
      l.question_id = detail::require_string(j, "question_id", line_no);
      auto it = j.find("option_ids");
      if (it == j.end() || !it->is_array()) {
        throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": option_ids must be an array");
      }
      for (const auto& id : *it) l.option_ids.insert(id.get<std::string>());
      l.insufficient = j.value("insufficient", false);
      ds.labels.push_back(std::move(l));
    } else if (kind == "manifest") {
      throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": duplicate manifest");
    } else {
      throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": unknown record kind \"" + kind + "\"");
    }
  }
  if (max_chars) {
    if (*max_chars == 0) throw Error(ErrorKind::validation, "max_chars must be positive");
    ds.max_chars = *max_chars;
  }

  std::unordered_set<std::string> ids;
  for (const auto& c : ds.clauses) {
    if (c.id.empty()) throw Error(ErrorKind::validation, "clause with empty id");
    if (!ids.insert(c.id).second) throw Error(ErrorKind::validation, "duplicate clause id: " + c.id);
    if (c.text.empty()) throw Error(ErrorKind::validation, "clause " + c.id + " has empty text");
    const auto n = utf8_length(c.text);
    if (n >= ds.max_chars) {
      throw Error(ErrorKind::validation, "clause " + c.id + " has " + std::to_string(n) +
                                             " characters; limit is < " + std::to_string(ds.max_chars));
    }
  }
  std::set<std::pair<std::string, std::string>> label_keys;
  for (const auto& l : ds.labels) {
    if (!ids.contains(l.clause_id)) {
      throw Error(ErrorKind::validation, "label references unknown clause: " + l.clause_id);
    }
    if (!label_keys.emplace(l.clause_id, l.question_id).second) {
      throw Error(ErrorKind::validation,
                  "duplicate label for clause " + l.clause_id + " and question " + l.question_id);
    }
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path,
                            std::optional<std::size_t> max_chars = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open dataset: " + path.string());
  try {
    return parse_dataset(in, max_chars);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

inline std::string serialize_dataset(const Dataset& ds) {
  std::string out;
  nlohmann::ordered_json manifest;
  manifest["kind"] = "manifest";
  manifest["question_id"] = ds.question_id;
  manifest["max_chars"] = ds.max_chars;
  if (!ds.declared_distribution.empty()) manifest["distribution"] = ds.declared_distribution;
  out += manifest.dump() + "\n";
  for (const auto& c : ds.clauses) {
    nlohmann::ordered_json j;
    j["kind"] = "clause";
    j["id"] = c.id;
    j["clause_type"] = c.clause_type;
    j["text"] = c.text;
    if (c.source) j["source"] = *c.source;
    out += j.dump() + "\n";
  }
  for (const auto& l : ds.labels) {
    nlohmann::ordered_json j;
    j["kind"] = "label";
    j["clause_id"] = l.clause_id;
    j["question_id"] = l.question_id;
    j["option_ids"] = l.option_ids;
    j["insufficient"] = l.insufficient;
    out += j.dump() + "\n";
  }
  return out;
}

/// Checks gold labels for `question` against its selection mode. Violations
/// are returned, not thrown.
inline std::vector<Violation> validate_gold(const Dataset& dataset, const Question& question) {
  std::vector<Violation> out;
  for (const auto& l : dataset.labels) {
    if (l.question_id != question.id) continue;
    if (l.insufficient) {
      if (!l.option_ids.empty()) {
        out.push_back({l.clause_id, "insufficient label must not list option ids"});
      }
      continue;
    }
    const auto n = l.option_ids.size();
    if (question.mode == QuestionMode::single_select && n != 1) {
      out.push_back({l.clause_id, "single_select label has " + std::to_string(n) + " option ids"});
    } else if (question.mode == QuestionMode::multi_select && n == 0) {
      out.push_back({l.clause_id, "multi_select label has no option ids"});
    }
  }
  return out;
}

inline nlohmann::json to_json(const Question& q) {
  return {{"id", q.id}, {"text", q.text}, {"mode", to_string(q.mode)}, {"option_set_id", q.option_set_id}};
}

inline Question question_from_json(const nlohmann::json& j) {
  Question q;
  q.id = j.at("id").get<std::string>();
  q.text = j.at("text").get<std::string>();
  q.mode = question_mode_from_string(j.at("mode").get<std::string>());
  q.option_set_id = j.at("option_set_id").get<std::string>();
  return q;
}

inline nlohmann::json to_json(const Clause& c) {
  nlohmann::json j{{"id", c.id}, {"clause_type", c.clause_type}, {"text", c.text}};
  j["source"] = c.source ? nlohmann::json(*c.source) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const GoldLabel& l) {
  return {{"clause_id", l.clause_id},
          {"question_id", l.question_id},
          {"option_ids", l.option_ids},
          {"insufficient", l.insufficient}};
}

}  // namespace caf
