#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "caf/canonicalize.hpp"
#include "caf/corpus.hpp"
#include "caf/error.hpp"
#include "caf/templating.hpp"

namespace caf {

struct EvalRecord {
  std::string clause_id;
  std::string raw;
  CanonicalAnswer answer;
  MatchTrace trace;
  GoldLabel gold;
  bool correct = false;

  bool operator==(const EvalRecord&) const = default;
};

struct EvalRun {
  std::vector<EvalRecord> records;
};

// Escape answers count as correct exactly when the gold label marks the
// clause as lacking the information to answer.

/// Single-select rule: exactly the gold option, or an escape on an
/// insufficient clause.
inline bool score_single(const CanonicalAnswer& answer, const GoldLabel& gold, const Question& question) {
  if (question.mode != QuestionMode::single_select) {
    throw Error(ErrorKind::mode, "score_single called for multi_select question " + question.id);
  }
  switch (answer.kind) {
    case AnswerKind::selected:
      return !gold.insufficient && answer.option_ids.size() == 1 && gold.option_ids == answer.option_ids;
    case AnswerKind::escape:
      return gold.insufficient;
    case AnswerKind::unmapped:
      return false;
  }
  return false;
}

/// Lenient multi-select rule: any overlap with the gold options counts.
inline bool score_lenient(const CanonicalAnswer& answer, const GoldLabel& gold, const Question& question) {
  if (question.mode != QuestionMode::multi_select) {
    throw Error(ErrorKind::mode, "score_lenient called for single_select question " + question.id);
  }
  switch (answer.kind) {
    case AnswerKind::selected:
      if (gold.insufficient) return false;
      return std::any_of(answer.option_ids.begin(), answer.option_ids.end(),
                         [&](const std::string& id) { return gold.option_ids.contains(id); });
    case AnswerKind::escape:
      return gold.insufficient;
    case AnswerKind::unmapped:
      return false;
  }
  return false;
}

inline bool score(const CanonicalAnswer& answer, const GoldLabel& gold, const Question& question) {
  return question.mode == QuestionMode::single_select ? score_single(answer, gold, question)
                                                      : score_lenient(answer, gold, question);
}

struct Metrics {
  int total = 0;
  int correct = 0;
  double accuracy = 0.0;
  std::map<std::string, int> per_option_correct;
  std::map<std::string, int> gold_distribution;
  int insufficient_gold = 0;
  int unmapped_count = 0;
  int escape_count = 0;
  int cleanup_count = 0;
  int unique_raw_responses = 0;

  bool operator==(const Metrics&) const = default;
};

inline Metrics compute_metrics(const std::vector<EvalRecord>& records, const OptionSet& options) {
  if (records.empty()) throw Error(ErrorKind::validation, "compute_metrics needs at least one record");
  Metrics m;
  for (const auto& o : options.options) {
    m.per_option_correct[o.canonical_id] = 0;
    m.gold_distribution[o.canonical_id] = 0;
  }
  std::set<std::string> raws;
  for (const auto& r : records) {
    ++m.total;
    for (const auto& id : r.gold.option_ids) ++m.gold_distribution[id];
    if (r.gold.insufficient) ++m.insufficient_gold;
    if (r.correct) {
      ++m.correct;
      for (const auto& id : r.gold.option_ids) ++m.per_option_correct[id];
    }
    if (r.answer.kind == AnswerKind::unmapped) ++m.unmapped_count;
    if (r.answer.kind == AnswerKind::escape) ++m.escape_count;
    if (r.trace.needed_cleanup) ++m.cleanup_count;
    raws.insert(r.raw);
  }
  m.unique_raw_responses = static_cast<int>(raws.size());
  m.accuracy = static_cast<double>(m.correct) / static_cast<double>(m.total);
  return m;
}

inline double round_to(double x, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(x * scale) / scale;
}

inline nlohmann::json to_json(const Metrics& m) {
  return {{"total", m.total},
          {"correct", m.correct},
          {"accuracy", round_to(m.accuracy, 4)},
          {"per_option_correct", m.per_option_correct},
          {"gold_distribution", m.gold_distribution},
          {"insufficient_gold", m.insufficient_gold},
          {"unmapped_count", m.unmapped_count},
          {"escape_count", m.escape_count},
          {"cleanup_count", m.cleanup_count},
          {"unique_raw_responses", m.unique_raw_responses}};
}

inline nlohmann::json to_json(const EvalRecord& r) {
  return {{"clause_id", r.clause_id},
          {"raw", r.raw},
          {"answer", to_json(r.answer)},
          {"trace", to_json(r.trace)},
          {"gold", to_json(r.gold)},
          {"correct", r.correct}};
}

inline EvalRecord eval_record_from_json(const nlohmann::json& j) {
  EvalRecord r;
  r.clause_id = j.at("clause_id").get<std::string>();
  r.raw = j.at("raw").get<std::string>();
  r.answer = canonical_answer_from_json(j.at("answer"));
  r.trace = match_trace_from_json(j.at("trace"));
  const auto& g = j.at("gold");
  r.gold.clause_id = g.at("clause_id").get<std::string>();
  r.gold.question_id = g.at("question_id").get<std::string>();
  r.gold.option_ids = g.at("option_ids").get<std::set<std::string>>();
  r.gold.insufficient = g.at("insufficient").get<bool>();
  r.correct = j.at("correct").get<bool>();
  return r;
}

struct ConsistencyReport {
  int runs = 0;
  int total = 0;
  std::set<std::string> changed_clauses;
  double stability = 1.0;

  bool operator==(const ConsistencyReport&) const = default;
};

/// Compares K runs over the same clauses. A clause counts as changed when its
/// canonical answer is not identical in every run.
inline ConsistencyReport consistency(const std::vector<std::vector<EvalRecord>>& runs) {
  if (runs.size() < 2) throw Error(ErrorKind::validation, "consistency needs at least 2 runs");
  std::map<std::string, CanonicalAnswer> first;
  for (const auto& r : runs.front()) {
    if (!first.emplace(r.clause_id, r.answer).second) {
      throw Error(ErrorKind::validation, "run 1 lists clause " + r.clause_id + " twice");
    }
  }
  ConsistencyReport report;
  report.runs = static_cast<int>(runs.size());
  report.total = static_cast<int>(first.size());
  for (std::size_t k = 1; k < runs.size(); ++k) {
    std::set<std::string> seen;
    for (const auto& r : runs[k]) {
      auto it = first.find(r.clause_id);
      if (it == first.end() || !seen.insert(r.clause_id).second) {
        throw Error(ErrorKind::validation, "run " + std::to_string(k + 1) + " clause set differs from run 1 at " + r.clause_id);
      }
      if (!(it->second == r.answer)) report.changed_clauses.insert(r.clause_id);
    }
    if (seen.size() != first.size()) {
      throw Error(ErrorKind::validation, "run " + std::to_string(k + 1) + " covers a different clause set");
    }
  }
  report.stability = report.total == 0
                         ? 1.0
                         : 1.0 - static_cast<double>(report.changed_clauses.size()) / static_cast<double>(report.total);
  return report;
}

inline nlohmann::json to_json(const ConsistencyReport& r) {
  return {{"runs", r.runs},
          {"total", r.total},
          {"changed_clauses", r.changed_clauses},
          {"stability", round_to(r.stability, 4)}};
}

/// Plain-text table with one column per option (header "ordinal (gold
/// count)") and an accuracy column, one row per labelled run.
inline std::string format_metrics_table(const std::vector<std::pair<std::string, Metrics>>& rows,
                                        const OptionSet& options) {
  std::vector<const AnswerOption*> ordered;
  for (const auto& o : options.options) ordered.push_back(&o);
  std::sort(ordered.begin(), ordered.end(),
            [](const AnswerOption* a, const AnswerOption* b) { return a->ordinal < b->ordinal; });

  std::vector<std::string> header{""};
  const Metrics* reference = rows.empty() ? nullptr : &rows.front().second;
  for (const auto* o : ordered) {
    const int gold = reference ? reference->gold_distribution.at(o->canonical_id) : 0;
    header.push_back(std::to_string(o->ordinal) + " (" + std::to_string(gold) + ")");
  }
  header.push_back("A");

  std::vector<std::vector<std::string>> cells{header};
  for (const auto& [label, m] : rows) {
    std::vector<std::string> row{label};
    for (const auto* o : ordered) row.push_back(std::to_string(m.per_option_correct.at(o->canonical_id)));
    char acc[16];
    std::snprintf(acc, sizeof acc, "%.2f", m.accuracy);
    row.push_back(acc);
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      const auto& cell = cells[r][c];
      line += c == 0 ? cell + std::string(widths[c] - cell.size(), ' ') : std::string(widths[c] - cell.size(), ' ') + cell;
      if (c + 1 < cells[r].size()) line += " | ";
    }
    out += line + '\n';
    if (r == 0) {
      std::string rule;
      for (std::size_t c = 0; c < widths.size(); ++c) {
        rule += std::string(widths[c], '-');
        if (c + 1 < widths.size()) rule += "-+-";
      }
      out += rule + '\n';
    }
  }
  return out;
}

}  // namespace caf
