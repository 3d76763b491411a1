#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "caf/error.hpp"
#include "caf/templating.hpp"
#include "caf/util.hpp"

// Maps a free-form model response onto option identities, an escape, or an
// unmapped verdict. Strategies run in a fixed order and never guess between
// competing options.
namespace caf {

// ---------------------------------------------------------------------------
// Answer types

enum class AnswerKind { selected, escape, unmapped };

inline const char* to_string(AnswerKind k) {
  switch (k) {
    case AnswerKind::selected: return "selected";
    case AnswerKind::escape: return "escape";
    case AnswerKind::unmapped: return "unmapped";
  }
  return "unmapped";
}

struct CanonicalAnswer {
  AnswerKind kind = AnswerKind::unmapped;
  std::set<std::string> option_ids;  // non-empty iff kind == selected
  std::string raw;                   // kept for unmapped answers only

  static CanonicalAnswer selected(std::set<std::string> ids) {
    if (ids.empty()) throw Error(ErrorKind::validation, "selected answer needs at least one option id");
    return {AnswerKind::selected, std::move(ids), {}};
  }
  static CanonicalAnswer escape() { return {AnswerKind::escape, {}, {}}; }
  static CanonicalAnswer unmapped(std::string raw) { return {AnswerKind::unmapped, {}, std::move(raw)}; }

  bool operator==(const CanonicalAnswer&) const = default;
};

inline nlohmann::json to_json(const CanonicalAnswer& a) {
  nlohmann::json j{{"kind", to_string(a.kind)}};
  if (a.kind == AnswerKind::selected) j["option_ids"] = a.option_ids;
  if (a.kind == AnswerKind::unmapped) j["raw"] = a.raw;
  return j;
}

inline CanonicalAnswer canonical_answer_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "selected") return CanonicalAnswer::selected(j.at("option_ids").get<std::set<std::string>>());
  if (kind == "escape") return CanonicalAnswer::escape();
  if (kind == "unmapped") return CanonicalAnswer::unmapped(j.value("raw", ""));
  throw Error(ErrorKind::parse, "unknown answer kind: " + kind);
}

enum class MatchStrategy { exact, escape, numbered, substring, synonym_substring, segmented_multi, none };

inline const char* to_string(MatchStrategy s) {
  switch (s) {
    case MatchStrategy::exact: return "exact";
    case MatchStrategy::escape: return "escape";
    case MatchStrategy::numbered: return "numbered";
    case MatchStrategy::substring: return "substring";
    case MatchStrategy::synonym_substring: return "synonym_substring";
    case MatchStrategy::segmented_multi: return "segmented_multi";
    case MatchStrategy::none: return "none";
  }
  return "none";
}

inline MatchStrategy match_strategy_from_string(std::string_view s) {
  for (auto m : {MatchStrategy::exact, MatchStrategy::escape, MatchStrategy::numbered, MatchStrategy::substring,
                 MatchStrategy::synonym_substring, MatchStrategy::segmented_multi, MatchStrategy::none}) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorKind::parse, "unknown match strategy: " + std::string(s));
}

struct MatchTrace {
  MatchStrategy strategy = MatchStrategy::none;
  bool needed_cleanup = false;
  int segments_matched = 0;

  bool operator==(const MatchTrace&) const = default;
};

inline nlohmann::json to_json(const MatchTrace& t) {
  return {{"strategy", to_string(t.strategy)},
          {"needed_cleanup", t.needed_cleanup},
          {"segments_matched", t.segments_matched}};
}

inline MatchTrace match_trace_from_json(const nlohmann::json& j) {
  return {match_strategy_from_string(j.at("strategy").get<std::string>()), j.at("needed_cleanup").get<bool>(),
          j.value("segments_matched", 0)};
}

// ---------------------------------------------------------------------------
// Synonym tables

struct SynonymTable {
  std::string id;
  std::vector<std::vector<std::string>> groups;

  bool operator==(const SynonymTable&) const = default;
};

inline void validate(const SynonymTable& table) {
  std::set<std::string> seen;
  for (const auto& group : table.groups) {
    for (const auto& term : group) {
      const std::string t(trim(ascii_lower(term)));
      if (t.empty()) throw Error(ErrorKind::validation, "synonym table " + table.id + " has an empty term");
      if (!seen.insert(t).second) {
        throw Error(ErrorKind::validation, "synonym table " + table.id + ": term \"" + term + "\" is in two groups");
      }
    }
  }
}

inline SynonymTable synonym_table_from_json(const nlohmann::json& j) {
  SynonymTable t;
  t.id = j.at("id").get<std::string>();
  t.groups = j.at("groups").get<std::vector<std::vector<std::string>>>();
  validate(t);
  return t;
}

inline nlohmann::json to_json(const SynonymTable& t) { return {{"id", t.id}, {"groups", t.groups}}; }

inline SynonymTable load_synonym_table(const std::filesystem::path& path) {
  try {
    return synonym_table_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Normalization

struct NormalizeOptions {
  std::vector<std::string> preambles{"the clause implies that", "the clause states that"};
};

namespace detail {

inline constexpr std::string_view kQuoteMarks[] = {
    "\"", "'", "`", "“", "”", "‘", "’", "«", "»",
};

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (is_space(c)) {
      pending = true;
      continue;
    }
    if (pending && !out.empty()) out += ' ';
    pending = false;
    out += c;
  }
  return out;
}

inline bool strip_quote_prefix(std::string& s) {
  for (auto q : kQuoteMarks) {
    if (starts_with(s, q)) {
      s.erase(0, q.size());
      return true;
    }
  }
  return false;
}

inline bool strip_quote_suffix(std::string& s) {
  for (auto q : kQuoteMarks) {
    if (s.size() >= q.size() && std::string_view(s).substr(s.size() - q.size()) == q) {
      s.erase(s.size() - q.size());
      return true;
    }
  }
  return false;
}

inline bool is_terminal_punct(char c) {
  return c == '.' || c == '!' || c == '?' || c == ',' || c == ';' || c == ':';
}

// True when `needle` occurs in `hay` and is not glued to surrounding word
// characters.
inline bool contains_phrase(std::string_view hay, std::string_view needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  std::size_t pos = hay.find(needle);
  while (pos != std::string_view::npos) {
    const bool left_ok = pos == 0 || !is_word_char(hay[pos - 1]) || !is_word_char(needle.front());
    const auto end = pos + needle.size();
    const bool right_ok = end == hay.size() || !is_word_char(hay[end]) || !is_word_char(needle.back());
    if (left_ok && right_ok) return true;
    pos = hay.find(needle, pos + 1);
  }
  return false;
}

}  // namespace detail

/// Case-folds, collapses whitespace, and strips surrounding quotes, terminal
/// punctuation and known preamble phrases until nothing changes.
inline std::string normalize(std::string_view text, const NormalizeOptions& options = {}) {
  std::string s = std::string(trim(detail::collapse_whitespace(ascii_lower(text))));
  std::vector<std::string> preambles;
  for (const auto& p : options.preambles) {
    auto n = std::string(trim(detail::collapse_whitespace(ascii_lower(p))));
    if (!n.empty()) preambles.push_back(std::move(n));
  }
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& p : preambles) {
      if (starts_with(s, p) && (s.size() == p.size() || !detail::is_word_char(s[p.size()]))) {
        s.erase(0, p.size());
        changed = true;
      }
    }
    changed |= detail::strip_quote_prefix(s);
    changed |= detail::strip_quote_suffix(s);
    while (!s.empty() && detail::is_terminal_punct(s.back())) {
      s.pop_back();
      changed = true;
    }
    const auto t = trim(s);
    if (t.size() != s.size()) {
      s = std::string(t);
      changed = true;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Canonicalization

struct CanonicalizeOptions {
  NormalizeOptions normalize;
  // Split points for multi-select responses, matched case-insensitively.
  std::vector<std::string> segment_markers{"\n", ";", ", and ", " and ", ". "};
};

struct CanonicalResult {
  CanonicalAnswer answer;
  MatchTrace trace;

  bool operator==(const CanonicalResult&) const = default;
};

namespace detail {

struct NormalizedOption {
  const AnswerOption* option;
  std::vector<std::string> forms;  // normalized text followed by normalized aliases
};

inline std::vector<NormalizedOption> normalize_options(const OptionSet& set, const NormalizeOptions& opts) {
  std::vector<NormalizedOption> out;
  for (const auto& o : set.options) {
    NormalizedOption n{&o, {}};
    n.forms.push_back(normalize(o.text, opts));
    for (const auto& a : o.aliases) n.forms.push_back(normalize(a, opts));
    out.push_back(std::move(n));
  }
  return out;
}

// Rewrites every whole-word occurrence of a synonym term to its group's
// first term. Longer terms are replaced first so multi-word terms win.
inline std::string substitute_synonyms(std::string_view text, const SynonymTable& table) {
  std::vector<std::pair<std::string, std::string>> rules;
  for (const auto& group : table.groups) {
    if (group.empty()) continue;
    const auto rep = std::string(trim(collapse_whitespace(ascii_lower(group.front()))));
    for (const auto& term : group) {
      rules.emplace_back(std::string(trim(collapse_whitespace(ascii_lower(term)))), rep);
    }
  }
  std::stable_sort(rules.begin(), rules.end(),
                   [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    bool replaced = false;
    if (i == 0 || !is_word_char(text[i - 1])) {
      for (const auto& [term, rep] : rules) {
        if (term.empty() || text.compare(i, term.size(), term) != 0) continue;
        const auto end = i + term.size();
        if (end < text.size() && is_word_char(text[end])) continue;
        out += rep;
        i = end;
        replaced = true;
        break;
      }
    }
    if (!replaced) out += text[i++];
  }
  return out;
}

// Options whose form occurs in `response` or that contain the response.
inline std::vector<const AnswerOption*> containment_matches(std::string_view response,
                                                            const std::vector<NormalizedOption>& options,
                                                            const SynonymTable* synonyms) {
  std::vector<const AnswerOption*> hits;
  const std::string hay = synonyms ? substitute_synonyms(response, *synonyms) : std::string(response);
  for (const auto& n : options) {
    for (const auto& form : n.forms) {
      const std::string f = synonyms ? substitute_synonyms(form, *synonyms) : form;
      if (f.empty()) continue;
      if (contains_phrase(hay, f) || contains_phrase(f, hay)) {
        hits.push_back(n.option);
        break;
      }
    }
  }
  return hits;
}

inline bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// Parses the ordinal out of "option i", "(i)", "i." or a response that is
// exactly the integer i. With allow_trailing, the first three may be
// followed by more text ("(3) Tenant indemnifies Landlord").
inline std::optional<long> numbered_form(std::string_view n, bool allow_trailing) {
  auto read_int = [](std::string_view s, std::size_t& pos) -> std::optional<long> {
    const auto start = pos;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
    if (pos == start || pos - start > 9) return std::nullopt;
    return std::stol(std::string(s.substr(start, pos - start)));
  };
  auto boundary = [allow_trailing](std::string_view s, std::size_t pos) {
    if (pos == s.size()) return true;
    return allow_trailing && (s[pos] == ' ' || s[pos] == ':' || s[pos] == '-' || s[pos] == '.');
  };
  if (all_digits(n)) {
    std::size_t pos = 0;
    return read_int(n, pos);
  }
  if (starts_with(n, "option")) {
    std::size_t pos = 6;
    while (pos < n.size() && (n[pos] == ' ' || n[pos] == '#')) ++pos;
    if (pos < n.size() && n[pos] == '(') {
      ++pos;
      auto v = read_int(n, pos);
      if (v && pos < n.size() && n[pos] == ')' && boundary(n, pos + 1)) return v;
      return std::nullopt;
    }
    auto v = read_int(n, pos);
    if (v && boundary(n, pos)) return v;
    return std::nullopt;
  }
  if (n.front() == '(') {
    std::size_t pos = 1;
    auto v = read_int(n, pos);
    if (v && pos < n.size() && n[pos] == ')' && (pos + 1 == n.size() || (allow_trailing && n[pos + 1] == ' '))) {
      return v;
    }
    return std::nullopt;
  }
  std::size_t pos = 0;
  auto v = read_int(n, pos);
  if (v && pos < n.size() && n[pos] == '.' && (pos + 1 == n.size() || (allow_trailing && n[pos + 1] == ' '))) {
    return v;
  }
  return std::nullopt;
}

inline bool enumeration_marker_at(std::string_view s, std::size_t i) {
  if (i > 0 && !is_space(s[i - 1])) return false;
  std::size_t pos = i;
  if (s[pos] == '(') {
    ++pos;
    const auto start = pos;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
    return pos > start && pos < s.size() && s[pos] == ')' && (pos + 1 == s.size() || is_space(s[pos + 1]));
  }
  const auto start = pos;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
  return pos > start && pos < s.size() && s[pos] == '.' && (pos + 1 == s.size() || is_space(s[pos + 1]));
}

inline std::string strip_bullet(std::string_view s) {
  s = trim(s);
  for (std::string_view b : {"- ", "* ", "• "}) {
    if (starts_with(s, b)) return std::string(trim(s.substr(b.size())));
  }
  return std::string(s);
}

}  // namespace detail

/// Splits a multi-select response on the configured markers and before
/// inline enumeration markers such as "(2) " or "3. ".
inline std::vector<std::string> segment_response(std::string_view raw, const std::vector<std::string>& markers) {
  const std::string lower = ascii_lower(raw);
  std::vector<std::string> sorted = markers;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
  for (auto& m : sorted) m = ascii_lower(m);

  std::vector<std::string> segments;
  std::string current;
  auto flush = [&] {
    auto seg = detail::strip_bullet(current);
    if (!seg.empty()) segments.push_back(std::move(seg));
    current.clear();
  };
  std::size_t i = 0;
  while (i < raw.size()) {
    if (!trim(current).empty() && detail::enumeration_marker_at(raw, i)) flush();
    bool split = false;
    for (const auto& m : sorted) {
      if (m.empty() || lower.compare(i, m.size(), m) != 0) continue;
      // "3. " is an enumeration marker, not a sentence break
      if (m.front() == '.' && (detail::all_digits(trim(current)) || trim(current).empty())) continue;
      flush();
      i += m.size();
      split = true;
      break;
    }
    if (!split) current += raw[i++];
  }
  flush();
  return segments;
}

namespace detail {

inline CanonicalResult canonicalize_single(std::string_view raw, const std::string& n,
                                           const std::vector<NormalizedOption>& options,
                                           const std::vector<std::string>& escapes, const SynonymTable* synonyms,
                                           bool allow_numbered_prefix) {
  const auto unmapped = CanonicalResult{CanonicalAnswer::unmapped(std::string(raw)), {MatchStrategy::none, false, 0}};
  if (n.empty()) return unmapped;

  // (1) exact
  std::set<std::string> exact;
  for (const auto& o : options) {
    if (std::find(o.forms.begin(), o.forms.end(), n) != o.forms.end()) exact.insert(o.option->canonical_id);
  }
  if (exact.size() == 1) return {CanonicalAnswer::selected(std::move(exact)), {MatchStrategy::exact, false, 0}};

  // (2) escape
  for (const auto& e : escapes) {
    if (!e.empty() && (n == e || contains_phrase(n, e))) {
      return {CanonicalAnswer::escape(), {MatchStrategy::escape, false, 0}};
    }
  }

  // (3) numbered
  if (auto ordinal = numbered_form(n, allow_numbered_prefix)) {
    for (const auto& o : options) {
      if (o.option->ordinal == *ordinal) {
        return {CanonicalAnswer::selected({o.option->canonical_id}), {MatchStrategy::numbered, true, 0}};
      }
    }
    if (all_digits(n) || starts_with(n, "option")) return unmapped;
  }

  // (4) substring, (5) synonym substring
  auto hits = containment_matches(n, options, nullptr);
  MatchStrategy strategy = MatchStrategy::substring;
  if (hits.empty() && synonyms != nullptr && !synonyms->groups.empty()) {
    hits = containment_matches(n, options, synonyms);
    strategy = MatchStrategy::synonym_substring;
  }
  if (hits.size() == 1) {
    return {CanonicalAnswer::selected({hits.front()->canonical_id}), {strategy, true, 0}};
  }
  return unmapped;
}

}  // namespace detail

/// Runs the strategy chain: exact, escape, numbered, substring, synonym
/// substring and, for multi-select, per-segment matching. Ambiguity in
/// single mode yields unmapped.
inline CanonicalResult canonicalize(std::string_view raw, const OptionSet& option_set,
                                    const std::vector<std::string>& escape_phrases, const SynonymTable* synonyms,
                                    SelectionMode mode, const CanonicalizeOptions& config = {}) {
  const auto options = detail::normalize_options(option_set, config.normalize);
  std::vector<std::string> escapes;
  for (const auto& e : escape_phrases) escapes.push_back(normalize(e, config.normalize));

  const auto n = normalize(raw, config.normalize);
  // numbered prefixes ("1. ...") would hide later items of a multi-select list
  auto result = detail::canonicalize_single(raw, n, options, escapes, synonyms, mode == SelectionMode::single);
  if (result.answer.kind != AnswerKind::unmapped || mode == SelectionMode::single) return result;

  // (6) multi-select: match each segment on its own and union the picks
  std::set<std::string> picked;
  int matched = 0;
  for (const auto& segment : segment_response(raw, config.segment_markers)) {
    const auto sn = normalize(segment, config.normalize);
    auto r = detail::canonicalize_single(segment, sn, options, escapes, synonyms, true);
    if (r.answer.kind == AnswerKind::selected) {
      picked.insert(r.answer.option_ids.begin(), r.answer.option_ids.end());
      ++matched;
    }
  }
  if (!picked.empty()) {
    return {CanonicalAnswer::selected(std::move(picked)), {MatchStrategy::segmented_multi, true, matched}};
  }
  return result;
}

inline CanonicalResult canonicalize(std::string_view raw, const OptionSet& option_set,
                                    const std::vector<std::string>& escape_phrases,
                                    const std::optional<SynonymTable>& synonyms, SelectionMode mode,
                                    const CanonicalizeOptions& config = {}) {
  return canonicalize(raw, option_set, escape_phrases, synonyms ? &*synonyms : nullptr, mode, config);
}

}  // namespace caf
