#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "caf/corpus.hpp"
#include "caf/eval.hpp"
#include "caf/templating.hpp"

namespace caf_test {

inline std::filesystem::path data_dir() { return CAF_DATA_DIR; }

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("caf-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline caf::Dataset parse(const std::string& jsonl) {
  std::istringstream in(jsonl);
  return caf::parse_dataset(in);
}

inline caf::OptionSet option_set(const std::string& id, const std::vector<std::string>& texts,
                                 const std::string& question = "q") {
  caf::OptionSet s;
  s.id = id;
  s.question_id = question;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    s.options.push_back({static_cast<int>(i) + 1, "o" + std::to_string(i + 1), texts[i], {}});
  }
  return s;
}

/// Four-option indemnity set with the ids used by the bundled fixtures.
inline caf::OptionSet indemnity_options() {
  caf::OptionSet s;
  s.id = "S1";
  s.question_id = "indemnity";
  s.synonym_table_id = "parties";
  s.options = {{1, "landlord_indemnifies_tenant", "Landlord indemnifies Tenant.", {}},
               {2, "tenant_indemnifies_landlord", "Tenant indemnifies Landlord.", {}},
               {3, "mutual", "There is mutual indemnification.", {}},
               {4, "none", "No indemnification.", {}}};
  return s;
}

inline caf::PromptTemplate simple_template(caf::SelectionMode mode = caf::SelectionMode::single) {
  caf::PromptTemplate t;
  t.id = "T";
  t.body = "Pick one.\n{{Options}}\n{{Clause}}";
  t.selection_mode = mode;
  t.escape_phrases = {"The clause is silent"};
  return t;
}

inline caf::Clause clause(const std::string& id, const std::string& text) { return {id, "test", text, std::nullopt}; }

/// Single-select run over gold distribution `gold` (per ordinal) where the
/// first correct[i] clauses of option i are answered right and the rest are
/// answered with the next option.
inline std::vector<caf::EvalRecord> synthetic_single_run(const caf::OptionSet& s, const std::vector<int>& gold,
                                                         const std::vector<int>& correct) {
  std::vector<caf::EvalRecord> out;
  const int n = static_cast<int>(s.options.size());
  for (int i = 0; i < n; ++i) {
    const auto& id = s.by_ordinal(i + 1)->canonical_id;
    const auto& wrong = s.by_ordinal((i + 1) % n + 1)->canonical_id;
    for (int k = 0; k < gold[i]; ++k) {
      caf::EvalRecord r;
      r.clause_id = id + "-" + std::to_string(k);
      r.gold = {r.clause_id, s.question_id, {id}, false};
      r.answer = caf::CanonicalAnswer::selected({k < correct[i] ? id : wrong});
      r.raw = k < correct[i] ? s.by_id(id)->text : s.by_id(wrong)->text;
      r.trace = {caf::MatchStrategy::exact, false, 0};
      r.correct = k < correct[i];
      out.push_back(std::move(r));
    }
  }
  return out;
}

/// Multi-select run of `total` clauses (the last `insufficient` of them
/// lacking information) where exactly `correct` are lenient-correct.
inline std::vector<caf::EvalRecord> synthetic_lenient_run(const caf::OptionSet& s, int total, int insufficient,
                                                          int correct, const caf::Question& q) {
  std::vector<caf::EvalRecord> out;
  const int n = static_cast<int>(s.options.size());
  for (int k = 0; k < total; ++k) {
    caf::EvalRecord r;
    r.clause_id = "m-" + std::to_string(k);
    const auto& a = s.options[k % n].canonical_id;
    const auto& b = s.options[(k + 1) % n].canonical_id;
    const auto& c = s.options[(k + 2) % n].canonical_id;
    if (k >= total - insufficient) {
      r.gold = {r.clause_id, q.id, {}, true};
    } else {
      r.gold = {r.clause_id, q.id, {a, b}, false};
    }
    // overlap with gold on one id, or pick something disjoint
    r.answer = k < correct ? (r.gold.insufficient ? caf::CanonicalAnswer::escape() : caf::CanonicalAnswer::selected({b, c}))
                           : caf::CanonicalAnswer::selected({c});
    r.raw = "r" + std::to_string(k % 7);
    r.correct = caf::score_lenient(r.answer, r.gold, q);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace caf_test
