#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <map>
#include <string>
#include <vector>

#include "caf/canonicalize.hpp"
#include "caf/corpus.hpp"
#include "caf/error.hpp"
#include "caf/eval.hpp"
#include "caf/providers.hpp"
#include "caf/templating.hpp"

// Zero-shot semantic-similarity baseline: embed the clause and every option
// and pick the option whose embedding is closest by cosine.
namespace caf {

inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) {
    throw Error(ErrorKind::dimension,
                "cosine of vectors with dimensions " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
  if (u.empty()) throw Error(ErrorKind::dimension, "cosine of empty vectors");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw Error(ErrorKind::dimension, "cosine with a zero vector");
  const double c = dot / (std::sqrt(uu) * std::sqrt(vv));
  return std::clamp(c, -1.0, 1.0);
}

inline double cosine(const EmbeddingVector& u, const EmbeddingVector& v) { return cosine(u.values, v.values); }

struct SimilarityPrediction {
  std::string clause_id;
  std::map<std::string, double> scores;  // canonical_id -> cosine
  std::string predicted;

  bool operator==(const SimilarityPrediction&) const = default;
};

// Scores closer than this are a tie; rounding in unit normalization would
// otherwise let a rescaled duplicate vector win by one ulp.
inline constexpr double kTieEpsilon = 1e-12;

/// Lowest-ordinal option whose score is within kTieEpsilon of the maximum.
inline std::string argmax_option(const OptionSet& options, const std::map<std::string, double>& scores) {
  if (options.options.empty()) throw Error(ErrorKind::validation, "argmax over an empty option set");
  std::vector<const AnswerOption*> ordered;
  for (const auto& o : options.options) ordered.push_back(&o);
  std::sort(ordered.begin(), ordered.end(),
            [](const AnswerOption* a, const AnswerOption* b) { return a->ordinal < b->ordinal; });
  double best = scores.at(ordered.front()->canonical_id);
  for (const auto* o : ordered) best = std::max(best, scores.at(o->canonical_id));
  for (const auto* o : ordered) {
    if (scores.at(o->canonical_id) >= best - kTieEpsilon) return o->canonical_id;
  }
  return ordered.front()->canonical_id;
}

inline SimilarityPrediction predict(const Clause& clause, const OptionSet& options, Embedder& embedder,
                                    const std::string& model) {
  std::vector<std::string> texts{clause.text};
  for (const auto& o : options.options) texts.push_back(o.text);
  const auto vectors = embedder.embed(texts, model);
  SimilarityPrediction p;
  p.clause_id = clause.id;
  for (std::size_t i = 0; i < options.options.size(); ++i) {
    p.scores[options.options[i].canonical_id] = cosine(vectors[0], vectors[i + 1]);
  }
  p.predicted = argmax_option(options, p.scores);
  return p;
}

struct BaselineRun {
  EvalRun run;
  std::vector<SimilarityPrediction> predictions;
  std::map<std::string, std::string> failures;  // clause_id -> error message
};

/// One prediction per clause. Clauses whose embedding fails are reported in
/// `failures` and left out of the run.
inline BaselineRun run_baseline(const Dataset& dataset, const OptionSet& options, const Question& question,
                                Embedder& embedder, const std::string& model, std::size_t parallelism = 1) {
  BaselineRun out;
  if (dataset.clauses.empty()) return out;
  // option vectors are constant for the run; warm the cache once
  std::vector<std::string> option_texts;
  for (const auto& o : options.options) option_texts.push_back(o.text);
  embedder.embed(option_texts, model);

  std::vector<std::optional<SimilarityPrediction>> slots(dataset.clauses.size());
  std::vector<std::string> errors(dataset.clauses.size());
  parallel_for(dataset.clauses.size(), parallelism, [&](std::size_t i) {
    try {
      slots[i] = predict(dataset.clauses[i], options, embedder, model);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& clause = dataset.clauses[i];
    if (!slots[i]) {
      out.failures[clause.id] = errors[i];
      continue;
    }
    const auto predicted = slots[i]->predicted;
    out.predictions.push_back(std::move(*slots[i]));
    const GoldLabel* gold = dataset.find_label(clause.id, question.id);
    if (!gold) continue;
    EvalRecord record;
    record.clause_id = clause.id;
    record.raw = options.by_id(predicted)->text;
    record.answer = CanonicalAnswer::selected({predicted});
    record.trace = {MatchStrategy::exact, false, 0};
    record.gold = *gold;
    record.correct = score(record.answer, *gold, question);
    out.run.records.push_back(std::move(record));
  }
  return out;
}

}  // namespace caf
