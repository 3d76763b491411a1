#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "caf/canonicalize.hpp"
#include "caf/corpus.hpp"
#include "caf/error.hpp"
#include "caf/templating.hpp"
#include "caf/util.hpp"

namespace caf {

template <class T>
struct Artifact {
  T value;
  std::filesystem::path path;
  std::string sha256;  // of the file bytes
};

/// Everything under an artifact directory:
///
///   questions.json            {"questions":[{id,text,mode,option_set_id}]}
///   templates/*.tmpl          prompt templates
///   option_sets/*.json        option sets
///   example_sets/*.json       in-context example sets
///   synonyms/*.json           synonym tables
///   datasets/*.jsonl          clause datasets, keyed by file stem
///
/// Missing subdirectories are treated as empty.
class ArtifactStore {
 public:
  ArtifactStore() = default;

  static ArtifactStore load(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw Error(ErrorKind::config, "artifact directory not found: " + dir.string());
    ArtifactStore store;
    store.root_ = dir;
    if (const auto q = dir / "questions.json"; fs::exists(q)) {
      const auto bytes = read_file(q);
      try {
        const auto doc = nlohmann::json::parse(bytes);
        for (const auto& j : doc.at("questions")) {
          auto question = question_from_json(j);
          const auto id = question.id;
          store.questions_[id] = {std::move(question), q, sha256_hex(bytes)};
        }
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, q.string() + ": " + e.what());
      }
    }
    for_each_file(dir / "templates", ".tmpl", [&](const fs::path& p, const std::string& bytes) {
      PromptTemplate t;
      try {
        t = parse_template(bytes);
      } catch (const Error& e) {
        throw Error(e.kind(), p.string() + ": " + e.what());
      }
      const auto id = t.id;
      store.insert(store.templates_, id, {std::move(t), p, sha256_hex(bytes)}, "template");
    });
    for_each_file(dir / "option_sets", ".json", [&](const fs::path& p, const std::string& bytes) {
      auto set = parse_json<OptionSet>(p, bytes, option_set_from_json);
      const auto id = set.id;
      store.insert(store.option_sets_, id, {std::move(set), p, sha256_hex(bytes)}, "option set");
    });
    for_each_file(dir / "example_sets", ".json", [&](const fs::path& p, const std::string& bytes) {
      auto set = parse_json<ExampleSet>(p, bytes, example_set_from_json);
      const auto id = set.id;
      store.insert(store.example_sets_, id, {std::move(set), p, sha256_hex(bytes)}, "example set");
    });
    for_each_file(dir / "synonyms", ".json", [&](const fs::path& p, const std::string& bytes) {
      auto table = parse_json<SynonymTable>(p, bytes, synonym_table_from_json);
      const auto id = table.id;
      store.insert(store.synonyms_, id, {std::move(table), p, sha256_hex(bytes)}, "synonym table");
    });
    for_each_file(dir / "datasets", ".jsonl", [&](const fs::path& p, const std::string& bytes) {
      std::istringstream in(bytes);
      Dataset ds;
      try {
        ds = parse_dataset(in);
      } catch (const Error& e) {
        throw Error(e.kind(), p.string() + ": " + e.what());
      }
      store.insert(store.datasets_, p.stem().string(), {std::move(ds), p, sha256_hex(bytes)}, "dataset");
    });
    for (const auto& [id, q] : store.questions_) {
      if (!store.option_sets_.contains(q.value.option_set_id)) {
        throw Error(ErrorKind::validation,
                    "question " + id + " references unknown option set " + q.value.option_set_id);
      }
    }
    return store;
  }

  const std::filesystem::path& root() const { return root_; }

  const Artifact<PromptTemplate>& template_(const std::string& id) const { return get(templates_, id, "template"); }
  const Artifact<OptionSet>& option_set(const std::string& id) const { return get(option_sets_, id, "option set"); }
  const Artifact<ExampleSet>& example_set(const std::string& id) const { return get(example_sets_, id, "example set"); }
  const Artifact<SynonymTable>& synonym_table(const std::string& id) const {
    return get(synonyms_, id, "synonym table");
  }
  const Artifact<Question>& question(const std::string& id) const { return get(questions_, id, "question"); }
  const Artifact<Dataset>& dataset(const std::string& id) const { return get(datasets_, id, "dataset"); }

  const std::map<std::string, Artifact<PromptTemplate>>& templates() const { return templates_; }
  const std::map<std::string, Artifact<OptionSet>>& option_sets() const { return option_sets_; }
  const std::map<std::string, Artifact<ExampleSet>>& example_sets() const { return example_sets_; }
  const std::map<std::string, Artifact<SynonymTable>>& synonym_tables() const { return synonyms_; }
  const std::map<std::string, Artifact<Question>>& questions() const { return questions_; }
  const std::map<std::string, Artifact<Dataset>>& datasets() const { return datasets_; }

 private:
  template <class T>
  static const Artifact<T>& get(const std::map<std::string, Artifact<T>>& m, const std::string& id, const char* what) {
    auto it = m.find(id);
    if (it == m.end()) throw Error(ErrorKind::not_found, std::string("unknown ") + what + ": " + id);
    return it->second;
  }

  template <class T>
  static void insert(std::map<std::string, Artifact<T>>& m, const std::string& id, Artifact<T> a, const char* what) {
    const auto path = a.path;
    if (!m.emplace(id, std::move(a)).second) {
      throw Error(ErrorKind::validation, std::string("duplicate ") + what + " id " + id + " in " + path.string());
    }
  }

  template <class T, class F>
  static T parse_json(const std::filesystem::path& p, const std::string& bytes, F from_json) {
    try {
      return from_json(nlohmann::json::parse(bytes));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse, p.string() + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.kind(), p.string() + ": " + e.what());
    }
  }

  template <class F>
  static void for_each_file(const std::filesystem::path& dir, const std::string& ext, F fn) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) return;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ext) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) fn(f, read_file(f));
  }

  std::filesystem::path root_;
  std::map<std::string, Artifact<Question>> questions_;
  std::map<std::string, Artifact<PromptTemplate>> templates_;
  std::map<std::string, Artifact<OptionSet>> option_sets_;
  std::map<std::string, Artifact<ExampleSet>> example_sets_;
  std::map<std::string, Artifact<SynonymTable>> synonyms_;
  std::map<std::string, Artifact<Dataset>> datasets_;
};

}  // namespace caf
