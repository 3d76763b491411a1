// Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
// nonzero when any check fails.
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "caf/artifacts.hpp"
#include "caf/baseline.hpp"
#include "caf/canonicalize.hpp"
#include "caf/http_transport.hpp"
#include "caf/pipeline.hpp"
#include "test_support.hpp"

using namespace caf;

namespace {

struct Failure {
  std::string what;
};

struct Skip {
  std::string why;
};

void check(bool ok, const std::string& what) {
  if (!ok) throw Failure{what};
}

int failures = 0;

void criterion(const std::string& name, const std::function<void()>& fn, double max_seconds = 0) {
  const auto start = std::chrono::steady_clock::now();
  try {
    fn();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (max_seconds > 0 && secs >= max_seconds) throw Failure{"took " + std::to_string(secs) + " s"};
    std::cout << "PASS " << name << "\n";
  } catch (const Skip& s) {
    std::cout << "SKIP " << name << ": " << s.why << "\n";
  } catch (const Failure& f) {
    ++failures;
    std::cout << "FAIL " << name << ": " << f.what << "\n";
  } catch (const std::exception& e) {
    ++failures;
    std::cout << "FAIL " << name << ": exception: " << e.what() << "\n";
  }
}

const ArtifactStore& store() {
  static const ArtifactStore s = ArtifactStore::load(caf_test::data_dir());
  return s;
}

RunEnvironment offline() {
  RunEnvironment env;
  env.sleeper = [](auto) {};
  env.clock = [] { return std::string("2026-01-01T00:00:00Z"); };
  env.endpoint = {"", "http://127.0.0.1:9"};
  return env;
}

RunConfig config(const std::string& name, const caf_test::TempDir& out) {
  auto c = load_run_config(caf_test::data_dir() / "configs" / (name + ".json"));
  c.output_path = (out / "report.json").string();
  return c;
}

void table1() {
  const auto s = caf_test::indemnity_options();
  const std::vector<int> gold = {6, 71, 39, 5};
  const std::vector<std::pair<std::vector<int>, double>> rows = {
      {{6, 60, 23, 1}, 0.7438}, {{0, 10, 34, 0}, 0.3636}, {{0, 1, 0, 3}, 0.0331}};
  for (const auto& [correct, expected] : rows) {
    const auto m = compute_metrics(caf_test::synthetic_single_run(s, gold, correct), s);
    std::ostringstream msg;
    msg << "accuracy " << m.accuracy << " expected " << expected;
    check(std::abs(m.accuracy - expected) <= 1e-4, msg.str());
  }
}

void lenient() {
  const auto s = caf_test::option_set("T", {"a", "b", "c", "d", "e"}, "q");
  const Question q{"q", "", QuestionMode::multi_select, "T"};
  const GoldLabel g{"c", "q", {"o2", "o5"}, false};
  check(score_lenient(CanonicalAnswer::selected({"o2"}), g, q), "{2} vs {2,5} should score");
  check(!score_lenient(CanonicalAnswer::selected({"o1"}), g, q), "{1} vs {2,5} should not score");
  const auto m = compute_metrics(caf_test::synthetic_lenient_run(s, 143, 13, 85, q), s);
  check(m.total == 143 && m.correct == 85, "synthetic run counts");
  check(std::abs(m.accuracy - 0.594) <= 1e-3, "accuracy " + std::to_string(m.accuracy));
}

void canonicalizer() {
  int checked = 0;
  for (const auto& [id, art] : store().option_sets()) {
    const auto& s = art.value;
    std::optional<SynonymTable> syn;
    if (s.synonym_table_id) syn = store().synonym_table(*s.synonym_table_id).value;
    const auto mode = store().question(s.question_id).value.mode == QuestionMode::multi_select ? SelectionMode::multi
                                                                                                 : SelectionMode::single;
    const std::vector<std::string> escapes = {"The clause is silent", "Unable to determine"};
    for (const auto& o : s.options) {
      std::vector<std::string> surfaces = {o.text};
      surfaces.insert(surfaces.end(), o.aliases.begin(), o.aliases.end());
      for (const auto& text : surfaces) {
        const auto r = canonicalize(text, s, escapes, syn, mode);
        check(r.answer == CanonicalAnswer::selected({o.canonical_id}) && r.trace.strategy == MatchStrategy::exact,
              id + ": \"" + text + "\" did not map exactly to " + o.canonical_id);
        ++checked;
      }
      if (mode == SelectionMode::single) {
        const auto i = std::to_string(o.ordinal);
        for (const auto& raw : {"Option " + i, "(" + i + ")", i + ".", i}) {
          const auto r = canonicalize(raw, s, escapes, syn, mode);
          check(r.answer == CanonicalAnswer::selected({o.canonical_id}), id + ": \"" + raw + "\" numbered form");
        }
      }
    }
    for (const auto& e : escapes) {
      check(canonicalize(e, s, escapes, syn, mode).answer.kind == AnswerKind::escape, id + ": escape \"" + e + "\"");
    }
  }
  check(checked > 0, "no option texts checked");
  for (const auto& [id, t] : store().templates()) {
    for (const std::string e : {"The clause is silent", "Unable to determine"}) {
      const auto& phrases = t.value.escape_phrases;
      check(std::find(phrases.begin(), phrases.end(), e) != phrases.end(), id + " lacks escape phrase " + e);
    }
  }
}

long double oracle_cosine(const std::vector<double>& u, const std::vector<double>& v) {
  long double dot = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<long double>(u[i]) * v[i];
    uu += static_cast<long double>(u[i]) * u[i];
    vv += static_cast<long double>(v[i]) * v[i];
  }
  return dot / std::sqrt(uu * vv);
}

void baseline_oracle() {
  check(std::abs(cosine(std::vector<double>{1, 2, 3}, std::vector<double>{4, 5, 6}) - 32.0 / std::sqrt(14.0 * 77.0)) <= 1e-9,
        "hand cosine");
  std::mt19937 rng(7);
  std::uniform_int_distribution<int> dim_d(1, 8), opt_d(2, 6), small(-3, 3);
  std::uniform_real_distribution<double> real(-1.0, 1.0), scale(0.01, 100.0);
  for (int n = 0; n < 200; ++n) {
    const int dim = dim_d(rng), count = opt_d(rng);
    const bool integer = n % 2 == 0;
    auto vec = [&] {
      std::vector<double> v(dim);
      do {
        for (auto& x : v) x = integer ? small(rng) : real(rng);
      } while (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; }));
      return v;
    };
    std::vector<std::string> texts;
    for (int i = 0; i < count; ++i) texts.push_back("opt " + std::to_string(i + 1));
    const auto set = caf_test::option_set("X", texts);
    const auto clause_vec = vec();
    std::vector<std::vector<double>> opts;
    for (int i = 0; i < count; ++i) opts.push_back(vec());
    if (n % 5 == 0) opts.back() = opts.front();

    std::vector<long double> scores;
    for (const auto& o : opts) {
      scores.push_back(oracle_cosine(clause_vec, o));
      check(std::abs(cosine(clause_vec, o) - static_cast<double>(scores.back())) <= 1e-9, "cosine vs oracle");
    }
    const long double best = *std::max_element(scores.begin(), scores.end());
    std::string expected;
    for (int i = 0; i < count; ++i) {
      if (scores[i] >= best - 1e-12L) {
        expected = set.options[i].canonical_id;
        break;
      }
    }

    auto predict_table = [&](double clause_scale, const std::vector<double>& option_scales) {
      std::map<std::string, std::vector<double>> table;
      auto cv = clause_vec;
      for (auto& x : cv) x *= clause_scale;
      table["clause"] = cv;
      for (int i = 0; i < count; ++i) {
        auto v = opts[i];
        for (auto& x : v) x *= option_scales[i];
        table[texts[i]] = v;
      }
      Embedder e(std::make_shared<ScriptedEmbeddingBackend>(table));
      return predict(caf_test::clause("c", "clause"), set, e, "m").predicted;
    };
    const auto plain = predict_table(1.0, std::vector<double>(count, 1.0));
    check(plain == expected, "instance " + std::to_string(n) + ": predicted " + plain + ", oracle " + expected);
    std::vector<double> scales;
    for (int i = 0; i < count; ++i) scales.push_back(scale(rng));
    check(predict_table(scale(rng), scales) == plain, "instance " + std::to_string(n) + ": rescaling changed prediction");
  }
}

void replay_determinism() {
  std::string first;
  for (int i = 0; i < 5; ++i) {
    caf_test::TempDir out;
    const auto r = cmd_eval(config("mini_p1_s1_replay", out), offline());
    check(r.exit_code == 0, "cmd_eval: " + r.error);
    std::ifstream in(out / "report.json", std::ios::binary);
    std::ostringstream bytes;
    bytes << in.rdbuf();
    if (i == 0) first = bytes.str();
    check(!first.empty() && bytes.str() == first, "report bytes differ on execution " + std::to_string(i + 1));
  }
  caf_test::TempDir out;
  const auto stable = cmd_consistency(config("mini_p1_s1_replay", out), 5, offline());
  check(stable.exit_code == 0, "cmd_consistency: " + stable.error);
  check(stable.report["consistency"]["stability"] == 1.0, "stability " + stable.report["consistency"]["stability"].dump());
  const auto perturbed = cmd_consistency(config("mini_p1_s1_perturbed_replay", out), 5, offline());
  check(perturbed.exit_code == 0, "perturbed: " + perturbed.error);
  check(perturbed.report["consistency"]["changed_clauses"].size() == 1,
        "changed " + perturbed.report["consistency"]["changed_clauses"].dump());
}

void icl_shape() {
  const auto& p1 = store().template_("P1").value;
  const auto& s1 = store().option_set("S1").value;
  const auto& ds = store().dataset("indemnity").value;
  const auto base = render(p1, s1, ds.clauses[10]);
  const std::vector<std::vector<std::string>> combos = {{}, {"E1"}, {"E1", "E2"}};
  for (const auto& ids : combos) {
    std::vector<ExampleSet> sets;
    std::size_t k = 0;
    for (const auto& id : ids) {
      sets.push_back(store().example_set(id).value);
      k += sets.back().examples.size();
    }
    const auto seeded = seed_with_examples(base, sets, p1, s1, ds);
    const auto label = "k=" + std::to_string(k);
    check(seeded.messages.size() == 2 * k + 1, label + ": " + std::to_string(seeded.messages.size()) + " messages");
    for (std::size_t i = 0; i < seeded.messages.size(); ++i) {
      check(seeded.messages[i].role == (i % 2 == 0 ? Role::user : Role::assistant), label + ": alternation");
    }
    check(seeded.messages.back() == base.messages.back(), label + ": final message changed");
  }
}

void corpus_bounds() {
  const std::string manifest = R"({"kind":"manifest","question_id":"q"})" "\n";
  auto line = [](std::size_t n) {
    return nlohmann::json{{"kind", "clause"}, {"id", "c"}, {"clause_type", "t"}, {"text", std::string(n, 'a')}}.dump() + "\n";
  };
  caf_test::parse(manifest + line(19999));
  try {
    caf_test::parse(manifest + line(20000));
  } catch (const Error& e) {
    check(e.kind() == ErrorKind::validation, "wrong error kind");
    return;
  }
  throw Failure{"20,000-character clause accepted"};
}

void live_smoke() {
  const char* key = std::getenv("CAF_API_KEY");
  if (!key || !*key) throw Skip{"CAF_API_KEY not set"};
  auto c = load_run_config(caf_test::data_dir() / "configs" / "indemnity_p1_s1_live.json");
  RunEnvironment env;
  env.transport = [](const std::string& base_url) { return std::make_shared<HttplibTransport>(base_url); };
  const auto& ds = store().dataset("indemnity").value;
  const Clause* mutual = nullptr;
  for (const auto& l : ds.labels) {
    if (l.option_ids == std::set<std::string>{"mutual"}) {
      mutual = ds.find_clause(l.clause_id);
      break;
    }
  }
  check(mutual != nullptr, "no mutual clause in the bundled dataset");
  const auto& p1 = store().template_("P1").value;
  const auto& s1 = store().option_set("S1").value;
  const auto provider = make_chat_provider(c, env);
  const auto response = provider->chat_complete(build_request(c.provider, render(p1, s1, *mutual)));
  const auto r = canonicalize(response.text, s1, p1.escape_phrases, store().synonym_table("parties").value, SelectionMode::single);
  check(r.answer.kind != AnswerKind::unmapped, "unmapped response: " + response.text);
}

}  // namespace

int main() {
  criterion("metric reconstruction (Table 1 counts)", table1, 1.0);
  criterion("lenient scoring (143 records, 85 correct)", lenient, 1.0);
  criterion("canonicalizer round-trip", canonicalizer);
  criterion("baseline oracle equivalence", baseline_oracle);
  criterion("replay determinism and consistency", replay_determinism);
  criterion("in-context seeding shape", icl_shape);
  criterion("corpus length bounds", corpus_bounds);
  criterion("live smoke", live_smoke);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
