#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "caf/http_transport.hpp"
#include "caf/pipeline.hpp"
#include "caf/service.hpp"

namespace {

caf::Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

struct Overrides {
  std::string config;
  std::optional<std::string> template_id;
  std::optional<std::string> option_set_id;
  std::vector<std::string> example_set_ids;
  std::optional<std::string> provider_mode;
  std::optional<std::string> cassette;
  std::optional<std::string> out;
};

void add_run_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  cmd->add_option("--template", o.template_id, "prompt template id");
  cmd->add_option("--options", o.option_set_id, "option set id");
  cmd->add_option("--examples", o.example_set_ids, "in-context example set ids (replaces the config list)");
  cmd->add_option("--provider-mode", o.provider_mode, "live, record, replay or mock");
  cmd->add_option("--cassette", o.cassette, "cassette path (relative to the working directory)");
  cmd->add_option("--out", o.out, "report path (relative to the working directory)");
}

std::string absolute(const std::string& p) { return std::filesystem::absolute(p).string(); }

caf::RunConfig load_config(const Overrides& o) {
  auto c = caf::load_run_config(o.config);
  if (o.template_id) c.template_id = *o.template_id;
  if (o.option_set_id) c.option_set_id = *o.option_set_id;
  if (!o.example_set_ids.empty()) c.example_set_ids = o.example_set_ids;
  if (o.provider_mode) c.provider.mode = caf::provider_mode_from_string(*o.provider_mode);
  if (o.cassette) c.provider.cassette_path = absolute(*o.cassette);
  if (o.out) c.output_path = absolute(*o.out);
  return c;
}

caf::RunEnvironment environment() {
  caf::RunEnvironment env;
  env.transport = [](const std::string& base_url) { return std::make_shared<caf::HttplibTransport>(base_url); };
  return env;
}

int finish(const caf::CommandResult& r) {
  if (r.exit_code != 0) {
    std::cerr << "caf: " << r.error << "\n";
    return r.exit_code;
  }
  std::cout << r.table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"caf: structured answers to contract-clause questions"};
  app.require_subcommand(1);

  Overrides eval_o, baseline_o, consistency_o;
  auto* eval = app.add_subcommand("eval", "run a prompt configuration over a dataset and score it");
  add_run_flags(eval, eval_o);
  auto* baseline = app.add_subcommand("baseline", "zero-shot semantic similarity baseline");
  add_run_flags(baseline, baseline_o);
  auto* cons = app.add_subcommand("consistency", "repeat a run k times and report answer stability");
  add_run_flags(cons, consistency_o);
  int k = 5;
  cons->add_option("--k", k, "number of runs (>= 2)");

  auto* serve = app.add_subcommand("serve", "HTTP service for the exploration workbench");
  std::optional<std::string> serve_config;
  std::string artifacts = "data";
  std::string store = "caf_sessions.jsonl";
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--config", serve_config, "JSON run configuration for provider settings")->check(CLI::ExistingFile);
  auto* artifacts_opt = serve->add_option("--artifacts", artifacts, "artifact directory (default: the config's, else data)");
  serve->add_option("--store", store, "session log (JSON Lines, append-only)");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port (0 picks a free one)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*eval) return finish(caf::cmd_eval(load_config(eval_o), environment()));
    if (*baseline) return finish(caf::cmd_baseline(load_config(baseline_o), environment()));
    if (*cons) {
      if (k < 2) {
        std::cerr << "caf: consistency needs --k >= 2\n";
        return 64;
      }
      return finish(caf::cmd_consistency(load_config(consistency_o), k, environment()));
    }
    if (*serve) {
      caf::ServiceOptions opts;
      opts.artifacts_dir = artifacts;
      opts.store_path = store;
      if (serve_config) {
        opts.run = caf::load_run_config(*serve_config);
        if (artifacts_opt->count() == 0) opts.artifacts_dir = opts.run.resolve(opts.run.artifacts_dir);
      }
      if (const char* token = std::getenv("CAF_SERVICE_TOKEN"); token && *token) opts.token = token;
      opts.env = environment();
      caf::Service service(std::move(opts));
      const int bound = service.bind(host, port);
      std::cout << "listening on http://" << host << ":" << bound << std::endl;
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      service.listen();
      g_service = nullptr;
      return 0;
    }
  } catch (const caf::Error& e) {
    std::cerr << "caf: " << caf::to_string(e.kind()) << " error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
