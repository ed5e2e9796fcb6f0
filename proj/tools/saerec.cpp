#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "saerec/pipeline/run.hpp"
#include "saerec/service.hpp"

using namespace saerec;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::vector<std::string> overrides;
  bool print_config = false;
  bool verbose = false;
};

service::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int run_stage(const Options& o, const std::string& until) {
  json doc = json::object();
  try {
    if (!o.config.empty()) {
      std::ifstream in(o.config);
      if (!in) throw std::runtime_error("cannot open " + o.config);
      doc = json::parse(in);
    }
    if (o.seed) doc["seed"] = *o.seed;
    for (const auto& s : o.overrides) pipeline::apply_override(doc, s);
    auto cfg = pipeline::config_from_json(doc);
    if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
    if (o.jobs) cfg.jobs = *o.jobs;
    if (o.print_config) {
      std::cout << pipeline::config_to_json(cfg).dump(2) << "\n";
      return 0;
    }
    const auto result = pipeline::run(cfg, until, o.verbose);
    for (const auto& l : result.log) {
      std::cout << fmt::format("{:<10} {:>8.1f}s{}\n", l.name, l.seconds, l.cached ? "  (cached)" : "");
    }
    std::cout << "artifacts in " << cfg.output_dir.string() << "\n";
    return 0;
  } catch (const pipeline::StageError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "[config] " << e.what() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-autoencoder interpretation and steering of a sequential recommender"};
  app.require_subcommand(1);
  Options o;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "data"},          {"train-model", "model"}, {"harvest", "harvest"},
      {"train-sae", "sae"},          {"sae-grid", "sae_grid"}, {"interpret", "interpret"},
      {"steer-sweep", "steer"},      {"probe", "probe"},       {"compare", "compare"},
      {"report", "report"},          {"run-all", "bundle"},
  };
  for (const auto& [name, stage] : commands) {
    auto* sub = app.add_subcommand(name, "Run the pipeline up to the " + stage + " stage");
    sub->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--output-dir", o.output_dir, "Run directory");
    sub->add_option("--seed", o.seed, "Global seed");
    sub->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--set", o.overrides, "Config override key.path=value")->take_all();
    sub->add_flag("--print-config", o.print_config, "Print the resolved config and exit");
    sub->add_flag("--verbose", o.verbose, "Progress on stderr");
    sub->callback([&o, stage = stage] { throw CLI::RuntimeError(run_stage(o, stage)); });
  }

  std::string bundle_dir = "run/bundle", host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Serve a bundle over HTTP");
  serve->add_option("--bundle-dir", bundle_dir, "Bundle directory")->check(CLI::ExistingDirectory);
  serve->add_option("--port", port, "Port")->check(CLI::Range(0, 65535));
  serve->add_option("--host", host, "Interface");
  serve->callback([&] {
    service::Server server(bundle_dir);
    const int bound = server.bind(host, port);
    if (bound < 0) {
      std::cerr << "[serve] cannot bind " << host << ":" << port << "\n";
      throw CLI::RuntimeError(2);
    }
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.start_loading();
    std::cerr << "listening on http://" << host << ":" << bound << "/api/v1\n";
    server.listen();
    g_server = nullptr;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  return 0;
}
