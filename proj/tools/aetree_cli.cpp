// Command-line front end. Options are declared from the command table in
// pipeline.hpp; only options given on the command line become flags, the rest
// resolve through the environment, the config file and the defaults.

#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aetree/pipeline.hpp"

namespace {

bool is_boolean(const aetree::ParamSpec& p) { return p.default_value == "true" || p.default_value == "false"; }

struct Bound {
  std::string key;
  CLI::Option* option = nullptr;
  std::string text;
  bool boolean = false;
  bool on = false;
};

void bind(CLI::App& app, const aetree::ParamSpec& p, std::vector<std::unique_ptr<Bound>>& out) {
  auto b = std::make_unique<Bound>();
  b->key = p.key;
  b->boolean = is_boolean(p);
  const std::string help = p.help + (p.default_value.empty() ? "" : " [default: " + p.default_value + "]");
  if (b->boolean)
    b->option = app.add_flag("--" + p.key + ",!--no-" + p.key, b->on, help);
  else
    b->option = app.add_option("--" + p.key, b->text, help);
  out.push_back(std::move(b));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical layout autoencoder: ingest, train, reconstruct, generate and analyse building layouts"};
  app.set_version_flag("--version", std::string(aetree::kToolName) + ' ' + aetree::kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();

  std::vector<std::unique_ptr<Bound>> global;
  std::string config_path;
  auto* config_opt = app.add_option("--config", config_path, "config file of 'key = value' lines");
  for (const auto& p : aetree::command_params("synth"))
    if (p.key == "out" || p.key == "seed" || p.key == "threads" || p.key == "verbose") bind(app, p, global);

  std::map<std::string, std::vector<std::unique_ptr<Bound>>> local;
  for (const auto& name : aetree::command_names()) {
    auto* sub = app.add_subcommand(name);
    for (const auto& p : aetree::command_params(name)) {
      const bool is_global = std::any_of(global.begin(), global.end(), [&](const auto& g) { return g->key == p.key; });
      if (!is_global) bind(*sub, p, local[name]);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? aetree::kExitOk : aetree::kExitUsage;
  }

  const CLI::App* chosen = app.get_subcommands().front();
  std::map<std::string, std::string> flags;
  auto collect = [&](const std::vector<std::unique_ptr<Bound>>& bound) {
    for (const auto& b : bound)
      if (b->option->count() > 0) flags[b->key] = b->boolean ? (b->on ? "true" : "false") : b->text;
  };
  collect(global);
  collect(local[chosen->get_name()]);
  if (config_opt->count() > 0) flags["config"] = config_path;
  return aetree::run_cli_command(chosen->get_name(), flags);
}
