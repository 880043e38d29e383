#include <iostream>

#include "CLI11.hpp"

#include "calign/harness.hpp"

int main(int argc, char** argv) {
  using namespace calign::harness;
  CLI::App app{"calign: circuit attribution and cross-model alignment experiments"};
  app.require_subcommand(1);

  std::string config;
  CliOptions opts;
  std::uint64_t seed = 0;
  std::string out;
  for (const std::string& name : command_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "experiment config or a run manifest.json")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_flag("--oracle", opts.oracle, "also emit exact patching scores");
    sub->add_option("--out", out, "override output_dir");
    sub->add_flag("--train", opts.train_models, "train toy models missing from the weight cache");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfig;
  }
  const CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed")) opts.seed = seed;
  if (chosen->count("--out")) opts.out = out;
  return run_cli(chosen->get_name(), config, opts);
}
