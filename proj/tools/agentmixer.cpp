#include <CLI11.hpp>
#include <iostream>

#include "agentmixer/runner.hpp"

int main(int argc, char** argv) {
  using namespace agentmixer;
  CLI::App app{"Cooperative multi-agent policy training with a state-conditioned policy modifier"};
  app.set_version_flag("--version", kLibraryVersion);
  app.require_subcommand(1);

  std::string config, checkpoint, suite;
  std::uint64_t seed = 0, steps = 0;
  std::string output;
  int episodes = 100;

  CLI::App* train = app.add_subcommand("train", "Train every seed listed in a config");
  train->add_option("config", config, "INI config file")->required();
  auto* seed_opt = train->add_option("--seed", seed, "Train only this seed");
  auto* steps_opt = train->add_option("--steps", steps, "Override run.total_env_steps");
  auto* out_opt = train->add_option("--output", output, "Output root (beats AGENTMIXER_OUT)");

  CLI::App* eval = app.add_subcommand("eval", "Decentralised deterministic evaluation of a checkpoint");
  eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--config", config, "Config the checkpoint was trained with")->required();
  eval->add_option("--episodes", episodes, "Number of episodes");

  CLI::App* analyze = app.add_subcommand("analyze", "Equilibrium gaps of a matrix-game checkpoint");
  analyze->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  analyze->add_option("--config", config, "Config the checkpoint was trained with")->required();

  CLI::App* verify = app.add_subcommand("verify", "Run a numerical self-check suite");
  verify->add_option("suite", suite, "distillation, gumbel or gradients")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (train->parsed()) {
    TrainOptions options;
    if (*seed_opt) options.seed = seed;
    if (*steps_opt) options.steps = steps;
    if (*out_opt) options.output_root = output;
    return cmd_train(config, options, std::cout, std::cerr);
  }
  if (eval->parsed()) return cmd_eval(checkpoint, config, episodes, std::cout, std::cerr);
  if (analyze->parsed()) return cmd_analyze(checkpoint, config, std::cout, std::cerr);
  return cmd_verify(suite, std::cout, std::cerr);
}
