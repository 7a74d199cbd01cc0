// qrefine: question refinement pipeline driver.
//   qrefine [--config PATH] [--seed N] [--force] <synth|pretrain|train-reward|train-rl|generate|eval> ...
// Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime failure.

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "qrefine/pipeline.hpp"

namespace pl = qrefine::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"Question refinement with reinforced sequence generation"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override run.seed");
  app.add_flag("--force", force, "Overwrite existing corpus files");
  app.add_option("--set", overrides, "Override a setting, e.g. --set rl.episodes=10");

  auto* synth = app.add_subcommand("synth", "Generate the synthetic triple corpus (80/10/10 split)");
  auto* pretrain = app.add_subcommand("pretrain", "Masked-LM plus supervised Seq2Seq pretraining");
  auto* reward = app.add_subcommand("train-reward", "Train and freeze the QA reward model");
  auto* rl = app.add_subcommand("train-rl", "Fine-tune the pretrained policy with REINFORCE or PPO");
  std::string algo_name = "ppo";
  rl->add_option("--algo", algo_name, "reinforce or ppo")->check(CLI::IsMember({"reinforce", "ppo"}));
  auto* gen = app.add_subcommand("generate", "Refine one question with a trained policy");
  std::string question, checkpoint;
  gen->add_option("question", question, "Ill-formed question text")->required();
  gen->add_option("--checkpoint", checkpoint, "Policy checkpoint (default: newest in the workdir)");
  auto* ev = app.add_subcommand("eval", "Test-split metrics for ill-formed, Seq2Seq and refined systems");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  std::cout << std::unitbuf;  // stage progress shows up promptly when redirected
  qrefine::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = qrefine::load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw qrefine::ConfigError("--set expects key=value, got '" + kv + "'");
      qrefine::apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*synth) {
      pl::synth(cfg, force, std::cout);
    } else if (*pretrain) {
      pl::pretrain_policy(cfg, std::cout);
    } else if (*reward) {
      pl::train_reward(cfg, std::cout);
    } else if (*rl) {
      const auto res = pl::train_rl(cfg, qrefine::parse_algo(algo_name), std::cout);
      if (res.reward_checksum_before != res.reward_checksum_after) {
        std::cerr << "error: reward model parameters changed during RL\n";
        return 1;
      }
    } else if (*gen) {
      const pl::Paths paths(cfg);
      const auto ckpt = checkpoint.empty() ? pl::default_policy(paths) : std::filesystem::path(checkpoint);
      std::cout << pl::generate(cfg, ckpt, question) << '\n';
    } else if (*ev) {
      pl::evaluate(cfg, std::cout);
    }
  } catch (const qrefine::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
