#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "qrefine/config.hpp"
#include "qrefine/pipeline.hpp"

using namespace qrefine;
namespace fs = std::filesystem;
namespace pl = qrefine::pipeline;

namespace {

const char* kTinyIni = R"(
[run]
seed = 3
[corpus]
size = 100
[embedding]
word_dim = 6
char_dim = 4
char_hidden = 3
ctx_dim = 4
ctx_input_dim = 4
[mlm]
epochs = 1
[seq2seq]
enc_hidden = 5
dec_hidden = 6
out_hidden = 6
max_len = 10
[pretrain]
epochs = 2
[reward]
word_dim = 6
hidden = 5
epochs = 1
[rl]
episodes = 2
batch = 4
baseline_samples = 2
inner_epochs = 2
dev_eval = 5
)";

RunConfig tiny(const fs::path& dir) {
  std::istringstream in(kTinyIni);
  auto c = parse_config(in);
  c.workdir = dir.string();
  return c;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("qrefine_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(RunConfig{}.validate()); }

TEST(Config, ParsesIniAndOverrides) {
  std::istringstream in("[rl]\nepisodes = 7\nmixer = false\n[corpus]\noperators = wrong_order, noisy_background\n");
  auto c = parse_config(in);
  EXPECT_EQ(c.rl.episodes, 7u);
  EXPECT_FALSE(c.rl.mixer);
  EXPECT_EQ(c.corpus.corruption.operators.size(), 2u);
  apply_setting(c, "reward.gamma", "0.5");
  EXPECT_DOUBLE_EQ(c.reward.gamma, 0.5);
}

TEST(Config, RejectsUnknownKeysAndSections) {
  std::istringstream a("[rl]\nepisode = 7\n");
  EXPECT_THROW(parse_config(a), ConfigError);
  std::istringstream b("[nope]\nx = 1\n");
  EXPECT_THROW(parse_config(b), ConfigError);
  RunConfig c;
  EXPECT_THROW(apply_setting(c, "seed", "1"), ConfigError);
}

TEST(Config, RejectsBadValues) {
  const std::vector<std::pair<std::string, std::string>> bad{
      {"run.seed", "-1"},          {"run.seed", "abc"},          {"run.workdir", ""},
      {"corpus.size", "5"},        {"corpus.operators", "shuffle"}, {"corpus.wrong_word_rate", "1.5"},
      {"embedding.word_dim", "0"}, {"embedding.use_char", "maybe"}, {"mlm.mask_prob", "2"},
      {"mlm.lr", "0"},             {"seq2seq.max_len", "0"},     {"seq2seq.dec_hidden", "-3"},
      {"pretrain.epochs", "0"},    {"pretrain.lr", "-0.1"},      {"reward.gamma", "1.01"},
      {"reward.c1", "-1"},         {"reward.margin", "x"},       {"rl.episodes", "0"},
      {"rl.clip_eps", "0"},        {"rl.gae_lambda", "1"},       {"rl.baseline_samples", "0"},
      {"rl.mixer_interval", "0"},  {"rl.value_lr", "0"},         {"rl.c2", "-0.1"},
  };
  for (const auto& [key, value] : bad) {
    RunConfig c;
    EXPECT_THROW(
        {
          apply_setting(c, key, value);
          c.validate();
        },
        ConfigError)
        << key << "=" << value;
  }
}

TEST(Config, IniRoundTrip) {
  auto c = tiny("/tmp/x");
  c.rl.normalize_advantages = false;
  std::istringstream in(to_ini(c));
  const auto back = parse_config(in);
  EXPECT_EQ(canonical_config(back), canonical_config(c));
  EXPECT_EQ(back.workdir, c.workdir);
}

TEST(Config, HashIgnoresWorkdirOnly) {
  auto a = tiny("/tmp/a"), b = tiny("/tmp/b");
  EXPECT_EQ(pl::config_hash(a), pl::config_hash(b));
  b.seed = 4;
  EXPECT_NE(pl::config_hash(a), pl::config_hash(b));
}

TEST(Hash, Crc64Check) {
  // Standard CRC-64/XZ check value.
  EXPECT_EQ(pl::hash_bytes("123456789"), "995dc9bbdf1939fa");
}

TEST(Synth, SplitsAndRefusesOverwrite) {
  const auto dir = fresh_dir("synth");
  auto c = tiny(dir);
  std::ostringstream log;
  pl::synth(c, false, log);
  const pl::Paths paths(c);
  EXPECT_EQ(lines(paths.split("train")), 80u);
  EXPECT_EQ(lines(paths.split("dev")), 10u);
  EXPECT_EQ(lines(paths.split("test")), 10u);
  std::set<std::string> ids;
  for (const char* s : {"train", "dev", "test"})
    for (const auto& t : pl::load_split(paths, s)) EXPECT_TRUE(ids.insert(t.id).second);
  const auto before = slurp(paths.split("train"));
  EXPECT_THROW(pl::synth(c, false, log), std::runtime_error);
  pl::synth(c, true, log);
  EXPECT_EQ(slurp(paths.split("train")), before);
  const auto manifest = pl::read_manifest(paths);
  EXPECT_EQ(manifest["stages"]["synth"]["config_hash"], pl::config_hash(c));
  fs::remove_all(dir);
}

TEST(Pipeline, MissingArtifactsAreNamed) {
  const auto dir = fresh_dir("missing");
  auto c = tiny(dir);
  std::ostringstream log;
  try {
    pl::pretrain_policy(c, log);
    FAIL() << "expected MissingArtifact";
  } catch (const pl::MissingArtifact& e) {
    EXPECT_NE(std::string(e.what()).find("train.jsonl"), std::string::npos);
  }
  pl::synth(c, false, log);
  try {
    pl::train_rl(c, Algo::Ppo, log);
    FAIL() << "expected MissingArtifact";
  } catch (const pl::MissingArtifact& e) {
    EXPECT_NE(std::string(e.what()).find("pretrain"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Pipeline, EndToEndAndReproducible) {
  auto run = [](const fs::path& dir) {
    auto c = tiny(dir);
    std::ostringstream log;
    pl::synth(c, false, log);
    pl::pretrain_policy(c, log);
    const double acc = pl::train_reward(c, log);
    EXPECT_GE(acc, 0.0);
    for (Algo a : {Algo::Reinforce, Algo::Ppo}) {
      auto res = pl::train_rl(c, a, log);
      EXPECT_EQ(res.curve.size(), 2u);
      EXPECT_EQ(res.reward_checksum_before, res.reward_checksum_after);
    }
    const auto rows = pl::evaluate(c, log);
    EXPECT_EQ(rows.size(), 4u);
    const pl::Paths paths(c);
    EXPECT_EQ(lines(paths.report("rl_ppo")), 3u);
    EXPECT_FALSE(pl::generate(c, pl::default_policy(paths), "why sky blue").empty());
    EXPECT_EQ(pl::default_policy(paths), paths.rl_ckpt(Algo::Ppo));
    std::vector<std::string> hashes;
    for (const auto& p : {paths.split("train"), paths.pretrain_ckpt(), paths.reward_ckpt(), paths.rl_ckpt(Algo::Reinforce),
                          paths.rl_ckpt(Algo::Ppo), paths.report("pretrain"), paths.report("rl_ppo"), paths.report("eval")})
      hashes.push_back(pl::hash_file(p));
    return hashes;
  };
  const auto a = fresh_dir("e2e_a"), b = fresh_dir("e2e_b");
  const auto ha = run(a), hb = run(b);
  EXPECT_EQ(ha, hb);
  fs::remove_all(a);
  fs::remove_all(b);
}

#ifdef QREFINE_CLI
namespace {
int cli(const std::string& args) {
  const std::string cmd = std::string(QREFINE_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
}  // namespace

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  fs::create_directories(dir);
  const auto ini = dir / "tiny.ini";
  std::ofstream(ini) << kTinyIni;
  const std::string base = "--config " + ini.string() + " --set run.workdir=" + (dir / "run").string();
  EXPECT_EQ(cli(""), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_EQ(cli("--config /nonexistent.ini synth"), 2);
  EXPECT_EQ(cli(base + " --set rl.nope=1 synth"), 2);
  EXPECT_EQ(cli(base + " --set rl.episodes=0 synth"), 2);
  EXPECT_EQ(cli(base + " --set noequals synth"), 2);
  EXPECT_EQ(cli(base + " train-rl --algo a2c"), 2);
  EXPECT_EQ(cli(base + " pretrain"), 1);
  EXPECT_EQ(cli(base + " synth"), 0);
  EXPECT_EQ(cli(base + " synth"), 1);
  EXPECT_EQ(cli(base + " --force synth"), 0);
  EXPECT_EQ(cli(base + " generate \"why sky blue\""), 1);
  EXPECT_EQ(cli("--help"), 0);
  fs::remove_all(dir);
}
#endif
