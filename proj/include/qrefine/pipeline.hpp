#pragma once

#include <boost/crc.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "qrefine/config.hpp"
#include "qrefine/corpus/synth.hpp"
#include "qrefine/eval/report.hpp"
#include "qrefine/nn/checkpoint.hpp"
#include "qrefine/rl.hpp"

namespace qrefine::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

/// A required input (corpus split or checkpoint) is absent.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Paths {
  fs::path root;

  explicit Paths(const RunConfig& c) : root(c.workdir) {}

  fs::path split(const std::string& name) const { return root / "corpus" / (name + ".jsonl"); }
  fs::path pretrain_ckpt() const { return root / "models" / "pretrain.ckpt"; }
  fs::path reward_ckpt() const { return root / "models" / "reward.ckpt"; }
  fs::path rl_ckpt(Algo a) const { return root / "models" / (std::string("rl_") + to_string(a) + ".ckpt"); }
  fs::path report(const std::string& name) const { return root / "reports" / (name + ".csv"); }
  fs::path manifest() const { return root / "manifest.json"; }
};

/// CRC-64/XZ of a byte string, as 16 hex digits.
inline std::string hash_bytes(std::string_view bytes) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ull, ~0ull, ~0ull, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << crc.checksum();
  return os.str();
}

inline std::string hash_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifact("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return hash_bytes(ss.str());
}

inline std::string config_hash(const RunConfig& c) { return hash_bytes(canonical_config(c)); }

inline std::string corpus_hash(const Paths& paths) {
  std::string all;
  for (const char* s : {"train", "dev", "test"}) all += hash_file(paths.split(s));
  return hash_bytes(all);
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Records one stage in manifest.json. Timestamps live only here so that the
/// artifacts themselves stay byte-reproducible.
inline void record_stage(const Paths& paths, const RunConfig& c, const std::string& stage, json entry) {
  json m = json::object();
  if (fs::exists(paths.manifest())) {
    std::ifstream in(paths.manifest());
    m = json::parse(in, nullptr, false);
    if (m.is_discarded() || !m.is_object()) m = json::object();
  }
  entry["config_hash"] = config_hash(c);
  entry["seed"] = c.seed;
  entry["finished"] = utc_now();
  m["stages"][stage] = std::move(entry);
  std::ofstream out(paths.manifest(), std::ios::trunc);
  out << m.dump(2) << '\n';
}

inline json read_manifest(const Paths& paths) {
  std::ifstream in(paths.manifest());
  if (!in) throw MissingArtifact("missing manifest " + paths.manifest().string());
  return json::parse(in);
}

inline std::vector<Triple> load_split(const Paths& paths, const std::string& name) {
  const auto p = paths.split(name);
  if (!fs::exists(p)) throw MissingArtifact("missing corpus split " + p.string() + " (run synth first)");
  return load_jsonl(p.string());
}

inline void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifact("missing " + what + " checkpoint " + p.string());
}

// ---------------------------------------------------------------------------
// Checkpoint metadata: vocabularies plus lineage, serialized as JSON.

inline json vocab_meta(const Vocabulary& v, const CharVocabulary& cv) {
  json chars = json::array();
  for (unsigned char c : cv.chars()) chars.push_back(static_cast<int>(c));
  return {{"words", v.retained()}, {"min_count", v.min_count()}, {"chars", chars}};
}

inline std::pair<Vocabulary, CharVocabulary> vocab_from_meta(const json& m) {
  std::string chars;
  for (int c : m.at("chars")) chars += static_cast<char>(c);
  return {Vocabulary::from_words(m.at("words").get<std::vector<std::string>>(), m.at("min_count").get<std::size_t>()),
          CharVocabulary::from_chars(chars)};
}

struct LoadedPolicy {
  Policy policy;
  json meta;
};

inline LoadedPolicy load_policy(const RunConfig& c, const fs::path& path) {
  const auto ck = nn::read_checkpoint(path.string());
  json meta = json::parse(ck.meta);
  if (meta.value("kind", "") != "policy") throw nn::CheckpointError(path.string() + ": not a policy checkpoint");
  auto [v, cv] = vocab_from_meta(meta.at("vocab"));
  Rng rng(0);
  Policy p(c.policy, std::move(v), cv, rng);
  nn::restore(ck, p.parameters());
  ParameterList ctx;
  p.emb.collect_ctx(ctx);
  nn::set_frozen(ctx, true);
  return {std::move(p), std::move(meta)};
}

struct LoadedReward {
  RewardModel model;
  json meta;
};

inline LoadedReward load_reward(const RunConfig& c, const fs::path& path) {
  const auto ck = nn::read_checkpoint(path.string());
  json meta = json::parse(ck.meta);
  if (meta.value("kind", "") != "reward") throw nn::CheckpointError(path.string() + ": not a reward checkpoint");
  Rng rng(0);
  RewardModel m(c.reward_model, meta.at("vocab").at("words").size() + kNumReserved, rng);
  nn::restore(ck, m.parameters());
  nn::set_frozen(m.parameters(), true);
  return {std::move(m), std::move(meta)};
}

inline void open_report(std::ofstream& os, const fs::path& p) {
  fs::create_directories(p.parent_path());
  os.open(p, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Stage salts keep every command's random stream independent of the others.
enum : std::uint64_t { kSaltPretrain = 2, kSaltReward = 3, kSaltRl = 4 };

// ---------------------------------------------------------------------------
// Stages

/// Writes train/dev/test JSONL (80/10/10 in generation order).
inline void synth(const RunConfig& c, bool force, std::ostream& log) {
  const Paths paths(c);
  for (const char* s : {"train", "dev", "test"})
    if (fs::exists(paths.split(s)) && !force)
      throw std::runtime_error(paths.split(s).string() + " already exists (pass --force to overwrite)");
  auto triples = synth_corpus(default_grammar(), c.corpus.size, c.seed, c.corpus.corruption);
  const std::size_t n = triples.size(), n_train = n * 8 / 10, n_dev = n / 10;
  const auto at = [&](std::size_t i) { return triples.begin() + static_cast<std::ptrdiff_t>(i); };
  fs::create_directories(paths.split("train").parent_path());
  save_jsonl({at(0), at(n_train)}, paths.split("train").string());
  save_jsonl({at(n_train), at(n_train + n_dev)}, paths.split("dev").string());
  save_jsonl({at(n_train + n_dev), triples.end()}, paths.split("test").string());
  log << "synth: " << n_train << " train / " << n_dev << " dev / " << n - n_train - n_dev << " test triples\n";
  json outputs;
  for (const char* s : {"train", "dev", "test"}) outputs[std::string("corpus/") + s + ".jsonl"] = hash_file(paths.split(s));
  record_stage(paths, c, "synth", {{"corpus_hash", corpus_hash(paths)}, {"outputs", outputs}});
}

inline void encode_all(const Vocabulary& v, std::vector<Triple>& ts) {
  for (auto& t : ts) v.encode(t);
}

/// Masked-LM training of the contextual encoder, then supervised Seq2Seq
/// training with best-dev selection.
inline void pretrain_policy(const RunConfig& c, std::ostream& log) {
  const Paths paths(c);
  auto train = load_split(paths, "train");
  auto dev = load_split(paths, "dev");
  auto [v, cv] = build_vocab(train, c.corpus.min_count);
  encode_all(v, train);
  encode_all(v, dev);
  Rng rng = Rng(c.seed).fork(kSaltPretrain);
  Policy p(c.policy, v, cv, rng);

  std::ofstream mlm_csv;
  open_report(mlm_csv, paths.report("mlm"));
  mlm_csv << "epoch,loss\n";
  if (c.policy.embed.use_ctx) {
    std::vector<std::vector<TokenId>> sents;
    for (const auto& t : train) sents.push_back(t.well.without_eos().ids());
    const auto curve = train_mlm(p.emb.ctx, sents, c.mlm, rng);
    for (std::size_t e = 0; e < curve.size(); ++e) mlm_csv << e + 1 << ',' << fmt(curve[e]) << '\n';
    log << "mlm: loss " << fmt(curve.empty() ? 0.0 : curve.front()) << " -> " << fmt(curve.empty() ? 0.0 : curve.back())
        << '\n';
  }
  ParameterList ctx;
  p.emb.collect_ctx(ctx);
  nn::set_frozen(ctx, true);

  std::ofstream csv;
  open_report(csv, paths.report("pretrain"));
  csv << "epoch,train_loss,dev_loss,dev_bleu1\n";
  pretrain(p, train, dev, c.pretrain, rng, [&](const PretrainEpoch& e) {
    const double b1 = eval::bleu1_of(p, dev);
    csv << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.dev_loss) << ',' << fmt(b1) << '\n';
    log << "pretrain epoch " << e.epoch << ": train " << fmt(e.train_loss) << " dev " << fmt(e.dev_loss) << " bleu1 "
        << fmt(b1) << '\n';
  });
  csv.close();
  mlm_csv.close();
  const double best_b1 = eval::bleu1_of(p, dev);
  log << "pretrain: best-dev checkpoint bleu1 " << fmt(best_b1) << '\n';

  const std::string chash = corpus_hash(paths);
  json meta = {{"kind", "policy"}, {"stage", "pretrain"}, {"vocab", vocab_meta(v, cv)},
               {"config_hash", config_hash(c)}, {"corpus_hash", chash}};
  fs::create_directories(paths.pretrain_ckpt().parent_path());
  nn::write_checkpoint(paths.pretrain_ckpt().string(), nn::snapshot(p.parameters(), meta.dump()));
  record_stage(paths, c, "pretrain",
               {{"parents", {{"corpus", chash}}},
                {"dev_bleu1", best_b1},
                {"outputs", {{"models/pretrain.ckpt", hash_file(paths.pretrain_ckpt())},
                             {"reports/pretrain.csv", hash_file(paths.report("pretrain"))}}}});
}

/// Trains and freezes the QA reward model; returns held-out ranking accuracy.
inline double train_reward(const RunConfig& c, std::ostream& log) {
  const Paths paths(c);
  auto train = load_split(paths, "train");
  auto dev = load_split(paths, "dev");
  auto [v, cv] = build_vocab(train, c.corpus.min_count);
  encode_all(v, train);
  encode_all(v, dev);
  Rng rng = Rng(c.seed).fork(kSaltReward);
  RewardModel m(c.reward_model, v.size(), rng);
  const auto curve = train_reward_model(m, train, rng);
  std::ofstream csv;
  open_report(csv, paths.report("reward"));
  csv << "epoch,hinge_loss\n";
  for (std::size_t e = 0; e < curve.size(); ++e) csv << e + 1 << ',' << fmt(curve[e]) << '\n';
  csv.close();
  const double acc = ranking_accuracy(m, dev);
  log << "reward: final hinge " << fmt(curve.back()) << ", dev ranking accuracy " << fmt(acc) << '\n';

  const std::string chash = corpus_hash(paths);
  json meta = {{"kind", "reward"}, {"vocab", vocab_meta(v, cv)}, {"config_hash", config_hash(c)},
               {"corpus_hash", chash}, {"dev_accuracy", acc}};
  fs::create_directories(paths.reward_ckpt().parent_path());
  nn::write_checkpoint(paths.reward_ckpt().string(), nn::snapshot(m.parameters(), meta.dump()));
  record_stage(paths, c, "reward",
               {{"parents", {{"corpus", chash}}},
                {"dev_accuracy", acc},
                {"parameter_checksum", std::to_string(nn::checksum(m.parameters()))},
                {"outputs", {{"models/reward.ckpt", hash_file(paths.reward_ckpt())}}}});
  return acc;
}

struct RlResult {
  std::vector<EpisodeMetrics> curve;
  std::uint64_t reward_checksum_before = 0;
  std::uint64_t reward_checksum_after = 0;
};

/// Fine-tunes the pretrained policy with the selected algorithm against the
/// frozen reward stack; writes the refined checkpoint and the learning curve.
inline RlResult train_rl(const RunConfig& c, Algo algo, std::ostream& log) {
  const Paths paths(c);
  require(paths.pretrain_ckpt(), "pretrain");
  require(paths.reward_ckpt(), "reward");
  auto train = load_split(paths, "train");
  auto dev = load_split(paths, "dev");
  auto [p, pmeta] = load_policy(c, paths.pretrain_ckpt());
  auto [rm, rmeta] = load_reward(c, paths.reward_ckpt());
  if (pmeta.at("vocab").at("words") != rmeta.at("vocab").at("words"))
    throw std::runtime_error("pretrain and reward checkpoints were built with different vocabularies");
  encode_all(p.vocab, train);
  encode_all(p.vocab, dev);
  if (dev.size() > c.rl_dev_eval) dev.resize(c.rl_dev_eval);

  RlResult res;
  RewardStack stack(p, rm, c.reward);
  res.reward_checksum_before = nn::checksum(stack.model().parameters());
  Rng rng = Rng(c.seed).fork(kSaltRl + static_cast<std::uint64_t>(algo));
  std::ofstream csv;
  open_report(csv, paths.report(std::string("rl_") + to_string(algo)));
  write_metrics_header(csv);
  auto on_episode = [&](const EpisodeMetrics& m) {
    write_metrics_row(csv, m);
    log << to_string(algo) << " episode " << m.episode << ": reward " << fmt(m.mean_reward) << " bleu1 "
        << fmt(m.bleu1_dev) << " entropy " << fmt(m.entropy) << '\n';
  };
  if (algo == Algo::Reinforce) {
    res.curve = train_reinforce(p, stack, train, dev, c.rl, rng, on_episode);
  } else {
    ValueHead value(c.policy.dec_hidden, rng);
    res.curve = train_ppo(p, value, stack, train, dev, c.rl, rng, on_episode);
  }
  csv.close();
  res.reward_checksum_after = nn::checksum(stack.model().parameters());

  const std::string pre_hash = hash_file(paths.pretrain_ckpt()), rm_hash = hash_file(paths.reward_ckpt());
  json meta = {{"kind", "policy"},
               {"stage", std::string("rl_") + to_string(algo)},
               {"vocab", pmeta.at("vocab")},
               {"config_hash", config_hash(c)},
               {"corpus_hash", pmeta.at("corpus_hash")},
               {"parents", {{"pretrain", pre_hash}, {"reward", rm_hash}}}};
  nn::write_checkpoint(paths.rl_ckpt(algo).string(), nn::snapshot(p.parameters(), meta.dump()));
  const std::string report = std::string("reports/rl_") + to_string(algo) + ".csv";
  record_stage(paths, c, std::string("rl_") + to_string(algo),
               {{"parents", {{"pretrain", pre_hash}, {"reward", rm_hash}}},
                {"reward_checksum_before", std::to_string(res.reward_checksum_before)},
                {"reward_checksum_after", std::to_string(res.reward_checksum_after)},
                {"outputs", {{"models/" + paths.rl_ckpt(algo).filename().string(), hash_file(paths.rl_ckpt(algo))},
                             {report, hash_file(paths.root / report)}}}});
  return res;
}

/// Latest available policy: PPO, then REINFORCE, then the pretrained one.
inline fs::path default_policy(const Paths& paths) {
  for (Algo a : {Algo::Ppo, Algo::Reinforce})
    if (fs::exists(paths.rl_ckpt(a))) return paths.rl_ckpt(a);
  require(paths.pretrain_ckpt(), "pretrain");
  return paths.pretrain_ckpt();
}

inline std::string generate(const RunConfig& c, const fs::path& ckpt, const std::string& question) {
  auto [p, meta] = load_policy(c, ckpt);
  TokenSeq x = p.vocab.encoded(tokenize(question));
  if (x.empty()) throw std::invalid_argument("generate: empty question");
  return p.to_tokens(p.greedy_decode(x)).without_eos().text();
}

/// Test-split generation metrics and Hits@K for the ill-formed input, the
/// pretrained Seq2Seq and each refined policy present.
inline std::vector<eval::MetricsReport> evaluate(const RunConfig& c, std::ostream& log) {
  const Paths paths(c);
  require(paths.pretrain_ckpt(), "pretrain");
  auto test = load_split(paths, "test");
  const auto pool = eval::AnswerPool::build(test);
  std::vector<eval::MetricsReport> rows{eval::evaluate_ill_formed(test, &pool)};
  auto run = [&](const std::string& name, const fs::path& ckpt) {
    auto [p, meta] = load_policy(c, ckpt);
    auto enc = test;
    encode_all(p.vocab, enc);
    rows.push_back(eval::evaluate_generation(name, p, enc, &pool));
  };
  run("seq2seq", paths.pretrain_ckpt());
  for (Algo a : {Algo::Reinforce, Algo::Ppo})
    if (fs::exists(paths.rl_ckpt(a))) run(std::string("qrefine_") + to_string(a), paths.rl_ckpt(a));
  std::ofstream csv;
  open_report(csv, paths.report("eval"));
  eval::write_csv(csv, rows);
  csv.close();
  eval::print_table(log, rows);
  record_stage(paths, c, "eval", {{"outputs", {{"reports/eval.csv", hash_file(paths.report("eval"))}}}});
  return rows;
}

}  // namespace qrefine::pipeline
