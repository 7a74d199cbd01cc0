#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "qrefine/corpus/corruption.hpp"
#include "qrefine/embedding.hpp"
#include "qrefine/reward.hpp"
#include "qrefine/rl.hpp"
#include "qrefine/seq2seq.hpp"

namespace qrefine {

/// Raised for bad configuration values or unknown keys (CLI exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CorpusConfig {
  long size = 2000;
  std::size_t min_count = 1;
  CorruptionSpec corruption{};
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string workdir = "run";

  CorpusConfig corpus{};
  PolicyConfig policy{};
  MlmConfig mlm{};
  PretrainConfig pretrain{};
  RewardModelConfig reward_model{};
  RewardConfig reward{};
  RlConfig rl{};
  /// Dev questions greedily decoded after each RL episode.
  std::size_t rl_dev_eval = 100;

  void validate() const;
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError("config: " + key + ": cannot parse '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("config: " + key + ": expected a boolean, got '" + s + "'");
}

inline std::string show(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Binding {
  std::function<void(const std::string&, const std::string&)> set;
  std::function<std::string()> get;
};

template <typename T>
Binding bind(T& field) {
  Binding b;
  if constexpr (std::is_same_v<T, bool>) {
    b.set = [&field](const std::string& k, const std::string& s) { field = parse_bool(k, s); };
    b.get = [&field] { return std::string(field ? "true" : "false"); };
  } else if constexpr (std::is_same_v<T, std::string>) {
    b.set = [&field](const std::string&, const std::string& s) { field = s; };
    b.get = [&field] { return field; };
  } else if constexpr (std::is_floating_point_v<T>) {
    b.set = [&field](const std::string& k, const std::string& s) { field = parse_number<T>(k, s); };
    b.get = [&field] { return show(field); };
  } else {
    b.set = [&field](const std::string& k, const std::string& s) {
      if constexpr (std::is_unsigned_v<T>)
        if (!s.empty() && s[0] == '-') throw ConfigError("config: " + k + ": must be non-negative");
      field = parse_number<T>(k, s);
    };
    b.get = [&field] { return std::to_string(field); };
  }
  return b;
}

inline Binding bind_operators(std::set<CorruptionOp>& ops) {
  Binding b;
  b.set = [&ops](const std::string& k, const std::string& s) {
    ops.clear();
    std::stringstream ss(s);
    std::string name;
    while (std::getline(ss, name, ',')) {
      name.erase(0, name.find_first_not_of(' '));
      name.erase(name.find_last_not_of(' ') + 1);
      bool found = false;
      for (auto op : {CorruptionOp::WrongWord, CorruptionOp::WrongOrder, CorruptionOp::NoisyBackground})
        if (name == to_string(op)) {
          ops.insert(op);
          found = true;
        }
      if (!found) throw ConfigError("config: " + k + ": unknown operator '" + name + "'");
    }
  };
  b.get = [&ops] {
    std::string out;
    for (auto op : ops) out += (out.empty() ? "" : ",") + std::string(to_string(op));
    return out;
  };
  return b;
}

/// Every recognized "section.key", in a fixed order.
inline std::vector<std::pair<std::string, Binding>> bindings(RunConfig& c) {
  auto& e = c.policy.embed;
  return {
      {"run.seed", bind(c.seed)},
      {"run.workdir", bind(c.workdir)},
      {"corpus.size", bind(c.corpus.size)},
      {"corpus.min_count", bind(c.corpus.min_count)},
      {"corpus.wrong_word_rate", bind(c.corpus.corruption.wrong_word_rate)},
      {"corpus.fragment_count", bind(c.corpus.corruption.fragment_count)},
      {"corpus.distractor_max_len", bind(c.corpus.corruption.distractor_max_len)},
      {"corpus.op_probability", bind(c.corpus.corruption.op_probability)},
      {"corpus.operators", bind_operators(c.corpus.corruption.operators)},
      {"embedding.word_dim", bind(e.word_dim)},
      {"embedding.char_dim", bind(e.char_dim)},
      {"embedding.char_hidden", bind(e.char_hidden)},
      {"embedding.ctx_dim", bind(e.ctx_dim)},
      {"embedding.ctx_layers", bind(e.ctx_layers)},
      {"embedding.ctx_input_dim", bind(e.ctx_input_dim)},
      {"embedding.use_char", bind(e.use_char)},
      {"embedding.use_ctx", bind(e.use_ctx)},
      {"mlm.mask_prob", bind(c.mlm.mask_prob)},
      {"mlm.epochs", bind(c.mlm.epochs)},
      {"mlm.batch", bind(c.mlm.batch)},
      {"mlm.lr", bind(c.mlm.adam.lr)},
      {"seq2seq.enc_hidden", bind(c.policy.enc_hidden)},
      {"seq2seq.dec_hidden", bind(c.policy.dec_hidden)},
      {"seq2seq.dec_layers", bind(c.policy.dec_layers)},
      {"seq2seq.out_hidden", bind(c.policy.out_hidden)},
      {"seq2seq.max_len", bind(c.policy.max_len)},
      {"seq2seq.src_cap", bind(c.policy.src_cap)},
      {"pretrain.epochs", bind(c.pretrain.epochs)},
      {"pretrain.batch", bind(c.pretrain.batch)},
      {"pretrain.lr", bind(c.pretrain.adam.lr)},
      {"pretrain.clip_norm", bind(c.pretrain.clip_norm)},
      {"reward.word_dim", bind(c.reward_model.word_dim)},
      {"reward.hidden", bind(c.reward_model.hidden)},
      {"reward.margin", bind(c.reward_model.margin)},
      {"reward.epochs", bind(c.reward_model.epochs)},
      {"reward.batch", bind(c.reward_model.batch)},
      {"reward.lr", bind(c.reward_model.adam.lr)},
      {"reward.c1", bind(c.reward.c1)},
      {"reward.gamma", bind(c.reward.gamma)},
      {"reward.use_wording", bind(c.reward.use_wording)},
      {"rl.episodes", bind(c.rl.episodes)},
      {"rl.batch", bind(c.rl.batch)},
      {"rl.lr", bind(c.rl.adam.lr)},
      {"rl.clip_norm", bind(c.rl.clip_norm)},
      {"rl.mixer", bind(c.rl.mixer)},
      {"rl.mixer_initial", bind(c.rl.mixer_cfg.initial)},
      {"rl.mixer_decrement", bind(c.rl.mixer_cfg.decrement)},
      {"rl.mixer_interval", bind(c.rl.mixer_cfg.interval)},
      {"rl.entropy_weight", bind(c.rl.entropy_weight)},
      {"rl.baseline_samples", bind(c.rl.baseline_samples)},
      {"rl.clip_eps", bind(c.rl.clip_eps)},
      {"rl.gae_lambda", bind(c.rl.gae_lambda)},
      {"rl.c2", bind(c.rl.c2)},
      {"rl.inner_epochs", bind(c.rl.inner_epochs)},
      {"rl.ratio_tol", bind(c.rl.ratio_tol)},
      {"rl.max_log_ratio", bind(c.rl.max_log_ratio)},
      {"rl.value_lr", bind(c.rl.value_adam.lr)},
      {"rl.normalize_advantages", bind(c.rl.normalize_advantages)},
      {"rl.dev_eval", bind(c.rl_dev_eval)},
  };
}

}  // namespace detail

inline void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  auto rethrow = [](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  };
  check(!workdir.empty(), "run.workdir must not be empty");
  check(corpus.size >= 10, "corpus.size must be >= 10");
  check(corpus.min_count >= 1, "corpus.min_count must be >= 1");
  rethrow([&] { corpus.corruption.validate(); });
  check(!corpus.corruption.operators.empty(), "corpus.operators must name at least one operator");
  rethrow([&] { policy.validate(); });
  check(mlm.mask_prob >= 0.0 && mlm.mask_prob <= 1.0, "mlm.mask_prob must lie in [0,1]");
  check(mlm.batch >= 1, "mlm.batch must be >= 1");
  check(mlm.adam.lr > 0.0, "mlm.lr must be > 0");
  check(pretrain.epochs >= 1, "pretrain.epochs must be >= 1");
  check(pretrain.batch >= 1, "pretrain.batch must be >= 1");
  check(pretrain.adam.lr > 0.0, "pretrain.lr must be > 0");
  check(pretrain.clip_norm >= 0.0, "pretrain.clip_norm must be >= 0");
  rethrow([&] { reward_model.validate(); });
  check(reward_model.epochs >= 1, "reward.epochs must be >= 1");
  check(reward_model.batch >= 1, "reward.batch must be >= 1");
  check(reward_model.adam.lr > 0.0, "reward.lr must be > 0");
  rethrow([&] { reward.validate(); });
  rethrow([&] { rl.validate(); });
  check(rl.mixer_cfg.interval >= 1, "rl.mixer_interval must be >= 1");
  check(rl.clip_norm >= 0.0, "rl.clip_norm must be >= 0");
}

/// Applies "section.key" = value overrides; unknown keys are rejected.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  for (auto& [name, b] : detail::bindings(c))
    if (name == key) {
      b.set(key, value);
      return;
    }
  throw ConfigError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(origin + ": key '" + section + "' outside a section");
    for (const auto& [key, value] : body) apply_setting(c, section + "." + key, value.data());
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config(in, path);
}

/// Canonical "section.key=value" listing of every setting except the output
/// directory; its hash identifies a run.
inline std::string canonical_config(const RunConfig& c) {
  RunConfig copy = c;
  std::string out;
  for (auto& [name, b] : detail::bindings(copy))
    if (name != "run.workdir") out += name + "=" + b.get() + "\n";
  return out;
}

inline std::string to_ini(const RunConfig& c) {
  RunConfig copy = c;
  std::string out, section;
  for (auto& [name, b] : detail::bindings(copy)) {
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += name.substr(dot + 1) + " = " + b.get() + "\n";
  }
  return out;
}

}  // namespace qrefine
