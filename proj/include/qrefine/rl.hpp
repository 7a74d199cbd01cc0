#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrefine/eval/report.hpp"
#include "qrefine/reward.hpp"

namespace qrefine {

/// V(k_t): linear map from a decoder state to a scalar. Reads detached states, so
/// its regression never moves the policy.
struct ValueHead {
  nn::Linear lin;

  ValueHead() = default;
  ValueHead(std::size_t dim, Rng& rng) : lin("value", dim, 1, rng) {}

  Var operator()(Tape& t, const std::vector<real>& k) { return lin(t, t.input(k)); }
  real value(const std::vector<real>& k) {
    Tape t;
    return (*this)(t, k).scalar();
  }
  void collect(ParameterList& out) { lin.collect(out); }
  ParameterList parameters() {
    ParameterList p;
    collect(p);
    return p;
  }
};

/// Sum over steps of the Shannon entropy -sum_v p log p of each step distribution.
inline real entropy_term(const std::vector<std::vector<real>>& dists) {
  real h = 0.0;
  for (const auto& d : dists)
    for (real p : d)
      if (p > 0.0) h -= p * std::log(p);
  return h;
}

/// Advantages A_t = sum_j (gamma lambda)^j delta_{t+j}, delta_t = r_t + gamma V_{t+1} - V_t.
/// `values` carries one extra terminal entry (0 after EOS).
inline std::vector<real> gae_advantages(const std::vector<real>& rewards, const std::vector<real>& values, real gamma,
                                        real lambda) {
  if (values.size() != rewards.size() + 1)
    throw std::invalid_argument("gae_advantages: expected " + std::to_string(rewards.size() + 1) + " values, got " +
                                std::to_string(values.size()));
  std::vector<real> adv(rewards.size());
  real acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    const real delta = rewards[t] + gamma * values[t + 1] - values[t];
    acc = delta + gamma * lambda * acc;
    adv[t] = acc;
  }
  return adv;
}

/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A).
inline real ppo_clip_objective(real ratio, real advantage, real eps) {
  if (!(ratio > 0.0)) throw std::invalid_argument("ppo_clip_objective: ratio must be positive");
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage);
}

/// Loss whose gradient is minus the REINFORCE estimate over one trajectory:
///   -sum_i log pi(a_i) (R_i - B) - entropy_weight * sum_i H(pi_i)
inline Var reinforce_objective(Tape& t, std::span<const Var> dists, std::span<const TokenId> actions,
                               std::span<const real> returns, real baseline, real entropy_weight) {
  std::vector<Var> terms;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const real adv = returns[i] - baseline;
    if (adv != 0.0) terms.push_back(t.scale(t.log(t.pick(dists[i], actions[i])), -adv));
    if (entropy_weight != 0.0) terms.push_back(t.scale(t.entropy(dists[i]), -entropy_weight));
  }
  return t.add_all(terms);
}

/// Negated clipped surrogate plus entropy bonus over one trajectory:
///   -sum_i min(beta_i A_i, clip(beta_i) A_i) - c2 * sum_i H(pi_i)
inline Var ppo_objective(Tape& t, std::span<const Var> dists, std::span<const TokenId> actions,
                         std::span<const real> logp_old, std::span<const real> advantages, real clip_eps, real c2) {
  std::vector<Var> terms;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    terms.push_back(t.neg(t.ppo_clip(t.log(t.pick(dists[i], actions[i])), logp_old[i], advantages[i], clip_eps)));
    if (c2 != 0.0) terms.push_back(t.scale(t.entropy(dists[i]), -c2));
  }
  return t.add_all(terms);
}

enum class Algo { Reinforce, Ppo };

inline Algo parse_algo(const std::string& s) {
  if (s == "reinforce") return Algo::Reinforce;
  if (s == "ppo") return Algo::Ppo;
  throw std::invalid_argument("unknown algorithm '" + s + "' (expected reinforce or ppo)");
}
inline const char* to_string(Algo a) { return a == Algo::Reinforce ? "reinforce" : "ppo"; }

struct RlConfig {
  std::size_t episodes = 100;
  std::size_t batch = 64;
  nn::AdamConfig adam{1e-4};
  real clip_norm = 5.0;
  /// Teacher-forced prefix schedule; applies to both loops when enabled. Its epoch
  /// counter is the number of completed passes over the training set.
  bool mixer = true;
  MixerConfig mixer_cfg{};
  // REINFORCE
  real entropy_weight = 0.0;
  std::size_t baseline_samples = 4;
  // PPO
  real clip_eps = 0.2;
  real gae_lambda = 0.95;
  real c2 = 0.1;
  std::size_t inner_epochs = 4;
  real ratio_tol = 1e-3;
  real max_log_ratio = 20.0;
  /// Standardize GAE advantages over each sampled batch.
  bool normalize_advantages = true;
  nn::AdamConfig value_adam{1e-3};

  void validate() const {
    if (episodes == 0) throw std::invalid_argument("rl: episodes must be >= 1");
    if (batch == 0) throw std::invalid_argument("rl: batch must be >= 1");
    if (baseline_samples == 0) throw std::invalid_argument("rl: baseline_samples must be >= 1");
    if (!(entropy_weight >= 0.0)) throw std::invalid_argument("rl: entropy_weight must be >= 0");
    if (!(clip_eps > 0.0)) throw std::invalid_argument("rl: clip_eps must be > 0");
    if (!(gae_lambda >= 0.0 && gae_lambda < 1.0)) throw std::invalid_argument("rl: gae_lambda must lie in [0,1)");
    if (!(c2 >= 0.0)) throw std::invalid_argument("rl: c2 must be >= 0");
    if (inner_epochs == 0) throw std::invalid_argument("rl: inner_epochs must be >= 1");
    if (!(adam.lr > 0.0) || !(value_adam.lr > 0.0)) throw std::invalid_argument("rl: learning rates must be > 0");
  }
};

struct EpisodeMetrics {
  std::size_t episode = 0;
  real mean_reward = 0;  // mean total reward of greedy outputs on the dev slice
  real mean_return = 0;  // mean R(y_1) of the sampled batch
  real bleu1_dev = 0;
  real policy_loss = 0;
  real value_loss = 0;
  real entropy = 0;  // mean per-step entropy of the sampled batch
  std::size_t skipped_steps = 0;
};

inline void write_metrics_header(std::ostream& os) {
  os << "episode,mean_reward,mean_return,bleu1_dev,policy_loss,value_loss,entropy\n";
}
inline void write_metrics_row(std::ostream& os, const EpisodeMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", m.episode, m.mean_reward, m.mean_return,
                m.bleu1_dev, m.policy_loss, m.value_loss, m.entropy);
  os << buf;
}

/// Mean R(y_1) over n trajectories sampled from the current policy.
inline real estimate_baseline(Policy& p, RewardStack& stack, const Triple& tr, std::size_t n, Rng& rng,
                              const std::vector<TokenId>& forced = {}) {
  if (n == 0) throw std::invalid_argument("estimate_baseline: n_samples must be >= 1");
  real s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Trajectory traj = p.sample_decode(tr.ill, rng, 0, forced);
    stack.score(traj, tr.ill, tr.answer, forced);
    s += traj.returns.empty() ? 0.0 : traj.returns.front();
  }
  return s / static_cast<real>(n);
}

namespace detail {

inline std::vector<TokenId> gold_with_eos(const Triple& tr) {
  auto g = tr.well.without_eos().ids();
  g.push_back(kEos);
  return g;
}

inline std::vector<TokenId> mixer_prefix(const Triple& tr, std::size_t len) {
  auto g = gold_with_eos(tr);
  if (g.size() > len) g.resize(len);
  return g;
}

/// Teacher-forces prefix ++ actions; returns per-step distributions and adds the
/// prefix cross-entropy terms to `terms`.
inline std::vector<Var> replay(Tape& t, Policy& p, const Triple& tr, const std::vector<TokenId>& prefix,
                               const std::vector<TokenId>& actions, std::vector<Var>& terms) {
  std::vector<TokenId> inputs(prefix);
  inputs.insert(inputs.end(), actions.begin(), actions.end());
  auto enc = p.encode(t, tr.ill);
  auto outs = p.teacher_force(t, enc, inputs, inputs.size());
  std::vector<Var> dists;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i < prefix.size())
      terms.push_back(t.cross_entropy(outs[i].dist, prefix[i]));
    else
      dists.push_back(outs[i].dist);
  }
  return dists;
}

inline void dev_metrics(Policy& p, RewardStack& stack, const std::vector<Triple>& dev, EpisodeMetrics& m) {
  if (dev.empty()) return;
  real reward = 0.0, b1 = 0.0;
  for (const auto& tr : dev) {
    const auto out = p.greedy_decode(tr.ill);
    reward += stack.total(out, tr.ill, tr.answer);
    b1 += eval::bleu(p.to_tokens(out).words(), tr.well.without_eos().words(), 1);
  }
  m.mean_reward = reward / static_cast<real>(dev.size());
  m.bleu1_dev = b1 / static_cast<real>(dev.size());
}

inline std::size_t mixer_prefix_len(const RlConfig& cfg, std::size_t episode, std::size_t train_size) {
  if (!cfg.mixer) return 0;
  return mixer_schedule(episode * cfg.batch / train_size, cfg.mixer_cfg);
}

inline void normalize(std::vector<Trajectory>& trajs) {
  real sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& tr : trajs)
    for (real a : tr.advantages) {
      sum += a;
      sq += a * a;
      ++n;
    }
  if (n < 2) return;
  const real mean = sum / static_cast<real>(n);
  const real sd = std::sqrt(std::max(0.0, sq / static_cast<real>(n) - mean * mean));
  for (auto& tr : trajs)
    for (real& a : tr.advantages) a = (a - mean) / (sd + 1e-8);
}

inline std::vector<const Triple*> draw_batch(const std::vector<Triple>& train, std::size_t n, Rng& rng) {
  std::vector<const Triple*> b;
  b.reserve(n);
  for (std::size_t i = 0; i < n; ++i) b.push_back(&train[rng.below(train.size())]);
  return b;
}

inline void step_entropy(const std::vector<Var>& dists, real& sum) {
  for (Var d : dists) {
    std::vector<std::vector<real>> one{{d.value().begin(), d.value().end()}};
    sum += entropy_term(one);
  }
}

}  // namespace detail

using EpisodeCallback = std::function<void(const EpisodeMetrics&)>;

/// REINFORCE with a sampled baseline: per episode, a uniformly drawn batch is
/// sampled (after the MIXER gold prefix), scored, and one Adam step ascends
///   mean_i [log pi(y_i) (R(y_i) - B(x))] + entropy_weight * H
/// with the prefix cross-entropy added to the same per-token mean.
inline std::vector<EpisodeMetrics> train_reinforce(Policy& p, RewardStack& stack, const std::vector<Triple>& train,
                                                   const std::vector<Triple>& dev, const RlConfig& cfg, Rng& rng,
                                                   const EpisodeCallback& on_episode = {}) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_reinforce: empty training set");
  p.set_embedder_frozen(true);
  ParameterList params;
  p.collect_seq2seq(params);
  std::vector<EpisodeMetrics> log;
  Tape t;
  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    EpisodeMetrics m;
    m.episode = ep + 1;
    const std::size_t plen = detail::mixer_prefix_len(cfg, ep, train.size());
    auto batch = detail::draw_batch(train, cfg.batch, rng);
    nn::zero_grads(params);
    std::size_t steps = 0, rl_steps = 0;
    real loss_sum = 0.0, ent_sum = 0.0, ret_sum = 0.0;
    for (const Triple* tr : batch) {
      const auto prefix = detail::mixer_prefix(*tr, plen);
      Trajectory traj = p.sample_decode(tr->ill, rng, 0, prefix);
      stack.score(traj, tr->ill, tr->answer, prefix);
      const real b = traj.actions.empty() ? 0.0 : estimate_baseline(p, stack, *tr, cfg.baseline_samples, rng, prefix);
      if (!traj.returns.empty()) ret_sum += traj.returns.front();
      t.clear();
      std::vector<Var> terms;
      auto dists = detail::replay(t, p, *tr, prefix, traj.actions, terms);
      terms.push_back(reinforce_objective(t, dists, traj.actions, traj.returns, b, cfg.entropy_weight));
      Var loss = t.add_all(terms);
      loss_sum += loss.scalar();
      detail::step_entropy(dists, ent_sum);
      steps += prefix.size() + traj.size();
      rl_steps += traj.size();
      t.backward(loss);
    }
    if (steps > 0) {
      nn::scale_grads(params, 1.0 / static_cast<real>(steps));
      if (cfg.clip_norm > 0) nn::clip_grad_norm(params, cfg.clip_norm);
      nn::adam_step(params, cfg.adam);
    }
    m.policy_loss = steps ? loss_sum / static_cast<real>(steps) : 0.0;
    m.entropy = rl_steps ? ent_sum / static_cast<real>(rl_steps) : 0.0;
    m.mean_return = ret_sum / static_cast<real>(batch.size());
    detail::dev_metrics(p, stack, dev, m);
    log.push_back(m);
    if (on_episode) on_episode(m);
  }
  return log;
}

/// Mean |exp(logp - logp_old) - 1| of a batch re-scored under the current policy;
/// 0 right after a snapshot sync.
inline real mean_ratio_deviation(Policy& p, const std::vector<const Triple*>& batch,
                                 const std::vector<Trajectory>& trajs, const std::vector<std::vector<TokenId>>& prefixes) {
  real dev = 0.0;
  std::size_t n = 0;
  Tape t;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    t.clear();
    std::vector<Var> ignore;
    auto dists = detail::replay(t, p, *batch[i], prefixes[i], trajs[i].actions, ignore);
    for (std::size_t s = 0; s < trajs[i].size(); ++s) {
      const real lp = t.log(t.pick(dists[s], trajs[i].actions[s])).scalar();
      dev += std::abs(std::exp(lp - trajs[i].logp[s]) - 1.0);
      ++n;
    }
  }
  return n ? dev / static_cast<real>(n) : 0.0;
}

/// PPO: per episode, sync the old policy, sample a batch from it, score rewards,
/// compute GAE advantages from the value head, then run up to inner_epochs
/// full-batch steps on the clipped surrogate plus entropy bonus. The value head is
/// regressed toward the discounted returns with squared error.
inline std::vector<EpisodeMetrics> train_ppo(Policy& p, ValueHead& value, RewardStack& stack,
                                             const std::vector<Triple>& train, const std::vector<Triple>& dev,
                                             const RlConfig& cfg, Rng& rng, const EpisodeCallback& on_episode = {}) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_ppo: empty training set");
  p.set_embedder_frozen(true);
  ParameterList params;
  p.collect_seq2seq(params);
  auto vparams = value.parameters();
  const real gamma = stack.config().gamma;
  std::vector<EpisodeMetrics> log;
  Tape t;
  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    EpisodeMetrics m;
    m.episode = ep + 1;
    const std::size_t plen = detail::mixer_prefix_len(cfg, ep, train.size());
    Policy old = p;  // pi_old, fixed for this episode
    auto batch = detail::draw_batch(train, cfg.batch, rng);
    std::vector<Trajectory> trajs;
    std::vector<std::vector<TokenId>> prefixes;
    real ret_sum = 0.0;
    for (const Triple* tr : batch) {
      prefixes.push_back(detail::mixer_prefix(*tr, plen));
      Trajectory traj = old.sample_decode(tr->ill, rng, 0, prefixes.back());
      stack.score(traj, tr->ill, tr->answer, prefixes.back());
      traj.values.clear();
      for (const auto& k : traj.states) traj.values.push_back(value.value(k));
      traj.values.push_back(0.0);
      traj.advantages = gae_advantages(traj.rewards, traj.values, gamma, cfg.gae_lambda);
      if (!traj.returns.empty()) ret_sum += traj.returns.front();
      trajs.push_back(std::move(traj));
    }
    m.mean_return = ret_sum / static_cast<real>(batch.size());
    if (cfg.normalize_advantages) detail::normalize(trajs);

    for (std::size_t k = 0; k < cfg.inner_epochs; ++k) {
      nn::zero_grads(params);
      nn::zero_grads(vparams);
      std::size_t steps = 0, rl_steps = 0;
      real loss_sum = 0.0, vloss_sum = 0.0, ent_sum = 0.0, ratio_dev = 0.0, max_dlogp = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const Trajectory& tr = trajs[i];
        t.clear();
        std::vector<Var> terms;
        auto dists = detail::replay(t, p, *batch[i], prefixes[i], tr.actions, terms);
        for (std::size_t s = 0; s < tr.size(); ++s) {
          const real lp = std::log(std::max(dists[s].value()[tr.actions[s]], nn::kProbFloor));
          ratio_dev += std::abs(std::exp(lp - tr.logp[s]) - 1.0);
          max_dlogp = std::max(max_dlogp, std::abs(lp - tr.logp[s]));
        }
        terms.push_back(ppo_objective(t, dists, tr.actions, tr.logp, tr.advantages, cfg.clip_eps, cfg.c2));
        Var loss = t.add_all(terms);
        loss_sum += loss.scalar();
        detail::step_entropy(dists, ent_sum);
        steps += prefixes[i].size() + tr.size();
        rl_steps += tr.size();
        t.backward(loss);

        t.clear();
        std::vector<Var> vterms;
        for (std::size_t s = 0; s < tr.size(); ++s)
          vterms.push_back(t.square(t.sub(value(t, tr.states[s]), t.scalar(tr.returns[s]))));
        Var vloss = t.add_all(vterms);
        vloss_sum += vloss.scalar();
        if (!vterms.empty()) t.backward(vloss);
      }
      if (k == 0) {
        m.policy_loss = steps ? loss_sum / static_cast<real>(steps) : 0.0;
        m.value_loss = rl_steps ? vloss_sum / static_cast<real>(rl_steps) : 0.0;
        m.entropy = rl_steps ? ent_sum / static_cast<real>(rl_steps) : 0.0;
      }
      if (k > 0 && rl_steps > 0 && ratio_dev / static_cast<real>(rl_steps) < cfg.ratio_tol) break;
      if (max_dlogp > cfg.max_log_ratio) {
        ++m.skipped_steps;
        continue;
      }
      if (steps > 0) {
        nn::scale_grads(params, 1.0 / static_cast<real>(steps));
        if (cfg.clip_norm > 0) nn::clip_grad_norm(params, cfg.clip_norm);
        nn::adam_step(params, cfg.adam);
      }
      if (rl_steps > 0) {
        nn::scale_grads(vparams, 1.0 / static_cast<real>(rl_steps));
        if (cfg.clip_norm > 0) nn::clip_grad_norm(vparams, cfg.clip_norm);
        nn::adam_step(vparams, cfg.value_adam);
      }
    }
    detail::dev_metrics(p, stack, dev, m);
    log.push_back(m);
    if (on_episode) on_episode(m);
  }
  return log;
}

}  // namespace qrefine
