#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qrefine/seq2seq.hpp"

namespace qrefine {

struct RewardModelConfig {
  std::size_t word_dim = 64;
  std::size_t hidden = 64;
  real margin = 0.2;
  std::size_t epochs = 10;
  std::size_t batch = 32;
  nn::AdamConfig adam{};

  void validate() const {
    if (word_dim == 0 || hidden == 0) throw std::invalid_argument("reward model: dims must be positive");
    if (!(margin >= 0.0)) throw std::invalid_argument("reward model: margin must be >= 0");
  }
};

/// Question and answer LSTMs over a shared word table, scored with a bilinear term
/// sim(q, a) = enc_q(q)^T W_sim enc_a(a). Ill-formed and generated questions both
/// go through lstm_q.
struct RewardModel {
  RewardModelConfig cfg;
  Parameter words;
  nn::LstmCell lstm_q;
  nn::LstmCell lstm_a;
  Parameter w_sim;

  RewardModel() = default;
  RewardModel(const RewardModelConfig& c, std::size_t vocab, Rng& rng)
      : cfg(c),
        words("rm.words", {vocab, c.word_dim}),
        lstm_q("rm.lstm_q", c.word_dim, c.hidden, rng),
        lstm_a("rm.lstm_a", c.word_dim, c.hidden, rng),
        w_sim("rm.W_sim", {c.hidden, c.hidden}) {
    cfg.validate();
    words.init_uniform(rng, nn::kInitScale);
    w_sim.init_uniform(rng, nn::kInitScale);
  }

  void collect(ParameterList& out) {
    out.push_back(&words);
    lstm_q.collect(out);
    lstm_a.collect(out);
    out.push_back(&w_sim);
  }
  ParameterList parameters() {
    ParameterList p;
    collect(p);
    return p;
  }

  /// Final hidden state of `cell` over the word ids; an empty sequence encodes to zeros.
  Var encode(Tape& t, nn::LstmCell& cell, const std::vector<TokenId>& ids) {
    nn::LstmState s = cell.zero_state(t);
    for (TokenId id : ids) s = cell.step(t, t.lookup(words, id), s);
    return s.h;
  }
  Var encode_q(Tape& t, const std::vector<TokenId>& ids) { return encode(t, lstm_q, ids); }
  Var encode_a(Tape& t, const std::vector<TokenId>& ids) { return encode(t, lstm_a, ids); }

  Var sim(Tape& t, Var q, Var a) { return t.dot(q, t.matmul(t.param(w_sim), a)); }

  real similarity(const std::vector<TokenId>& q, const std::vector<TokenId>& a) {
    Tape t;
    return sim(t, encode_q(t, q), encode_a(t, a)).scalar();
  }

  /// max(0, margin - sim(pos, a) + sim(neg, a)).
  Var hinge(Tape& t, const std::vector<TokenId>& pos, const std::vector<TokenId>& neg, const std::vector<TokenId>& a) {
    Var av = encode_a(t, a);
    Var diff = t.sub(sim(t, encode_q(t, neg), av), sim(t, encode_q(t, pos), av));
    return t.relu(t.add(diff, t.scalar(cfg.margin)));
  }
};

inline std::vector<TokenId> ids_without_eos(const TokenSeq& s) { return s.without_eos().ids(); }

/// Share of triples where sim(well, answer) > sim(ill, answer).
inline real ranking_accuracy(RewardModel& m, const std::vector<Triple>& triples) {
  if (triples.empty()) return 0.0;
  std::size_t wins = 0;
  for (const auto& tr : triples) {
    const auto a = ids_without_eos(tr.answer);
    wins += m.similarity(ids_without_eos(tr.well), a) > m.similarity(ids_without_eos(tr.ill), a);
  }
  return static_cast<real>(wins) / static_cast<real>(triples.size());
}

/// Minimizes the hinge with the well-formed question as positive and the
/// ill-formed one as negative, then freezes the model. Returns per-epoch mean loss.
inline std::vector<real> train_reward_model(RewardModel& m, const std::vector<Triple>& triples, Rng& rng) {
  if (triples.empty()) throw std::invalid_argument("train_reward_model: empty corpus");
  auto params = m.parameters();
  nn::set_frozen(params, false);
  std::vector<std::size_t> order(triples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<real> curve;
  Tape t;
  for (std::size_t e = 0; e < m.cfg.epochs; ++e) {
    rng.shuffle(order);
    real total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += m.cfg.batch) {
      const std::size_t end = std::min(order.size(), start + m.cfg.batch);
      nn::zero_grads(params);
      for (std::size_t k = start; k < end; ++k) {
        const auto& tr = triples[order[k]];
        t.clear();
        Var loss = m.hinge(t, ids_without_eos(tr.well), ids_without_eos(tr.ill), ids_without_eos(tr.answer));
        total += loss.scalar();
        t.backward(loss);
      }
      nn::scale_grads(params, 1.0 / static_cast<real>(end - start));
      nn::adam_step(params, m.cfg.adam);
    }
    curve.push_back(total / static_cast<real>(triples.size()));
  }
  nn::set_frozen(params, true);
  return curve;
}

/// r_ac = max(0, margin - sim(x, a) + sim(y, a)).
inline real answer_correlation_reward(real sim_x, real sim_y, real margin) {
  return std::max(0.0, margin - sim_x + sim_y);
}

/// r(y_i) = r_w(y_i), plus c1 * r_ac on the final step.
inline std::vector<real> combined_reward(std::vector<real> r_w, real r_ac, real c1) {
  if (!r_w.empty()) r_w.back() += c1 * r_ac;
  return r_w;
}

/// R(y_t) = sum_j gamma^j r(y_{t+j}), via the backward recurrence R_t = r_t + gamma R_{t+1}.
inline std::vector<real> discounted_returns(const std::vector<real>& r, real gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("discounted_returns: gamma outside [0,1]");
  std::vector<real> out(r.size());
  real acc = 0.0;
  for (std::size_t i = r.size(); i-- > 0;) {
    acc = r[i] + gamma * acc;
    out[i] = acc;
  }
  return out;
}

struct RewardConfig {
  real c1 = 1.0;
  real gamma = 0.95;
  /// Off switch for the wording reward (answer-only ablation).
  bool use_wording = true;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("reward: gamma must lie in [0,1]");
    if (!(c1 >= 0.0)) throw std::invalid_argument("reward: c1 must be >= 0");
  }
};

/// Per-step wording reward for generated actions (EOS-terminated or capped).
/// Word step t gets r_B(y_t) + p_lm(y_{t+1} | k_t) where y_{t+1} is EOS after the
/// last word; an EOS action itself gets 0.
///   r_B:  masked-LM probability of y_t with position t masked
///   p_lm: next-token probability under the frozen pretrained policy, given x
inline std::vector<real> wording_reward(const std::vector<TokenId>& actions, const TokenSeq& x,
                                        ContextualEncoder& mlm, Policy& pretrained) {
  std::vector<TokenId> words(actions);
  const bool eos = !words.empty() && words.back() == kEos;
  if (eos) words.pop_back();
  std::vector<real> out(actions.size(), 0.0);
  if (words.empty()) return out;
  const auto rb = mlm.masked_probabilities(words);
  Tape t;
  auto enc = pretrained.encode(t, x);
  auto steps = pretrained.teacher_force(t, enc, words, words.size() + 1);
  for (std::size_t i = 0; i < words.size(); ++i) {
    const TokenId next = i + 1 < words.size() ? words[i + 1] : kEos;
    out[i] = rb[i] + steps[i + 1].dist.value()[next];
  }
  return out;
}

/// Frozen reward machinery used during RL: masked LM, pretrained policy copy and
/// QA reward model. Scores are memoized since all three are fixed.
class RewardStack {
 public:
  RewardStack(Policy pretrained, RewardModel model, RewardConfig cfg)
      : lm_(std::move(pretrained)), model_(std::move(model)), cfg_(cfg) {
    cfg_.validate();
    lm_.set_embedder_frozen(true);
    nn::set_frozen(lm_.parameters(), true);
    nn::set_frozen(model_.parameters(), true);
  }

  const RewardConfig& config() const { return cfg_; }
  RewardModel& model() { return model_; }
  Policy& pretrained() { return lm_; }

  std::vector<real> wording(const std::vector<TokenId>& actions, const TokenSeq& x) {
    if (!cfg_.use_wording) return std::vector<real>(actions.size(), 0.0);
    auto key = std::make_pair(x.text(), actions);
    auto it = wording_memo_.find(key);
    if (it == wording_memo_.end()) it = wording_memo_.emplace(key, wording_reward(actions, x, lm_.emb.ctx, lm_)).first;
    return it->second;
  }

  real sim_question(const std::vector<TokenId>& q, const std::vector<TokenId>& a) {
    auto key = std::make_pair(q, a);
    auto it = sim_memo_.find(key);
    if (it == sim_memo_.end()) it = sim_memo_.emplace(key, model_.similarity(q, a)).first;
    return it->second;
  }

  real answer_reward(const TokenSeq& x, const std::vector<TokenId>& y_words, const TokenSeq& a) {
    const auto av = ids_without_eos(a);
    return answer_correlation_reward(sim_question(ids_without_eos(x), av), sim_question(y_words, av),
                                     model_.cfg.margin);
  }

  /// Fills per-step rewards and discounted returns of a trajectory. `prefix` holds
  /// teacher-forced tokens emitted before it; rewards are computed on the whole
  /// sequence and only the trajectory's own steps are kept.
  void score(Trajectory& tr, const TokenSeq& x, const TokenSeq& a, const std::vector<TokenId>& prefix = {}) {
    std::vector<TokenId> full(prefix);
    full.insert(full.end(), tr.actions.begin(), tr.actions.end());
    std::vector<TokenId> words(full);
    if (!words.empty() && words.back() == kEos) words.pop_back();
    auto r = combined_reward(wording(full, x), answer_reward(x, words, a), cfg_.c1);
    tr.rewards.assign(r.begin() + static_cast<std::ptrdiff_t>(prefix.size()), r.end());
    tr.returns = discounted_returns(tr.rewards, cfg_.gamma);
  }

  /// Undiscounted total reward of a full action sequence.
  real total(const std::vector<TokenId>& actions, const TokenSeq& x, const TokenSeq& a) {
    Trajectory tr;
    tr.actions = actions;
    score(tr, x, a);
    real s = 0.0;
    for (real v : tr.rewards) s += v;
    return s;
  }

  void clear_memo() {
    wording_memo_.clear();
    sim_memo_.clear();
  }

 private:
  Policy lm_;
  RewardModel model_;
  RewardConfig cfg_;
  std::map<std::pair<std::string, std::vector<TokenId>>, std::vector<real>> wording_memo_;
  std::map<std::pair<std::vector<TokenId>, std::vector<TokenId>>, real> sim_memo_;
};

}  // namespace qrefine
