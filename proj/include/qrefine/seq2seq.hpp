#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrefine/embedding.hpp"
#include "qrefine/nn/checkpoint.hpp"

namespace qrefine {

struct PolicyConfig {
  EmbedderConfig embed{};
  std::size_t enc_hidden = 128;
  /// Decoder hidden size d; encoder states are projected to d.
  std::size_t dec_hidden = 256;
  std::size_t dec_layers = 1;
  /// Width of the tanh layer inside the output function.
  std::size_t out_hidden = 256;
  std::size_t max_len = 20;
  /// Longer sources are truncated.
  std::size_t src_cap = 40;

  void validate() const {
    embed.validate();
    if (enc_hidden == 0 || dec_hidden == 0 || out_hidden == 0)
      throw std::invalid_argument("seq2seq: hidden sizes must be positive");
    if (dec_layers == 0) throw std::invalid_argument("seq2seq: dec_layers must be >= 1");
    if (max_len == 0) throw std::invalid_argument("seq2seq: max_len must be >= 1");
    if (src_cap == 0) throw std::invalid_argument("seq2seq: src_cap must be >= 1");
  }
};

struct EncoderStates {
  std::vector<Var> states;  // h_1..h_N, each d x 1
  Var matrix;               // N x d, row n = h_n
  Var matrix_t;             // d x N
  std::vector<nn::LstmState> init;
  bool truncated = false;
};

struct DecoderState {
  std::vector<nn::LstmState> layers;
  std::size_t step = 0;
  Var k() const { return layers.back().h; }
};

struct AttentionResult {
  Var alpha;    // N x 1
  Var context;  // d x 1
};

struct StepOutput {
  DecoderState state;
  AttentionResult attn;
  Var dist;  // |V| x 1
};

/// One sampled generation. All per-step vectors share the length of `actions`.
struct Trajectory {
  std::vector<TokenId> actions;
  std::vector<real> logp;
  std::vector<std::vector<real>> states;
  std::vector<real> rewards;
  std::vector<real> values;
  std::vector<real> returns;
  std::vector<real> advantages;

  std::size_t size() const { return actions.size(); }
  bool ends_with_eos() const { return !actions.empty() && actions.back() == kEos; }
  /// Generated words without the terminating EOS.
  std::vector<TokenId> words() const {
    std::vector<TokenId> w(actions);
    if (ends_with_eos()) w.pop_back();
    return w;
  }
};

/// Attentive encoder-decoder over multi-grain source embeddings.
/// Output distribution: softmax(W_o tanh(U_h k_m + W_h c_m)).
struct Policy {
  PolicyConfig cfg;
  Vocabulary vocab;
  MultiGrainEmbedder emb;
  nn::BiLstm encoder;
  nn::Linear enc_proj;
  std::vector<nn::LstmCell> decoder;
  Parameter u_h, w_h, w_o;

  Policy() = default;
  Policy(const PolicyConfig& c, Vocabulary v, const CharVocabulary& cv, Rng& rng) : cfg(c), vocab(std::move(v)) {
    cfg.validate();
    emb = MultiGrainEmbedder(cfg.embed, vocab, cv, rng);
    encoder = nn::BiLstm("enc.lstm", emb.dim(), cfg.enc_hidden, rng);
    enc_proj = nn::Linear("enc.proj", 2 * cfg.enc_hidden, cfg.dec_hidden, rng);
    for (std::size_t l = 0; l < cfg.dec_layers; ++l)
      decoder.emplace_back("dec.l" + std::to_string(l), l == 0 ? cfg.embed.word_dim : cfg.dec_hidden, cfg.dec_hidden,
                           rng);
    u_h = Parameter("dec.U_h", {cfg.out_hidden, cfg.dec_hidden});
    w_h = Parameter("dec.W_h", {cfg.out_hidden, cfg.dec_hidden});
    w_o = Parameter("dec.W_o", {vocab.size(), cfg.out_hidden});
    u_h.init_uniform(rng, nn::kInitScale);
    w_h.init_uniform(rng, nn::kInitScale);
    w_o.init_uniform(rng, nn::kInitScale);
  }

  std::size_t vocab_size() const { return vocab.size(); }

  void collect(ParameterList& out) {
    emb.collect(out);
    collect_seq2seq(out);
  }
  /// Everything except the embedder.
  void collect_seq2seq(ParameterList& out) {
    encoder.collect(out);
    enc_proj.collect(out);
    for (auto& l : decoder) l.collect(out);
    out.push_back(&u_h);
    out.push_back(&w_h);
    out.push_back(&w_o);
  }
  ParameterList parameters() {
    ParameterList p;
    collect(p);
    return p;
  }

  /// Freezes (or thaws) the whole embedder. Frozen source representations are cached.
  void set_embedder_frozen(bool frozen) {
    ParameterList p;
    emb.collect(p);
    nn::set_frozen(p, frozen);
    src_cache_.clear();
  }
  bool embedder_frozen() {
    ParameterList p;
    emb.collect(p);
    return std::all_of(p.begin(), p.end(), [](auto* q) { return q->frozen(); });
  }
  void clear_caches() {
    src_cache_.clear();
    emb.clear_cache();
  }

  std::vector<Var> source_representation(Tape& t, const TokenSeq& x) {
    if (!embedder_frozen()) {
      src_cache_.clear();
      return emb.represent(t, x);
    }
    const std::string key = cache_key(x);
    auto it = src_cache_.find(key);
    if (it == src_cache_.end()) {
      Tape local;
      std::vector<std::vector<real>> vals;
      for (Var v : emb.represent(local, x)) vals.emplace_back(v.value().begin(), v.value().end());
      it = src_cache_.emplace(key, std::move(vals)).first;
    }
    std::vector<Var> out;
    out.reserve(it->second.size());
    for (const auto& v : it->second) out.push_back(t.input(v));
    return out;
  }

  EncoderStates encode(Tape& t, const TokenSeq& x) {
    if (x.empty()) throw std::invalid_argument("encode: empty source");
    EncoderStates enc;
    TokenSeq src = x.without_eos();
    if (src.empty()) throw std::invalid_argument("encode: source holds only EOS");
    if (src.size() > cfg.src_cap) {
      src.truncate(cfg.src_cap);
      enc.truncated = true;
    }
    auto reps = source_representation(t, src);
    auto bi = encoder.run(t, reps);
    enc.states.reserve(bi.states.size());
    for (Var s : bi.states) enc.states.push_back(enc_proj(t, s));
    enc.matrix = t.stack_rows(enc.states);
    enc.matrix_t = t.transpose(enc.matrix);
    Var h0 = enc_proj(t, t.concat({bi.fwd_final, bi.bwd_final}));
    Var c0 = t.input(std::vector<real>(cfg.dec_hidden, 0.0));
    enc.init.assign(cfg.dec_layers, nn::LstmState{h0, c0});
    return enc;
  }

  /// Dot-product attention: alpha = softmax_n(h_n . k), c = sum_n alpha_n h_n.
  static AttentionResult attention(Tape& t, const EncoderStates& enc, Var k) {
    Var alpha = t.softmax(t.matmul(enc.matrix, k));
    return {alpha, t.matmul(enc.matrix_t, alpha)};
  }

  DecoderState initial_state(const EncoderStates& enc) const { return {enc.init, 0}; }

  StepOutput decode_step(Tape& t, const DecoderState& prev, TokenId y_prev, const EncoderStates& enc) {
    StepOutput out;
    out.state.step = prev.step + 1;
    Var x = emb.words(t, y_prev);
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      out.state.layers.push_back(decoder[l].step(t, x, prev.layers[l]));
      x = out.state.layers.back().h;
    }
    out.attn = attention(t, enc, x);
    Var hidden = t.tanh(t.add(t.matmul(t.param(u_h), x), t.matmul(t.param(w_h), out.attn.context)));
    out.dist = t.softmax(t.matmul(t.param(w_o), hidden));
    return out;
  }

  /// Runs the decoder on SOS followed by `inputs`; step i predicts the token after inputs[i-1].
  std::vector<StepOutput> teacher_force(Tape& t, const EncoderStates& enc, const std::vector<TokenId>& inputs,
                                        std::size_t steps) {
    std::vector<StepOutput> outs;
    outs.reserve(steps);
    DecoderState s = initial_state(enc);
    for (std::size_t i = 0; i < steps; ++i) {
      const TokenId prev = i == 0 ? kSos : inputs[i - 1];
      outs.push_back(decode_step(t, s, prev, enc));
      s = outs.back().state;
    }
    return outs;
  }

  /// Mean per-step cross-entropy of y followed by EOS under teacher forcing.
  Var supervised_loss(Tape& t, const TokenSeq& x, const TokenSeq& y) {
    auto gold = y.without_eos().ids();
    if (gold.empty()) throw std::invalid_argument("supervised_loss: empty target");
    gold.push_back(kEos);
    auto enc = encode(t, x);
    auto outs = teacher_force(t, enc, gold, gold.size());
    std::vector<Var> terms;
    terms.reserve(gold.size());
    for (std::size_t i = 0; i < gold.size(); ++i) terms.push_back(t.cross_entropy(outs[i].dist, gold[i]));
    return t.scale(t.add_all(terms), 1.0 / static_cast<real>(gold.size()));
  }

  /// Argmax decoding (lowest id wins ties); stops after EOS or max_len tokens.
  std::vector<TokenId> greedy_decode(const TokenSeq& x, std::size_t max_len = 0) {
    if (max_len == 0) max_len = cfg.max_len;
    Tape t;
    auto enc = encode(t, x);
    DecoderState s = initial_state(enc);
    std::vector<TokenId> out;
    TokenId prev = kSos;
    while (out.size() < max_len) {
      auto step = decode_step(t, s, prev, enc);
      auto d = step.dist.value();
      prev = static_cast<TokenId>(std::max_element(d.begin(), d.end()) - d.begin());
      out.push_back(prev);
      s = step.state;
      if (prev == kEos) break;
    }
    return out;
  }

  /// Samples from each step's distribution. `forced` tokens, if any, are fed
  /// instead of sampled for the first forced.size() steps (MIXER prefix); those
  /// steps are not part of the returned trajectory.
  Trajectory sample_decode(const TokenSeq& x, Rng& rng, std::size_t max_len = 0,
                           const std::vector<TokenId>& forced = {}) {
    if (max_len == 0) max_len = cfg.max_len;
    Tape t;
    auto enc = encode(t, x);
    DecoderState s = initial_state(enc);
    TokenId prev = kSos;
    Trajectory tr;
    std::size_t produced = 0;
    for (TokenId f : forced) {
      if (produced >= max_len) break;
      s = decode_step(t, s, prev, enc).state;
      prev = f;
      ++produced;
      if (f == kEos) return tr;
    }
    while (produced < max_len) {
      auto step = decode_step(t, s, prev, enc);
      auto d = step.dist.value();
      const auto a = static_cast<TokenId>(rng.categorical(d));
      tr.actions.push_back(a);
      tr.logp.push_back(std::log(std::max(d[a], nn::kProbFloor)));
      auto k = step.state.k().value();
      tr.states.emplace_back(k.begin(), k.end());
      s = step.state;
      prev = a;
      ++produced;
      if (a == kEos) break;
    }
    return tr;
  }

  TokenSeq to_tokens(const std::vector<TokenId>& ids) const {
    TokenSeq out;
    for (TokenId i : ids)
      if (i != kEos) out.push_back({vocab.word(i), i});
    return out;
  }

 private:
  static std::string cache_key(const TokenSeq& x) {
    std::string k;
    for (const auto& tok : x) {
      k += tok.surface;
      k += '\x1f';
      k += std::to_string(tok.id);
      k += '\x1e';
    }
    return k;
  }

  std::map<std::string, std::vector<std::vector<real>>> src_cache_;
};

struct MixerConfig {
  std::size_t initial = 12;
  std::size_t decrement = 3;
  std::size_t interval = 2;
};

/// Teacher-forced prefix length for an epoch: initial - decrement * floor(epoch / interval), floored at 0.
inline std::size_t mixer_schedule(std::size_t epoch, const MixerConfig& cfg) {
  if (cfg.interval == 0) throw std::invalid_argument("mixer_schedule: interval must be >= 1");
  const std::size_t cut = cfg.decrement * (epoch / cfg.interval);
  return cut >= cfg.initial ? 0 : cfg.initial - cut;
}

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 64;
  nn::AdamConfig adam{};
  real clip_norm = 5.0;
};

struct PretrainEpoch {
  std::size_t epoch = 0;
  real train_loss = 0.0;
  real dev_loss = 0.0;
};

/// Mean supervised loss over pairs without touching gradients.
inline real mean_supervised_loss(Policy& p, const std::vector<Triple>& pairs, bool from_well = false) {
  if (pairs.empty()) return 0.0;
  real total = 0.0;
  Tape t;
  for (const auto& tr : pairs) {
    t.clear();
    total += p.supervised_loss(t, from_well ? tr.well : tr.ill, tr.well).scalar();
  }
  return total / static_cast<real>(pairs.size());
}

/// Teacher-forced cross-entropy training (ill -> well) with best-dev-loss selection:
/// on return the policy holds the parameters of the epoch with the lowest dev loss.
/// `on_epoch` sees every epoch record after it is computed.
inline std::vector<PretrainEpoch> pretrain(Policy& p, const std::vector<Triple>& train, const std::vector<Triple>& dev,
                                           const PretrainConfig& cfg, Rng& rng,
                                           const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
  if (train.empty()) throw std::invalid_argument("pretrain: empty training set");
  auto params = p.parameters();
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<PretrainEpoch> log;
  nn::Checkpoint best;
  real best_dev = std::numeric_limits<real>::infinity();
  Tape t;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    real total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      nn::zero_grads(params);
      for (std::size_t k = start; k < end; ++k) {
        const auto& tr = train[order[k]];
        t.clear();
        Var loss = p.supervised_loss(t, tr.ill, tr.well);
        total += loss.scalar();
        t.backward(loss);
      }
      nn::scale_grads(params, 1.0 / static_cast<real>(end - start));
      if (cfg.clip_norm > 0) nn::clip_grad_norm(params, cfg.clip_norm);
      nn::adam_step(params, cfg.adam);
    }
    PretrainEpoch rec{e + 1, total / static_cast<real>(train.size()), 0.0};
    rec.dev_loss = dev.empty() ? rec.train_loss : mean_supervised_loss(p, dev);
    if (rec.dev_loss < best_dev) {
      best_dev = rec.dev_loss;
      best = nn::snapshot(params);
    }
    log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (!best.tensors.empty()) nn::restore(best, params);
  p.clear_caches();
  return log;
}

}  // namespace qrefine
