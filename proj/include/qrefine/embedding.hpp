#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrefine/corpus/corpus.hpp"
#include "qrefine/nn/layers.hpp"
#include "qrefine/nn/optim.hpp"

namespace qrefine {

using nn::Parameter;
using nn::ParameterList;
using nn::real;
using nn::Tape;
using nn::Var;

struct EmbedderConfig {
  std::size_t word_dim = 100;
  std::size_t char_dim = 50;
  std::size_t char_hidden = 100;
  /// Contextual vector size; the masked-LM BiLSTM uses ctx_dim / 2 units per direction.
  std::size_t ctx_dim = 64;
  std::size_t ctx_layers = 2;
  /// Input embedding size of the masked-LM encoder.
  std::size_t ctx_input_dim = 32;
  bool use_char = true;
  bool use_ctx = true;

  std::size_t dim() const { return word_dim + (use_char ? 2 * char_hidden : 0) + (use_ctx ? ctx_dim : 0); }

  void validate() const {
    if (word_dim == 0) throw std::invalid_argument("embedding: word_dim must be positive");
    if (use_char && (char_dim == 0 || char_hidden == 0))
      throw std::invalid_argument("embedding: char_dim and char_hidden must be positive");
    if (use_ctx && (ctx_dim < 2 || ctx_dim % 2 != 0))
      throw std::invalid_argument("embedding: ctx_dim must be a positive even number");
    if (use_ctx && (ctx_layers == 0 || ctx_input_dim == 0))
      throw std::invalid_argument("embedding: ctx_layers and ctx_input_dim must be positive");
  }
};

/// Context-free |V| x d_w table.
struct WordTable {
  Parameter table;

  WordTable() = default;
  WordTable(std::size_t vocab, std::size_t dim, Rng& rng) : table("emb.word", {vocab, dim}) {
    table.init_uniform(rng, nn::kInitScale);
  }

  std::size_t vocab_size() const { return table.shape().rows; }
  std::size_t dim() const { return table.shape().cols; }
  Var operator()(Tape& t, TokenId id) { return t.lookup(table, id); }
  void collect(ParameterList& out) { out.push_back(&table); }
};

/// Reads "word v1 ... vd" lines into the rows of known words. Returns the number
/// of rows filled; unknown words are skipped, a wrong dimension is an error.
inline std::size_t load_word_vectors(const std::string& path, const Vocabulary& vocab, WordTable& words) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open word vectors " + path);
  std::size_t filled = 0, lineno = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string w;
    if (!(ss >> w)) continue;
    std::vector<real> v;
    real x;
    while (ss >> x) v.push_back(x);
    if (v.size() != words.dim())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(words.dim()) +
                               " values, got " + std::to_string(v.size()));
    if (!vocab.contains(w)) continue;
    std::copy(v.begin(), v.end(), words.table.values().begin() + vocab.id(w) * words.dim());
    ++filled;
  }
  return filled;
}

/// Character BiLSTM; a word is the concatenation of the final forward and final
/// backward hidden states.
struct CharEncoder {
  CharVocabulary chars;
  Parameter table;
  nn::BiLstm lstm;

  CharEncoder() = default;
  CharEncoder(CharVocabulary cv, std::size_t char_dim, std::size_t hidden, Rng& rng)
      : chars(std::move(cv)), table("emb.char.table", {chars.size(), char_dim}), lstm("emb.char.lstm", char_dim, hidden, rng) {
    table.init_uniform(rng, nn::kInitScale);
  }

  std::size_t dim() const { return lstm.out_dim(); }

  Var operator()(Tape& t, const std::string& word) {
    if (word.empty()) throw std::invalid_argument("embed_char: empty word");
    std::vector<Var> xs;
    xs.reserve(word.size());
    for (unsigned char c : word) xs.push_back(t.lookup(table, chars.id(c)));
    auto out = lstm.run(t, xs);
    return t.concat({out.fwd_final, out.bwd_final});
  }

  void collect(ParameterList& out) {
    out.push_back(&table);
    lstm.collect(out);
  }
};

/// Masked language model over word ids: embedding (with an extra MASK row at
/// index |V|), stacked BiLSTM layers and a softmax head over |V|.
struct ContextualEncoder {
  Parameter emb;
  std::vector<nn::BiLstm> layers;
  nn::Linear head;

  ContextualEncoder() = default;
  ContextualEncoder(std::size_t vocab, std::size_t input_dim, std::size_t ctx_dim, std::size_t n_layers, Rng& rng)
      : emb("ctx.emb", {vocab + 1, input_dim}) {
    emb.init_uniform(rng, nn::kInitScale);
    const std::size_t h = ctx_dim / 2;
    for (std::size_t l = 0; l < n_layers; ++l)
      layers.emplace_back("ctx.l" + std::to_string(l), l == 0 ? input_dim : 2 * h, h, rng);
    head = nn::Linear("ctx.head", 2 * h, vocab, rng);
  }

  std::size_t vocab_size() const { return emb.shape().rows - 1; }
  TokenId mask_id() const { return static_cast<TokenId>(vocab_size()); }
  std::size_t dim() const { return layers.back().out_dim(); }
  bool frozen() const { return emb.frozen(); }

  /// Top-layer states per position; positions flagged in `masked` read the MASK row.
  std::vector<Var> states(Tape& t, const std::vector<TokenId>& ids, const std::vector<bool>& masked = {}) {
    if (ids.empty()) throw std::invalid_argument("contextual encoder: empty sequence");
    std::vector<Var> xs;
    xs.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i)
      xs.push_back(t.lookup(emb, !masked.empty() && masked[i] ? mask_id() : ids[i]));
    for (auto& layer : layers) xs = layer.run(t, xs).states;
    return xs;
  }

  Var distribution(Tape& t, Var state) { return t.softmax(head(t, state)); }

  /// Probability of ids[i] at position i with that position masked, for every i.
  std::vector<real> masked_probabilities(const std::vector<TokenId>& ids) {
    std::vector<real> out(ids.size());
    Tape t;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      t.clear();
      std::vector<bool> m(ids.size(), false);
      m[i] = true;
      auto s = states(t, ids, m);
      out[i] = distribution(t, s[i]).value()[ids[i]];
    }
    return out;
  }

  void collect(ParameterList& out) {
    out.push_back(&emb);
    for (auto& l : layers) l.collect(out);
    head.collect(out);
  }
};

struct MlmConfig {
  real mask_prob = 0.15;
  std::size_t epochs = 20;
  std::size_t batch = 32;
  nn::AdamConfig adam{};
};

/// Masked-token cross-entropy summed over masked positions of one sentence.
/// Returns the loss var and the number of masked positions.
inline std::pair<Var, std::size_t> mlm_loss(Tape& t, ContextualEncoder& enc, const std::vector<TokenId>& ids,
                                            const std::vector<bool>& masked) {
  auto s = enc.states(t, ids, masked);
  std::vector<Var> terms;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (masked[i]) terms.push_back(t.cross_entropy(enc.distribution(t, s[i]), ids[i]));
  return {t.add_all(terms), terms.size()};
}

/// Trains the masked LM. Each position is masked with probability mask_prob; a
/// sentence where the coin leaves nothing masked gets one forced mask unless
/// mask_prob is 0. Returns the mean per-masked-token loss of every epoch.
inline std::vector<real> train_mlm(ContextualEncoder& enc, const std::vector<std::vector<TokenId>>& sentences,
                                   const MlmConfig& cfg, Rng& rng) {
  if (sentences.empty()) throw std::invalid_argument("train_mlm: empty corpus");
  if (!(cfg.mask_prob >= 0.0 && cfg.mask_prob <= 1.0)) throw std::invalid_argument("train_mlm: mask_prob outside [0,1]");
  ParameterList params;
  enc.collect(params);
  std::vector<std::size_t> order(sentences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<real> curve;
  Tape t;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    real total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      nn::zero_grads(params);
      std::size_t batch_masked = 0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& ids = sentences[order[k]];
        if (ids.empty()) continue;
        std::vector<bool> m(ids.size(), false);
        bool any = false;
        for (std::size_t i = 0; i < ids.size(); ++i) any |= (m[i] = rng.bernoulli(cfg.mask_prob));
        if (!any && cfg.mask_prob > 0.0) m[rng.below(ids.size())] = true;
        t.clear();
        auto [loss, n] = mlm_loss(t, enc, ids, m);
        if (n == 0) continue;
        total += loss.scalar();
        count += n;
        batch_masked += n;
        t.backward(loss);
      }
      if (batch_masked == 0) continue;
      for (auto* p : params)
        for (auto& g : p->grad()) g /= static_cast<real>(batch_masked);
      nn::adam_step(params, cfg.adam);
    }
    curve.push_back(count ? total / static_cast<real>(count) : 0.0);
  }
  return curve;
}

/// Word table row ++ character vector ++ contextual vector per token.
struct MultiGrainEmbedder {
  EmbedderConfig cfg;
  WordTable words;
  CharEncoder chars;
  ContextualEncoder ctx;
  /// Ablation hook: replaces the contextual component with zeros.
  bool zero_contextual = false;

  MultiGrainEmbedder() = default;
  MultiGrainEmbedder(const EmbedderConfig& c, const Vocabulary& vocab, const CharVocabulary& cv, Rng& rng) : cfg(c) {
    cfg.validate();
    words = WordTable(vocab.size(), cfg.word_dim, rng);
    if (cfg.use_char) chars = CharEncoder(cv, cfg.char_dim, cfg.char_hidden, rng);
    if (cfg.use_ctx) ctx = ContextualEncoder(vocab.size(), cfg.ctx_input_dim, cfg.ctx_dim, cfg.ctx_layers, rng);
  }

  std::size_t dim() const { return cfg.dim(); }

  std::vector<Var> represent(Tape& t, const TokenSeq& seq) {
    if (seq.empty()) throw std::invalid_argument("represent: empty sequence");
    std::vector<Var> ctx_vecs;
    if (cfg.use_ctx) ctx_vecs = contextual(t, seq);
    std::vector<Var> out;
    out.reserve(seq.size());
    std::map<std::string, Var> char_memo;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      std::vector<Var> parts{words(t, seq[i].id)};
      if (cfg.use_char) {
        auto it = char_memo.find(seq[i].surface);
        if (it == char_memo.end()) it = char_memo.emplace(seq[i].surface, chars(t, seq[i].surface)).first;
        parts.push_back(it->second);
      }
      if (cfg.use_ctx) parts.push_back(ctx_vecs[i]);
      out.push_back(t.concat(parts));
    }
    return out;
  }

  /// Contextual vectors for an unmasked sentence. A frozen encoder is evaluated on a
  /// private tape and its values enter `t` as constants.
  std::vector<Var> contextual(Tape& t, const TokenSeq& seq) {
    const auto ids = seq.ids();
    std::vector<Var> out;
    if (zero_contextual) {
      for (std::size_t i = 0; i < ids.size(); ++i) out.push_back(t.input(std::vector<real>(ctx.dim(), 0.0)));
      return out;
    }
    if (!ctx.frozen()) {
      ctx_cache_.clear();
      return ctx.states(t, ids);
    }
    auto it = ctx_cache_.find(ids);
    if (it == ctx_cache_.end()) {
      Tape local;
      std::vector<std::vector<real>> vals;
      for (Var v : ctx.states(local, ids)) vals.emplace_back(v.value().begin(), v.value().end());
      it = ctx_cache_.emplace(ids, std::move(vals)).first;
    }
    for (const auto& v : it->second) out.push_back(t.input(v));
    return out;
  }

  void clear_cache() { ctx_cache_.clear(); }

  void collect_words(ParameterList& out) { words.collect(out); }
  void collect_chars(ParameterList& out) {
    if (cfg.use_char) chars.collect(out);
  }
  void collect_ctx(ParameterList& out) {
    if (cfg.use_ctx) ctx.collect(out);
  }
  void collect(ParameterList& out) {
    collect_words(out);
    collect_chars(out);
    collect_ctx(out);
  }

 private:
  std::map<std::vector<TokenId>, std::vector<std::vector<real>>> ctx_cache_;
};

}  // namespace qrefine
