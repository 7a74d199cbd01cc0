#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrefine/corpus/corpus.hpp"
#include "qrefine/rng.hpp"

namespace qrefine {

enum class CorruptionOp { WrongWord, WrongOrder, NoisyBackground };

inline const char* to_string(CorruptionOp op) {
  switch (op) {
    case CorruptionOp::WrongWord: return "wrong_word";
    case CorruptionOp::WrongOrder: return "wrong_order";
    case CorruptionOp::NoisyBackground: return "noisy_background";
  }
  return "?";
}

struct CorruptionSpec {
  double wrong_word_rate = 0.3;
  std::size_t fragment_count = 3;
  std::size_t distractor_max_len = 6;
  /// Probability that the composite operator fires each enabled operator.
  double op_probability = 0.5;
  std::set<CorruptionOp> operators{CorruptionOp::WrongWord, CorruptionOp::WrongOrder, CorruptionOp::NoisyBackground};
  /// Letters used for character substitution.
  std::string alphabet = "abcdefghijklmnopqrstuvwxyz";

  void validate() const {
    if (!(wrong_word_rate >= 0.0 && wrong_word_rate <= 1.0))
      throw std::invalid_argument("CorruptionSpec: wrong_word_rate must lie in [0,1]");
    if (!(op_probability >= 0.0 && op_probability <= 1.0))
      throw std::invalid_argument("CorruptionSpec: op_probability must lie in [0,1]");
    if (distractor_max_len < 1) throw std::invalid_argument("CorruptionSpec: distractor_max_len must be >= 1");
    if (fragment_count < 1) throw std::invalid_argument("CorruptionSpec: fragment_count must be >= 1");
    if (alphabet.size() < 2) throw std::invalid_argument("CorruptionSpec: alphabet needs at least 2 letters");
  }
};

/// Side information about what a corruption call did.
struct CorruptionLog {
  std::vector<CorruptionOp> applied;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool is_alpha_word(const std::string& w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](unsigned char c) { return c >= 'a' && c <= 'z'; });
}

}  // namespace detail

/// Misspells each purely alphabetic word with probability wrong_word_rate by one of:
/// substituting a letter, swapping two adjacent letters, or transposing a random pair.
/// Punctuation and clitic tokens are left alone so the result re-tokenizes identically.
inline TokenSeq corrupt_wrong_word(const TokenSeq& seq, const CorruptionSpec& spec, Rng& rng,
                                   CorruptionLog* log = nullptr) {
  spec.validate();
  TokenSeq out = seq;
  bool changed = false;
  for (auto& tok : out) {
    if (!detail::is_alpha_word(tok.surface)) continue;
    if (!rng.bernoulli(spec.wrong_word_rate)) continue;
    std::string& w = tok.surface;
    const std::size_t kind = w.size() < 2 ? 0 : rng.below(3);
    if (kind == 0) {
      const std::size_t pos = rng.below(w.size());
      char c;
      do {
        c = spec.alphabet[rng.below(spec.alphabet.size())];
      } while (c == w[pos]);
      w[pos] = c;
    } else if (kind == 1) {
      const std::size_t pos = rng.below(w.size() - 1);
      std::swap(w[pos], w[pos + 1]);
    } else {
      const std::size_t i = rng.below(w.size());
      std::size_t j = rng.below(w.size() - 1);
      if (j >= i) ++j;
      std::swap(w[i], w[j]);
    }
    tok.id = kUnk;
    changed = true;
  }
  if (log && changed) log->applied.push_back(CorruptionOp::WrongWord);
  return out;
}

/// Cuts the sequence into fragment_count contiguous pieces and emits them in a
/// non-identity order. Multiset of tokens is preserved.
inline TokenSeq corrupt_wrong_order(const TokenSeq& seq, const CorruptionSpec& spec, Rng& rng,
                                    CorruptionLog* log = nullptr) {
  spec.validate();
  if (seq.size() < 2) {
    if (log) log->warnings.push_back("wrong_order: sequence shorter than 2 tokens left unchanged");
    return seq;
  }
  const std::size_t k = std::min(spec.fragment_count, seq.size());
  if (k < 2) return seq;
  std::vector<std::size_t> cuts(seq.size() - 1);
  std::iota(cuts.begin(), cuts.end(), 1);
  rng.shuffle(cuts);
  cuts.resize(k - 1);
  std::sort(cuts.begin(), cuts.end());
  std::vector<std::pair<std::size_t, std::size_t>> frags;
  std::size_t start = 0;
  for (std::size_t c : cuts) {
    frags.emplace_back(start, c);
    start = c;
  }
  frags.emplace_back(start, seq.size());
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  do {
    rng.shuffle(order);
  } while (std::is_sorted(order.begin(), order.end()));
  std::vector<Token> toks;
  toks.reserve(seq.size());
  for (std::size_t f : order)
    for (std::size_t i = frags[f].first; i < frags[f].second; ++i) toks.push_back(seq[i]);
  if (log) log->applied.push_back(CorruptionOp::WrongOrder);
  return TokenSeq(std::move(toks));
}

/// Inserts a contiguous phrase (1..distractor_max_len tokens) taken from a random
/// pool entry at the start or a word boundary. `exclude` names a pool index that
/// must not be drawn (the instance's own answer).
inline TokenSeq corrupt_noisy_background(const TokenSeq& seq, std::span<const TokenSeq> pool,
                                         const CorruptionSpec& spec, Rng& rng,
                                         std::size_t exclude = std::numeric_limits<std::size_t>::max(),
                                         CorruptionLog* log = nullptr) {
  spec.validate();
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (i != exclude && !pool[i].empty()) eligible.push_back(i);
  if (eligible.empty()) throw std::invalid_argument("noisy_background: empty distractor pool");
  const TokenSeq& src = pool[eligible[rng.below(eligible.size())]];
  const std::size_t len = 1 + rng.below(std::min(spec.distractor_max_len, src.size()));
  const std::size_t from = rng.below(src.size() - len + 1);
  const std::size_t at = seq.empty() ? 0 : rng.below(seq.size());
  std::vector<Token> toks(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(at));
  for (std::size_t i = from; i < from + len; ++i) toks.push_back({src[i].surface, kUnk});
  toks.insert(toks.end(), seq.begin() + static_cast<std::ptrdiff_t>(at), seq.end());
  if (log) log->applied.push_back(CorruptionOp::NoisyBackground);
  return TokenSeq(std::move(toks));
}

/// Fires each enabled operator independently with op_probability (at least one is
/// forced), applied in the order noisy_background, wrong_order, wrong_word.
inline TokenSeq corrupt_composite(const TokenSeq& seq, std::span<const TokenSeq> pool, const CorruptionSpec& spec,
                                  Rng& rng, std::size_t exclude = std::numeric_limits<std::size_t>::max(),
                                  CorruptionLog* log = nullptr) {
  spec.validate();
  static constexpr CorruptionOp kOrder[] = {CorruptionOp::NoisyBackground, CorruptionOp::WrongOrder,
                                            CorruptionOp::WrongWord};
  std::vector<CorruptionOp> enabled;
  for (auto op : kOrder)
    if (spec.operators.count(op)) enabled.push_back(op);
  if (enabled.empty()) throw std::invalid_argument("corrupt_composite: no operators enabled");
  std::vector<bool> fire(enabled.size());
  bool any = false;
  for (std::size_t i = 0; i < enabled.size(); ++i) {
    fire[i] = rng.bernoulli(spec.op_probability);
    any = any || fire[i];
  }
  if (!any) fire[rng.below(enabled.size())] = true;

  TokenSeq out = seq;
  for (std::size_t i = 0; i < enabled.size(); ++i) {
    if (!fire[i]) continue;
    switch (enabled[i]) {
      case CorruptionOp::NoisyBackground:
        out = corrupt_noisy_background(out, pool, spec, rng, exclude, log);
        break;
      case CorruptionOp::WrongOrder:
        out = corrupt_wrong_order(out, spec, rng, log);
        break;
      case CorruptionOp::WrongWord: {
        // A fired misspelling pass always touches at least one word.
        CorruptionSpec forced = spec;
        TokenSeq cand = corrupt_wrong_word(out, forced, rng, nullptr);
        if (cand == out) {
          forced.wrong_word_rate = 1.0;
          TokenSeq one = out;
          std::vector<std::size_t> alpha;
          for (std::size_t k = 0; k < out.size(); ++k)
            if (detail::is_alpha_word(out[k].surface)) alpha.push_back(k);
          if (!alpha.empty()) {
            const std::size_t k = alpha[rng.below(alpha.size())];
            TokenSeq single = TokenSeq::from_words({out[k].surface});
            one[k] = corrupt_wrong_word(single, forced, rng, nullptr)[0];
          }
          cand = std::move(one);
        }
        if (log && !(cand == out)) log->applied.push_back(CorruptionOp::WrongWord);
        out = std::move(cand);
        break;
      }
    }
  }
  return out;
}

}  // namespace qrefine
