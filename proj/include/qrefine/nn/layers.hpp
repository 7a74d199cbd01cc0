#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qrefine/nn/tape.hpp"

namespace qrefine::nn {

/// Uniform range for recurrent and projection weights at initialization.
inline constexpr real kInitScale = 0.08;

/// y = W x + b.
struct Linear {
  Parameter w;
  Parameter b;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : w(name + ".w", {out, in}), b(name + ".b", {out, 1}) {
    w.init_uniform(rng, kInitScale);
  }

  std::size_t in_dim() const { return w.shape().cols; }
  std::size_t out_dim() const { return w.shape().rows; }

  Var operator()(Tape& t, Var x) { return t.affine(t.param(w), x, t.param(b)); }

  void collect(ParameterList& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct LstmState {
  Var h;
  Var c;
};

/// One LSTM layer: gates = W [x; h] + b with (input, forget, output, candidate)
/// blocks. Forget-gate bias starts at 1.
struct LstmCell {
  Parameter w;
  Parameter b;

  LstmCell() = default;
  LstmCell(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
      : w(name + ".w", {4 * hidden, in + hidden}), b(name + ".b", {4 * hidden, 1}) {
    w.init_uniform(rng, kInitScale);
    for (std::size_t k = hidden; k < 2 * hidden; ++k) b.values()[k] = 1.0;
  }

  std::size_t in_dim() const { return w.shape().cols - hidden(); }
  std::size_t hidden() const { return w.shape().rows / 4; }

  LstmState zero_state(Tape& t) const {
    return {t.input(std::vector<real>(hidden(), 0.0)), t.input(std::vector<real>(hidden(), 0.0))};
  }

  LstmState step(Tape& t, Var x, const LstmState& prev) {
    if (x.shape().rows != in_dim())
      throw ShapeError("lstm_cell: input " + to_string(x.shape()) + " vs expected " +
                       to_string(Shape{in_dim(), 1}));
    Var hc = t.lstm(x, prev.h, prev.c, t.param(w), t.param(b));
    return {t.slice(hc, 0, hidden()), t.slice(hc, hidden(), hidden())};
  }

  /// Runs over `xs` in order (or reversed) and returns the per-step hidden states
  /// aligned with the input positions.
  std::vector<Var> run(Tape& t, std::span<const Var> xs, bool reverse = false) {
    std::vector<Var> out(xs.size());
    LstmState s = zero_state(t);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const std::size_t i = reverse ? xs.size() - 1 - k : k;
      s = step(t, xs[i], s);
      out[i] = s.h;
    }
    return out;
  }

  void collect(ParameterList& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

/// Bidirectional LSTM: per position [h_fwd; h_bwd], output dim 2 x hidden.
struct BiLstm {
  LstmCell fwd;
  LstmCell bwd;

  BiLstm() = default;
  BiLstm(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
      : fwd(name + ".fwd", in, hidden, rng), bwd(name + ".bwd", in, hidden, rng) {}

  std::size_t hidden() const { return fwd.hidden(); }
  std::size_t out_dim() const { return 2 * fwd.hidden(); }

  struct Output {
    std::vector<Var> states;  // [h_fwd_n; h_bwd_n] per position
    Var fwd_final;            // forward state after the last input
    Var bwd_final;            // backward state after reading back to the first input
  };

  Output run(Tape& t, std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("bilstm: empty input sequence");
    auto f = fwd.run(t, xs, false);
    auto b = bwd.run(t, xs, true);
    Output o;
    o.states.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) o.states.push_back(t.concat({f[i], b[i]}));
    o.fwd_final = f.back();
    o.bwd_final = b.front();
    return o;
  }

  void collect(ParameterList& out) {
    fwd.collect(out);
    bwd.collect(out);
  }
};

}  // namespace qrefine::nn
