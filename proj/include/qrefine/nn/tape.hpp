#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrefine/nn/tensor.hpp"

namespace qrefine::nn {

/// Floor applied to probabilities before taking a logarithm.
inline constexpr real kProbFloor = 1e-9;

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::size_t size() const { return shape().size(); }
  std::span<const real> value() const;
  real scalar() const;
  /// Gradient after Tape::backward; empty for nodes that do not need one.
  std::span<const real> grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Records operations in execution order; backward walks them once in reverse.
/// Confined to one thread. Parameter gradients accumulate straight into the
/// Parameter's own buffer, so independent tapes must not share parameters
/// across threads during backward.
class Tape {
 public:
  enum class Op : std::uint8_t {
    Leaf, Param, Lookup, Add, Sub, Mul, Scale, Neg, MatMul, Affine, Tanh, Sigmoid, Exp, Log,
    Relu, Square, Softmax, Pick, Slice, Concat, StackRows, Transpose, Sum, Dot, CrossEntropy,
    Entropy, Lstm, PpoClip
  };

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // ---- leaves ----
  Var input(Tensor t) {
    Node n;
    n.op = Op::Leaf;
    n.shape = t.shape();
    n.value.assign(t.values().begin(), t.values().end());
    return push(std::move(n));
  }
  Var input(std::vector<real> v) { return input(Tensor::column(std::move(v))); }
  Var input(std::span<const real> v) { return input(std::vector<real>(v.begin(), v.end())); }
  Var scalar(real v) { return input(std::vector<real>{v}); }

  Var param(Parameter& p) {
    Node n;
    n.op = Op::Param;
    n.shape = p.shape();
    n.param = &p;
    n.needs_grad = !p.frozen();
    return push(std::move(n));
  }

  /// Row `row` of a 2-d table as a column vector.
  Var lookup(Parameter& table, std::size_t row) {
    if (row >= table.shape().rows)
      throw std::out_of_range("lookup: row " + std::to_string(row) + " outside table " +
                              to_string(table.shape()));
    Node n;
    n.op = Op::Lookup;
    n.shape = {table.shape().cols, 1};
    n.param = &table;
    n.index = row;
    n.needs_grad = !table.frozen();
    auto src = table.values().subspan(row * table.shape().cols, table.shape().cols);
    n.value.assign(src.begin(), src.end());
    return push(std::move(n));
  }

  // ---- elementwise ----
  Var add(Var a, Var b) {
    check_same_shape("add", shape(a), shape(b));
    Node n = unary_like(Op::Add, a);
    n.in = {a.id(), b.id()};
    n.needs_grad = needs(a) || needs(b);
    auto x = data(a), y = data(b);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = x[i] + y[i];
    return push(std::move(n));
  }
  Var sub(Var a, Var b) {
    check_same_shape("sub", shape(a), shape(b));
    Node n = unary_like(Op::Sub, a);
    n.in = {a.id(), b.id()};
    n.needs_grad = needs(a) || needs(b);
    auto x = data(a), y = data(b);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = x[i] - y[i];
    return push(std::move(n));
  }
  Var mul(Var a, Var b) {
    check_same_shape("mul", shape(a), shape(b));
    Node n = unary_like(Op::Mul, a);
    n.in = {a.id(), b.id()};
    n.needs_grad = needs(a) || needs(b);
    auto x = data(a), y = data(b);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = x[i] * y[i];
    return push(std::move(n));
  }
  Var scale(Var a, real s) {
    Node n = unary_like(Op::Scale, a);
    n.constant = s;
    auto x = data(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = s * x[i];
    return push(std::move(n));
  }
  Var neg(Var a) {
    Node n = unary_like(Op::Neg, a);
    auto x = data(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = -x[i];
    return push(std::move(n));
  }
  Var tanh(Var a) {
    Node n = unary_like(Op::Tanh, a);
    auto x = data(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::tanh(x[i]);
    return push(std::move(n));
  }
  Var sigmoid(Var a) {
    Node n = unary_like(Op::Sigmoid, a);
    auto x = data(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = logistic(x[i]);
    return push(std::move(n));
  }
  Var exp(Var a) {
    Node n = unary_like(Op::Exp, a);
    auto x = data(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::exp(x[i]);
    return push(std::move(n));
  }
  /// Natural log of max(x, kProbFloor).
  Var log(Var a) {
    Node n = unary_like(Op::Log, a);
    auto x = data(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::log(std::max(x[i], kProbFloor));
    return push(std::move(n));
  }
  Var relu(Var a) {
    Node n = unary_like(Op::Relu, a);
    auto x = data(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = x[i] > 0.0 ? x[i] : 0.0;
    return push(std::move(n));
  }
  Var square(Var a) {
    Node n = unary_like(Op::Square, a);
    auto x = data(a);
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = x[i] * x[i];
    return push(std::move(n));
  }

  // ---- linear algebra ----
  Var matmul(Var a, Var b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa.cols != sb.rows)
      throw ShapeError("matmul: shape mismatch " + to_string(sa) + " vs " + to_string(sb));
    Node n;
    n.op = Op::MatMul;
    n.shape = {sa.rows, sb.cols};
    n.in = {a.id(), b.id()};
    n.needs_grad = needs(a) || needs(b);
    n.value.resize(n.shape.size());
    out_map(n) = cmat(a) * cmat(b);
    return push(std::move(n));
  }

  /// w * x + b for a column vector x.
  Var affine(Var w, Var x, Var b) {
    const Shape sw = shape(w), sx = shape(x), sb = shape(b);
    if (sx.cols != 1 || sw.cols != sx.rows)
      throw ShapeError("affine: shape mismatch " + to_string(sw) + " vs " + to_string(sx));
    check_same_shape("affine(bias)", sb, Shape{sw.rows, 1});
    Node n;
    n.op = Op::Affine;
    n.shape = {sw.rows, 1};
    n.in = {w.id(), x.id(), b.id()};
    n.needs_grad = needs(w) || needs(x) || needs(b);
    n.value.resize(sw.rows);
    out_map(n) = cmat(w) * cmat(x) + cmat(b);
    return push(std::move(n));
  }

  Var transpose(Var a) {
    const Shape s = shape(a);
    Node n;
    n.op = Op::Transpose;
    n.shape = {s.cols, s.rows};
    n.in = {a.id()};
    n.needs_grad = needs(a);
    n.value.resize(s.size());
    out_map(n) = cmat(a).transpose();
    return push(std::move(n));
  }

  /// Softmax along `axis`: 0 normalizes each column, 1 normalizes each row.
  Var softmax(Var a, int axis = 0) {
    if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
    Node n = unary_like(Op::Softmax, a);
    n.index = static_cast<std::size_t>(axis);
    auto x = data(a);
    for_each_lane(n.shape, axis, [&](std::size_t start, std::size_t stride, std::size_t len) {
      real mx = -INFINITY;
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[start + k * stride]);
      real z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        real e = std::exp(x[start + k * stride] - mx);
        n.value[start + k * stride] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) n.value[start + k * stride] /= z;
    });
    return push(std::move(n));
  }

  // ---- structure ----
  Var pick(Var a, std::size_t i) {
    if (i >= size(a)) throw std::out_of_range("pick: index " + std::to_string(i) + " outside " + to_string(shape(a)));
    Node n;
    n.op = Op::Pick;
    n.shape = {1, 1};
    n.in = {a.id()};
    n.index = i;
    n.needs_grad = needs(a);
    n.value = {data(a)[i]};
    return push(std::move(n));
  }

  /// Elements [begin, begin+len) of a column vector.
  Var slice(Var a, std::size_t begin, std::size_t len) {
    const Shape s = shape(a);
    if (s.cols != 1 || begin + len > s.rows)
      throw ShapeError("slice: [" + std::to_string(begin) + "," + std::to_string(begin + len) +
                       ") outside " + to_string(s));
    Node n;
    n.op = Op::Slice;
    n.shape = {len, 1};
    n.in = {a.id()};
    n.index = begin;
    n.needs_grad = needs(a);
    auto x = data(a);
    n.value.assign(x.begin() + begin, x.begin() + begin + len);
    return push(std::move(n));
  }

  /// Vertical concatenation of column vectors.
  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Node n;
    n.op = Op::Concat;
    std::size_t rows = 0;
    for (const auto& p : parts) {
      if (shape(p).cols != 1) throw ShapeError("concat: expected column vectors, got " + to_string(shape(p)));
      rows += shape(p).rows;
      n.many.push_back(p.id());
      n.needs_grad = n.needs_grad || needs(p);
    }
    n.shape = {rows, 1};
    n.value.reserve(rows);
    for (const auto& p : parts) {
      auto x = data(p);
      n.value.insert(n.value.end(), x.begin(), x.end());
    }
    return push(std::move(n));
  }
  Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

  /// Stacks N column vectors of length d into an N x d matrix.
  Var stack_rows(std::span<const Var> rows) {
    if (rows.empty()) throw ShapeError("stack_rows: no inputs");
    const Shape s0 = shape(rows[0]);
    Node n;
    n.op = Op::StackRows;
    n.shape = {rows.size(), s0.rows};
    n.value.reserve(n.shape.size());
    for (const auto& r : rows) {
      check_same_shape("stack_rows", shape(r), s0);
      n.many.push_back(r.id());
      n.needs_grad = n.needs_grad || needs(r);
      auto x = data(r);
      n.value.insert(n.value.end(), x.begin(), x.end());
    }
    return push(std::move(n));
  }

  // ---- reductions ----
  Var sum(Var a) {
    Node n;
    n.op = Op::Sum;
    n.shape = {1, 1};
    n.in = {a.id()};
    n.needs_grad = needs(a);
    real s = 0.0;
    for (real v : data(a)) s += v;
    n.value = {s};
    return push(std::move(n));
  }
  Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<real>(size(a))); }
  Var dot(Var a, Var b) {
    check_same_shape("dot", shape(a), shape(b));
    Node n;
    n.op = Op::Dot;
    n.shape = {1, 1};
    n.in = {a.id(), b.id()};
    n.needs_grad = needs(a) || needs(b);
    auto x = data(a), y = data(b);
    real s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    n.value = {s};
    return push(std::move(n));
  }
  /// Sum of a list of scalars (or same-shape tensors).
  Var add_all(std::span<const Var> xs) {
    if (xs.empty()) return scalar(0.0);
    Var acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
  }

  // ---- fused losses ----
  /// -log(max(dist[target], kProbFloor)) for a probability vector.
  Var cross_entropy(Var dist, std::size_t target) {
    if (target >= size(dist))
      throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " outside " +
                              to_string(shape(dist)));
    Node n;
    n.op = Op::CrossEntropy;
    n.shape = {1, 1};
    n.in = {dist.id()};
    n.index = target;
    n.needs_grad = needs(dist);
    n.value = {-std::log(std::max(data(dist)[target], kProbFloor))};
    return push(std::move(n));
  }

  /// Shannon entropy -sum p log p of a probability vector.
  Var entropy(Var dist) {
    Node n;
    n.op = Op::Entropy;
    n.shape = {1, 1};
    n.in = {dist.id()};
    n.needs_grad = needs(dist);
    real h = 0.0;
    for (real p : data(dist))
      if (p > 0.0) h -= p * std::log(std::max(p, kProbFloor));
    n.value = {h};
    return push(std::move(n));
  }

  /// Clipped surrogate min(r*A, clip(r, 1-eps, 1+eps)*A) with r = exp(logp - logp_old).
  Var ppo_clip(Var logp, real logp_old, real advantage, real eps) {
    if (size(logp) != 1) throw ShapeError("ppo_clip: expected scalar log-probability");
    Node n;
    n.op = Op::PpoClip;
    n.shape = {1, 1};
    n.in = {logp.id()};
    n.needs_grad = needs(logp);
    const real ratio = std::exp(data(logp)[0] - logp_old);
    const real unclipped = ratio * advantage;
    const real clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage;
    n.value = {std::min(unclipped, clipped)};
    // d/dlogp of the active branch: ratio*A when unclipped wins (ties included), else 0.
    n.cache = {unclipped <= clipped ? ratio * advantage : 0.0};
    return push(std::move(n));
  }

  /// Fused LSTM cell. Returns the column [h; c] of length 2d.
  /// gates = w * [x; h_prev] + b, laid out as (input, forget, output, candidate).
  Var lstm(Var x, Var h_prev, Var c_prev, Var w, Var b) {
    const std::size_t d = shape(h_prev).rows;
    const std::size_t in = shape(x).rows;
    if (shape(x).cols != 1 || shape(h_prev).cols != 1 || !(shape(c_prev) == shape(h_prev)))
      throw ShapeError("lstm: state shapes " + to_string(shape(h_prev)) + " vs " + to_string(shape(c_prev)));
    if (!(shape(w) == Shape{4 * d, in + d}))
      throw ShapeError("lstm: weight shape " + to_string(shape(w)) + " vs expected " +
                       to_string(Shape{4 * d, in + d}));
    check_same_shape("lstm(bias)", shape(b), Shape{4 * d, 1});
    Node n;
    n.op = Op::Lstm;
    n.shape = {2 * d, 1};
    n.many = {x.id(), h_prev.id(), c_prev.id(), w.id(), b.id()};
    n.needs_grad = needs(x) || needs(h_prev) || needs(c_prev) || needs(w) || needs(b);
    // cache layout: [x; h_prev] (in+d) | gates i f o g (4d) | tanh(c) (d)
    n.cache.resize(in + d + 5 * d);
    auto xs = data(x), hs = data(h_prev), cs = data(c_prev);
    std::copy(xs.begin(), xs.end(), n.cache.begin());
    std::copy(hs.begin(), hs.end(), n.cache.begin() + in);
    Eigen::Map<const Eigen::VectorXd> xh(n.cache.data(), in + d);
    Eigen::Map<Eigen::VectorXd> gates(n.cache.data() + in + d, 4 * d);
    gates = cmat(w) * xh + cmat(b);
    real* g = n.cache.data() + in + d;
    real* tc = g + 4 * d;
    n.value.resize(2 * d);
    for (std::size_t k = 0; k < d; ++k) {
      const real ig = logistic(g[k]);
      const real fg = logistic(g[d + k]);
      const real og = logistic(g[2 * d + k]);
      const real cand = std::tanh(g[3 * d + k]);
      g[k] = ig;
      g[d + k] = fg;
      g[2 * d + k] = og;
      g[3 * d + k] = cand;
      const real c = fg * cs[k] + ig * cand;
      tc[k] = std::tanh(c);
      n.value[k] = og * tc[k];
      n.value[d + k] = c;
    }
    return push(std::move(n));
  }

  // ---- access ----
  const Shape& shape(Var v) const { return nodes_[v.id()].shape; }
  std::size_t size(Var v) const { return nodes_[v.id()].shape.size(); }
  std::span<const real> data(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.op == Op::Param) return n.param->values();
    return n.value;
  }
  std::span<const real> grad(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.op == Op::Param) return n.param->grad();
    return n.grad;
  }
  bool needs(Var v) const { return nodes_[v.id()].needs_grad; }

  /// Reverse-mode sweep from a scalar. Parameter gradients accumulate.
  void backward(Var loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: variable from another tape");
    if (size(loss) != 1) throw ShapeError("backward: loss must be scalar, got " + to_string(shape(loss)));
    for (std::size_t i = 0; i <= loss.id(); ++i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.op != Op::Param) n.grad.assign(n.shape.size(), 0.0);
    }
    if (!nodes_[loss.id()].needs_grad) return;
    nodes_[loss.id()].grad[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad) continue;
      propagate(n);
    }
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    Shape shape;
    std::vector<real> value;
    std::vector<real> grad;
    std::array<std::uint32_t, 3> in{};
    std::vector<std::uint32_t> many;
    Parameter* param = nullptr;
    std::size_t index = 0;
    real constant = 0.0;
    std::vector<real> cache;
    bool needs_grad = false;
  };

  using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const RowMat>;
  using MMap = Eigen::Map<RowMat>;

  static real logistic(real x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const real e = std::exp(x);
    return e / (1.0 + e);
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  Node unary_like(Op op, Var a) const {
    Node n;
    n.op = op;
    n.shape = shape(a);
    n.in = {a.id()};
    n.needs_grad = needs(a);
    n.value.resize(n.shape.size());
    return n;
  }

  CMap cmat(Var v) const {
    const Shape s = shape(v);
    return CMap(data(v).data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
  }
  static MMap out_map(Node& n) {
    return MMap(n.value.data(), static_cast<Eigen::Index>(n.shape.rows), static_cast<Eigen::Index>(n.shape.cols));
  }

  /// Gradient sink for node `id`, or nullptr when it takes no gradient.
  real* sink(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return nullptr;
    if (n.op == Op::Param) return n.param->grad().data();
    return n.grad.data();
  }
  MMap sink_map(std::uint32_t id) {
    const Shape s = nodes_[id].shape;
    return MMap(sink(id), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
  }
  CMap value_map(std::uint32_t id) const { return cmat(Var(const_cast<Tape*>(this), id)); }

  template <typename F>
  static void for_each_lane(const Shape& s, int axis, F&& f) {
    if (axis == 0) {
      for (std::size_t c = 0; c < s.cols; ++c) f(c, s.cols, s.rows);
    } else {
      for (std::size_t r = 0; r < s.rows; ++r) f(r * s.cols, 1, s.cols);
    }
  }

  void propagate(Node& n) {
    const std::vector<real>& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
      case Op::Param:
        return;
      case Op::Lookup: {
        if (n.param->frozen()) return;
        real* dst = n.param->grad().data() + n.index * n.shape.rows;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        return;
      }
      case Op::Add: {
        for (int k = 0; k < 2; ++k)
          if (real* d = sink(n.in[k]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        return;
      }
      case Op::Sub: {
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        if (real* d = sink(n.in[1]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
        return;
      }
      case Op::Mul: {
        auto x = data(Var(this, n.in[0])), y = data(Var(this, n.in[1]));
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
        if (real* d = sink(n.in[1]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
        return;
      }
      case Op::Scale: {
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += n.constant * g[i];
        return;
      }
      case Op::Neg: {
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
        return;
      }
      case Op::Tanh: {
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
        return;
      }
      case Op::Sigmoid: {
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
        return;
      }
      case Op::Exp: {
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.value[i];
        return;
      }
      case Op::Log: {
        auto x = data(Var(this, n.in[0]));
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > kProbFloor) d[i] += g[i] / x[i];
        return;
      }
      case Op::Relu: {
        auto x = data(Var(this, n.in[0]));
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) d[i] += g[i];
        return;
      }
      case Op::Square: {
        auto x = data(Var(this, n.in[0]));
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += 2.0 * x[i] * g[i];
        return;
      }
      case Op::MatMul: {
        const CMap gm(g.data(), static_cast<Eigen::Index>(n.shape.rows), static_cast<Eigen::Index>(n.shape.cols));
        if (sink(n.in[0])) sink_map(n.in[0]).noalias() += gm * value_map(n.in[1]).transpose();
        if (sink(n.in[1])) sink_map(n.in[1]).noalias() += value_map(n.in[0]).transpose() * gm;
        return;
      }
      case Op::Affine: {
        const CMap gm(g.data(), static_cast<Eigen::Index>(n.shape.rows), 1);
        if (sink(n.in[0])) sink_map(n.in[0]).noalias() += gm * value_map(n.in[1]).transpose();
        if (sink(n.in[1])) sink_map(n.in[1]).noalias() += value_map(n.in[0]).transpose() * gm;
        if (real* d = sink(n.in[2]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        return;
      }
      case Op::Transpose: {
        if (sink(n.in[0])) {
          const CMap gm(g.data(), static_cast<Eigen::Index>(n.shape.rows), static_cast<Eigen::Index>(n.shape.cols));
          sink_map(n.in[0]) += gm.transpose();
        }
        return;
      }
      case Op::Softmax: {
        real* d = sink(n.in[0]);
        if (!d) return;
        for_each_lane(n.shape, static_cast<int>(n.index), [&](std::size_t start, std::size_t stride, std::size_t len) {
          real gp = 0.0;
          for (std::size_t k = 0; k < len; ++k) gp += g[start + k * stride] * n.value[start + k * stride];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = start + k * stride;
            d[i] += n.value[i] * (g[i] - gp);
          }
        });
        return;
      }
      case Op::Pick: {
        if (real* d = sink(n.in[0])) d[n.index] += g[0];
        return;
      }
      case Op::Slice: {
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < g.size(); ++i) d[n.index + i] += g[i];
        return;
      }
      case Op::Concat:
      case Op::StackRows: {
        std::size_t off = 0;
        for (auto id : n.many) {
          const std::size_t len = nodes_[id].shape.size();
          if (real* d = sink(id))
            for (std::size_t i = 0; i < len; ++i) d[i] += g[off + i];
          off += len;
        }
        return;
      }
      case Op::Sum: {
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0, e = nodes_[n.in[0]].shape.size(); i < e; ++i) d[i] += g[0];
        return;
      }
      case Op::Dot: {
        auto x = data(Var(this, n.in[0])), y = data(Var(this, n.in[1]));
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < x.size(); ++i) d[i] += g[0] * y[i];
        if (real* d = sink(n.in[1]))
          for (std::size_t i = 0; i < x.size(); ++i) d[i] += g[0] * x[i];
        return;
      }
      case Op::CrossEntropy: {
        const real p = data(Var(this, n.in[0]))[n.index];
        if (real* d = sink(n.in[0]); d && p > kProbFloor) d[n.index] -= g[0] / p;
        return;
      }
      case Op::Entropy: {
        auto p = data(Var(this, n.in[0]));
        if (real* d = sink(n.in[0]))
          for (std::size_t i = 0; i < p.size(); ++i)
            if (p[i] > 0.0) d[i] -= g[0] * (std::log(std::max(p[i], kProbFloor)) + 1.0);
        return;
      }
      case Op::PpoClip: {
        if (real* d = sink(n.in[0])) d[0] += g[0] * n.cache[0];
        return;
      }
      case Op::Lstm:
        propagate_lstm(n);
        return;
    }
  }

  void propagate_lstm(Node& n) {
    const std::uint32_t xid = n.many[0], hid = n.many[1], cid = n.many[2], wid = n.many[3], bid = n.many[4];
    const std::size_t d = n.shape.rows / 2;
    const std::size_t in = nodes_[xid].shape.rows;
    const real* xh = n.cache.data();
    const real* gates = xh + in + d;
    const real* tc = gates + 4 * d;
    auto c_prev = data(Var(this, cid));
    const std::vector<real>& g = n.grad;
    std::vector<real> dpre(4 * d);
    std::vector<real> dc_prev(d);
    for (std::size_t k = 0; k < d; ++k) {
      const real ig = gates[k], fg = gates[d + k], og = gates[2 * d + k], cand = gates[3 * d + k];
      const real dh = g[k];
      const real dc = g[d + k] + dh * og * (1.0 - tc[k] * tc[k]);
      dpre[k] = dc * cand * ig * (1.0 - ig);
      dpre[d + k] = dc * c_prev[k] * fg * (1.0 - fg);
      dpre[2 * d + k] = dh * tc[k] * og * (1.0 - og);
      dpre[3 * d + k] = dc * ig * (1.0 - cand * cand);
      dc_prev[k] = dc * fg;
    }
    Eigen::Map<const Eigen::VectorXd> dp(dpre.data(), static_cast<Eigen::Index>(4 * d));
    Eigen::Map<const Eigen::RowVectorXd> xh_row(xh, static_cast<Eigen::Index>(in + d));
    if (sink(wid)) sink_map(wid).noalias() += dp * xh_row;
    if (real* db = sink(bid))
      for (std::size_t k = 0; k < 4 * d; ++k) db[k] += dpre[k];
    if (real* dc = sink(cid))
      for (std::size_t k = 0; k < d; ++k) dc[k] += dc_prev[k];
    real* dx = sink(xid);
    real* dh = sink(hid);
    if (dx || dh) {
      Eigen::VectorXd dxh = value_map(wid).transpose() * dp;
      if (dx)
        for (std::size_t k = 0; k < in; ++k) dx[k] += dxh[static_cast<Eigen::Index>(k)];
      if (dh)
        for (std::size_t k = 0; k < d; ++k) dh[k] += dxh[static_cast<Eigen::Index>(in + k)];
    }
  }

  std::vector<Node> nodes_;
};

inline const Shape& Var::shape() const { return tape_->shape(*this); }
inline std::span<const real> Var::value() const { return tape_->data(*this); }
inline real Var::scalar() const {
  if (size() != 1) throw ShapeError("Var::scalar on shape " + to_string(shape()));
  return value()[0];
}
inline std::span<const real> Var::grad() const { return tape_->grad(*this); }

// Free-function spellings used by the model code.
inline Var operator+(Var a, Var b) { return a.tape()->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape()->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape()->mul(a, b); }
inline Var operator*(real s, Var a) { return a.tape()->scale(a, s); }
inline Var operator-(Var a) { return a.tape()->neg(a); }
inline Var tanh(Var a) { return a.tape()->tanh(a); }
inline Var sigmoid(Var a) { return a.tape()->sigmoid(a); }
inline Var exp(Var a) { return a.tape()->exp(a); }
inline Var log(Var a) { return a.tape()->log(a); }
inline Var relu(Var a) { return a.tape()->relu(a); }
inline Var square(Var a) { return a.tape()->square(a); }
inline Var softmax(Var a, int axis = 0) { return a.tape()->softmax(a, axis); }
inline Var matmul(Var a, Var b) { return a.tape()->matmul(a, b); }
inline Var affine(Var w, Var x, Var b) { return w.tape()->affine(w, x, b); }
inline Var transpose(Var a) { return a.tape()->transpose(a); }
inline Var pick(Var a, std::size_t i) { return a.tape()->pick(a, i); }
inline Var slice(Var a, std::size_t begin, std::size_t len) { return a.tape()->slice(a, begin, len); }
inline Var sum(Var a) { return a.tape()->sum(a); }
inline Var mean(Var a) { return a.tape()->mean(a); }
inline Var dot(Var a, Var b) { return a.tape()->dot(a, b); }
inline Var cross_entropy(Var dist, std::size_t target) { return dist.tape()->cross_entropy(dist, target); }
inline Var entropy(Var dist) { return dist.tape()->entropy(dist); }

}  // namespace qrefine::nn
