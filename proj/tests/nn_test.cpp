#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "qrefine/nn/checkpoint.hpp"
#include "qrefine/nn/grad_check.hpp"
#include "qrefine/nn/layers.hpp"
#include "qrefine/nn/optim.hpp"

namespace qrefine::nn {
namespace {

std::vector<real> random_vec(Rng& rng, std::size_t n, real scale = 1.0) {
  std::vector<real> v(n);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return v;
}

TEST(TensorOps, SoftmaxOfZerosIsUniform) {
  Tape t;
  auto p = softmax(t.input(std::vector<real>{0.0, 0.0}));
  EXPECT_DOUBLE_EQ(p.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(p.value()[1], 0.5);
}

TEST(TensorOps, SoftmaxSumsToOneAndIsShiftInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = random_vec(rng, 7, 5.0);
    auto shifted = v;
    const real c = rng.uniform(-20, 20);
    for (auto& x : shifted) x += c;
    Tape t;
    auto a = softmax(t.input(v));
    auto b = softmax(t.input(shifted));
    const real s = std::accumulate(a.value().begin(), a.value().end(), 0.0);
    EXPECT_NEAR(s, 1.0, 1e-6);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-12);
  }
}

TEST(TensorOps, SoftmaxRowAxisNormalizesRows) {
  Tape t;
  auto m = t.input(Tensor({2, 3}, {1, 2, 3, 0, 0, 0}));
  auto p = softmax(m, 1);
  EXPECT_NEAR(p.value()[0] + p.value()[1] + p.value()[2], 1.0, 1e-12);
  EXPECT_NEAR(p.value()[3], 1.0 / 3.0, 1e-12);
}

TEST(TensorOps, TanhAtZero) {
  Tape t;
  Parameter dummy("x", {1, 1});
  auto px = t.param(dummy);
  auto y = sum(tanh(px));
  t.backward(y);
  EXPECT_DOUBLE_EQ(y.scalar(), 0.0);
  EXPECT_DOUBLE_EQ(dummy.grad()[0], 1.0);
}

TEST(TensorOps, MatmulMatchesTripleLoop) {
  Rng rng(11);
  Tensor a({3, 4}, random_vec(rng, 12));
  Tensor b({4, 2}, random_vec(rng, 8));
  Tape t;
  auto c = matmul(t.input(a), t.input(b));
  ASSERT_EQ(c.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      real s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.value()[i * 2 + j], s, 1e-6);
    }
}

TEST(TensorOps, ShapeMismatchNamesBothShapes) {
  Tape t;
  auto a = t.input(Tensor({3, 4}));
  auto b = t.input(Tensor({3, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3x4]"), std::string::npos);
    EXPECT_NE(msg.find("[3x2]"), std::string::npos);
  }
  EXPECT_THROW(t.add(a, b), ShapeError);
}

TEST(TensorOps, ConcatAndSlice) {
  Tape t;
  auto a = t.input(std::vector<real>{1, 2});
  auto b = t.input(std::vector<real>{3});
  auto c = t.concat({a, b});
  ASSERT_EQ(c.size(), 3u);
  auto s = slice(c, 1, 2);
  EXPECT_DOUBLE_EQ(s.value()[0], 2);
  EXPECT_DOUBLE_EQ(s.value()[1], 3);
  EXPECT_THROW(slice(c, 2, 2), ShapeError);
}

TEST(CrossEntropy, OneHotGivesZero) {
  Tape t;
  auto d = t.input(std::vector<real>{0, 1, 0});
  EXPECT_DOUBLE_EQ(cross_entropy(d, 1).scalar(), 0.0);
}

TEST(CrossEntropy, UniformGivesLogV) {
  Tape t;
  auto d = t.input(std::vector<real>(4, 0.25));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(cross_entropy(d, k).scalar(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, FloorsZeroProbability) {
  Tape t;
  auto d = t.input(std::vector<real>{1, 0});
  EXPECT_NEAR(cross_entropy(d, 1).scalar(), -std::log(kProbFloor), 1e-9);
}

TEST(CrossEntropy, TargetOutOfRangeThrows) {
  Tape t;
  auto d = t.input(std::vector<real>{0.5, 0.5});
  EXPECT_THROW(cross_entropy(d, 2), std::out_of_range);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  Parameter logits("logits", {10, 1});
  logits.init_uniform(rng, 1.0);
  auto rep = grad_check([&](Tape& t) { return cross_entropy(softmax(t.param(logits)), 3); }, {&logits});
  EXPECT_LT(rep.max_rel_error, 1e-3) << rep.worst_parameter;
}

TEST(Lstm, ZeroWeightsAndInputsGiveZeroState) {
  Rng rng(1);
  LstmCell cell("c", 3, 4, rng);
  cell.w.fill(0.0);
  cell.b.fill(0.0);
  Tape t;
  auto s = cell.step(t, t.input(std::vector<real>(3, 0.0)), cell.zero_state(t));
  for (real v : s.h.value()) EXPECT_DOUBLE_EQ(v, 0.0);
  for (real v : s.c.value()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Lstm, HiddenStateBoundedByOne) {
  Rng rng(2);
  LstmCell cell("c", 3, 5, rng);
  cell.w.init_uniform(rng, 3.0);
  Tape t;
  LstmState s = cell.zero_state(t);
  for (int k = 0; k < 20; ++k) {
    s = cell.step(t, t.input(random_vec(rng, 3, 50.0)), s);
    for (real v : s.h.value()) EXPECT_LE(std::abs(v), 1.0);
  }
}

TEST(Lstm, DimensionMismatchThrows) {
  Rng rng(2);
  LstmCell cell("c", 3, 5, rng);
  Tape t;
  EXPECT_THROW(cell.step(t, t.input(std::vector<real>(4, 0.0)), cell.zero_state(t)), ShapeError);
}

TEST(Lstm, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  LstmCell cell("c", 3, 4, rng);
  cell.w.init_uniform(rng, 0.5);
  Linear out("out", 4, 5, rng);
  auto xs = std::vector<std::vector<real>>{random_vec(rng, 3), random_vec(rng, 3), random_vec(rng, 3)};
  ParameterList ps;
  cell.collect(ps);
  out.collect(ps);
  auto rep = grad_check(
      [&](Tape& t) {
        LstmState s = cell.zero_state(t);
        for (auto& x : xs) s = cell.step(t, t.input(x), s);
        return cross_entropy(softmax(out(t, s.h)), 2);
      },
      ps);
  EXPECT_LT(rep.max_rel_error, 1e-3) << rep.worst_parameter << "[" << rep.worst_index << "]";
}

TEST(BiLstm, EmptySequenceThrows) {
  Rng rng(1);
  BiLstm bi("b", 2, 3, rng);
  Tape t;
  EXPECT_THROW(bi.run(t, {}), std::invalid_argument);
}

TEST(BiLstm, LengthOneBothDirectionsSeeSameInput) {
  Rng rng(4);
  BiLstm bi("b", 2, 3, rng);
  bi.bwd.w = bi.fwd.w;
  bi.bwd.b = bi.fwd.b;
  Tape t;
  std::vector<Var> xs{t.input(std::vector<real>{0.3, -0.2})};
  auto out = bi.run(t, xs);
  ASSERT_EQ(out.states.size(), 1u);
  ASSERT_EQ(out.states[0].size(), 6u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(out.states[0].value()[k], out.states[0].value()[3 + k]);
}

TEST(BiLstm, ReversingInputSwapsHalves) {
  Rng rng(9);
  BiLstm bi("b", 2, 3, rng);
  bi.bwd.w = bi.fwd.w;  // same cell in both directions makes the swap exact
  bi.bwd.b = bi.fwd.b;
  auto a = random_vec(rng, 2), b = random_vec(rng, 2), c = random_vec(rng, 2);
  Tape t;
  std::vector<Var> fwd{t.input(a), t.input(b), t.input(c)};
  std::vector<Var> rev{t.input(c), t.input(b), t.input(a)};
  auto o1 = bi.run(t, fwd);
  auto o2 = bi.run(t, rev);
  ASSERT_EQ(o1.states.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(o1.states[i].value()[k], o2.states[2 - i].value()[3 + k], 1e-12);
      EXPECT_NEAR(o1.states[i].value()[3 + k], o2.states[2 - i].value()[k], 1e-12);
    }
}

// Every differentiable primitive, random shapes, 50 seeds.
TEST(GradCheck, PrimitiveOpsOverFiftySeeds) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(4), m = 2 + rng.below(3);
    Parameter a("a", {n, m}), x("x", {m, 1}), b("b", {n, 1}), y("y", {n, 1});
    a.init_uniform(rng, 1.0);
    x.init_uniform(rng, 1.0);
    b.init_uniform(rng, 1.0);
    y.init_uniform(rng, 1.0);
    ParameterList ps{&a, &x, &b, &y};
    auto rep = grad_check(
        [&](Tape& t) {
          auto pa = t.param(a), px = t.param(x), pb = t.param(b), py = t.param(y);
          auto z = affine(pa, px, pb);
          auto u = tanh(z) * sigmoid(py) + exp(0.3 * py) - square(z);
          auto mm = matmul(transpose(pa), u);  // m x 1
          auto cat = t.concat({slice(u, 0, 2), mm});
          auto rows = t.stack_rows(std::vector<Var>{u, py});
          auto p = softmax(cat);
          auto q = softmax(rows, 1);
          return dot(u, py) + sum(relu(z)) - mean(log(p)) + entropy(p) + sum(matmul(q, pb)) +
                 cross_entropy(p, 0) + pick(u, 1);
        },
        ps);
    EXPECT_LT(rep.max_rel_error, 1e-3) << "seed " << seed << " " << rep.worst_parameter << " a="
                                       << rep.worst_analytic << " n=" << rep.worst_numeric;
  }
}

TEST(GradCheck, LinearFunctionIsExact) {
  Parameter w("w", {3, 1});
  w.values()[0] = 1;
  w.values()[1] = -2;
  w.values()[2] = 0.5;
  auto rep = grad_check([&](Tape& t) { return dot(t.param(w), t.input(std::vector<real>{2, 3, 4})); }, {&w});
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(GradCheck, SignFlipIsDetected) {
  Rng rng(3);
  Parameter w("w", {4, 1});
  w.init_uniform(rng, 1.0);
  GradCheckOptions opt;
  opt.tamper = [](const ParameterList& ps) {
    for (auto* p : ps)
      for (auto& g : p->grad()) g = -g;
  };
  auto rep = grad_check([&](Tape& t) { return sum(square(t.param(w))); }, {&w}, opt);
  EXPECT_GT(rep.max_rel_error, 0.5);
}

TEST(GradCheck, PpoClipGradient) {
  Parameter lp("lp", {1, 1});
  for (real adv : {1.0, -1.0}) {
    for (real v : {-0.5, -0.05, 0.05, 0.5}) {
      lp.values()[0] = v;
      auto rep = grad_check([&](Tape& t) { return t.ppo_clip(t.param(lp), 0.0, adv, 0.2); }, {&lp});
      EXPECT_LT(rep.max_rel_error, 1e-3) << v << " " << adv;
    }
  }
}

TEST(Adam, ZeroGradientIsIdentity) {
  Rng rng(1);
  Parameter w("w", {3, 2});
  w.init_uniform(rng, 1.0);
  std::vector<real> before(w.values().begin(), w.values().end());
  adam_step({&w}, {});
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(w.values()[i], before[i]);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (real scale : {1e-4, 1.0, 1e4}) {
    Parameter w("w", {2, 1});
    w.grad()[0] = scale;
    w.grad()[1] = -3 * scale;
    adam_step({&w}, {});
    EXPECT_NEAR(w.values()[0], -0.001, 1e-6);
    EXPECT_NEAR(w.values()[1], 0.001, 1e-6);
  }
}

TEST(Adam, NonFiniteGradientFailsFast) {
  Parameter w("w", {1, 1});
  w.grad()[0] = std::nan("");
  EXPECT_THROW(adam_step({&w}, {}), NonFiniteGradient);
}

TEST(Adam, QuadraticConvergesIn200Steps) {
  // f(w) = (w0 - 0.3)^2 + 2 (w1 + 0.1)^2 from w = (0, 0); lr 0.01 so 200 steps suffice.
  Parameter w("w", {2, 1});
  AdamConfig cfg;
  cfg.lr = 0.01;
  real loss = 0;
  for (int step = 0; step < 200; ++step) {
    w.zero_grad();
    Tape t;
    auto pw = t.param(w);
    auto target = t.input(std::vector<real>{0.3, -0.1});
    auto diff = pw - target;
    auto l = dot(t.input(std::vector<real>{1.0, 2.0}), square(diff));
    t.backward(l);
    loss = l.scalar();
    adam_step({&w}, cfg);
  }
  EXPECT_LT(loss, 1e-3);
}

TEST(Adam, ClipGradNorm) {
  Parameter w("w", {2, 1});
  w.grad()[0] = 3;
  w.grad()[1] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm({&w}, 1.0), 5.0);
  EXPECT_NEAR(grad_norm({&w}), 1.0, 1e-12);
}

TEST(Checkpoint, RoundTripPreservesValuesAndMeta) {
  Rng rng(8);
  Parameter a("layer.a", {3, 2}), b("layer.b", {2, 1});
  a.init_uniform(rng, 1.0);
  b.init_uniform(rng, 1.0);
  const auto path = (std::filesystem::temp_directory_path() / "qrefine_nn_test.ckpt").string();
  write_checkpoint(path, snapshot({&a, &b}, R"({"k":1})"));
  auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.meta, R"({"k":1})");
  Parameter a2("layer.a", {3, 2}), b2("layer.b", {2, 1});
  restore(ck, {&a2, &b2});
  EXPECT_EQ(checksum({&a, &b}), checksum({&a2, &b2}));
  Parameter wrong("layer.a", {2, 3});
  EXPECT_THROW(restore(ck, {&wrong}), CheckpointError);
  std::remove(path.c_str());
}

}  // namespace
}  // namespace qrefine::nn
