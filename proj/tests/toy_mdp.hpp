#pragma once
// Two-step, three-action tabular MDP used to check policy-gradient estimators
// against exact enumeration. State 0 is the start; action a moves to state 1 + a.

#include <array>
#include <cmath>

#include "qrefine/rl.hpp"

namespace toy {

using qrefine::real;
using qrefine::Rng;
using qrefine::Tape;
using qrefine::Var;

constexpr std::size_t kActions = 3;

struct Mdp {
  qrefine::nn::Parameter theta{"theta", {1 + kActions, kActions}};
  std::array<real, kActions> r1{0.5, -0.2, 0.1};
  std::array<std::array<real, kActions>, kActions> r2{{{1.0, 0.0, -1.0}, {0.3, 2.0, 0.0}, {-0.5, 0.2, 1.5}}};

  explicit Mdp(std::uint64_t seed) {
    Rng rng(seed);
    theta.init_uniform(rng, 1.0);
  }

  static std::array<real, kActions> softmax(const real* row) {
    std::array<real, kActions> p{};
    real m = row[0], z = 0;
    for (std::size_t k = 1; k < kActions; ++k) m = std::max(m, row[k]);
    for (std::size_t k = 0; k < kActions; ++k) z += p[k] = std::exp(row[k] - m);
    for (auto& x : p) x /= z;
    return p;
  }
  std::array<real, kActions> probs(std::size_t state, const std::vector<real>& th) const {
    return softmax(th.data() + state * kActions);
  }
  std::vector<real> values() const { return {theta.values().begin(), theta.values().end()}; }

  /// Expected undiscounted return by enumeration of the 9 trajectories.
  real objective(const std::vector<real>& th) const {
    real j = 0;
    const auto p0 = probs(0, th);
    for (std::size_t a = 0; a < kActions; ++a) {
      const auto p1 = probs(1 + a, th);
      for (std::size_t b = 0; b < kActions; ++b) j += p0[a] * p1[b] * (r1[a] + r2[a][b]);
    }
    return j;
  }

  /// Central-difference gradient of the exact objective.
  std::vector<real> exact_gradient() const {
    auto th = values();
    std::vector<real> g(th.size());
    const real h = 1e-5;
    for (std::size_t i = 0; i < th.size(); ++i) {
      auto up = th, dn = th;
      up[i] += h;
      dn[i] -= h;
      g[i] = (objective(up) - objective(dn)) / (2 * h);
    }
    return g;
  }

  /// Accumulates into theta.grad the gradient of the REINFORCE loss for one
  /// trajectory, scaled by `weight`.
  void accumulate(std::size_t a, std::size_t b, real baseline, real weight) {
    Tape t;
    std::vector<Var> dists{t.softmax(t.lookup(theta, 0)), t.softmax(t.lookup(theta, 1 + a))};
    std::vector<qrefine::TokenId> actions{static_cast<qrefine::TokenId>(a), static_cast<qrefine::TokenId>(b)};
    const std::vector<real> returns{r1[a] + r2[a][b], r2[a][b]};
    Var loss = qrefine::reinforce_objective(t, dists, actions, returns, baseline, 0.0);
    t.backward(t.scale(loss, weight));
  }

  /// Exact expectation of the REINFORCE estimator (sign flipped to ascent).
  std::vector<real> expected_estimator(real baseline) {
    theta.zero_grad();
    const auto th = values();
    const auto p0 = probs(0, th);
    for (std::size_t a = 0; a < kActions; ++a) {
      const auto p1 = probs(1 + a, th);
      for (std::size_t b = 0; b < kActions; ++b) accumulate(a, b, baseline, p0[a] * p1[b]);
    }
    std::vector<real> g;
    for (real x : theta.grad()) g.push_back(-x);
    return g;
  }

  /// Monte Carlo REINFORCE estimate from n sampled trajectories.
  std::vector<real> sampled_estimator(std::size_t n, real baseline, Rng& rng) {
    theta.zero_grad();
    const auto th = values();
    for (std::size_t i = 0; i < n; ++i) {
      const auto p0 = probs(0, th);
      const std::size_t a = rng.categorical(p0);
      const std::size_t b = rng.categorical(probs(1 + a, th));
      accumulate(a, b, baseline, 1.0 / static_cast<real>(n));
    }
    std::vector<real> g;
    for (real x : theta.grad()) g.push_back(-x);
    return g;
  }
};

inline real cosine(const std::vector<real>& a, const std::vector<real>& b) {
  real ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace toy
