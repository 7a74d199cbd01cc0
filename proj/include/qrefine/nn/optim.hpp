#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "qrefine/nn/tensor.hpp"

namespace qrefine::nn {

struct AdamConfig {
  real lr = 0.001;
  real beta1 = 0.9;
  real beta2 = 0.999;
  real eps = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_finite_grads(const ParameterList& params) {
  for (const auto* p : params) {
    if (p->frozen()) continue;
    auto g = p->grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NonFiniteGradient("non-finite gradient in " + p->name() + "[" + std::to_string(i) + "]");
  }
}

/// Bias-corrected Adam over every non-frozen parameter. Gradients are left in place.
inline void adam_step(const ParameterList& params, const AdamConfig& cfg) {
  require_finite_grads(params);
  for (auto* p : params) {
    if (p->frozen()) continue;
    AdamState& st = p->adam();
    if (st.m.size() != p->size()) {
      st.m.assign(p->size(), 0.0);
      st.v.assign(p->size(), 0.0);
    }
    ++st.step;
    const real c1 = 1.0 - std::pow(cfg.beta1, static_cast<real>(st.step));
    const real c2 = 1.0 - std::pow(cfg.beta2, static_cast<real>(st.step));
    auto w = p->values();
    auto g = p->grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
      st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      w[i] -= cfg.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + cfg.eps);
    }
  }
}

inline real grad_norm(const ParameterList& params) {
  real s = 0.0;
  for (const auto* p : params)
    if (!p->frozen())
      for (real g : p->grad()) s += g * g;
  return std::sqrt(s);
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
inline real clip_grad_norm(const ParameterList& params, real max_norm) {
  const real n = grad_norm(params);
  if (n > max_norm && n > 0.0) {
    const real s = max_norm / n;
    for (auto* p : params)
      if (!p->frozen())
        for (auto& g : p->grad()) g *= s;
  }
  return n;
}

inline void scale_grads(const ParameterList& params, real s) {
  for (auto* p : params)
    for (auto& g : p->grad()) g *= s;
}

}  // namespace qrefine::nn
