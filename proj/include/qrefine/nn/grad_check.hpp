#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "qrefine/nn/tape.hpp"

namespace qrefine::nn {

struct GradCheckOptions {
  real step = 1e-4;
  /// Denominator floor for the relative error, so near-zero gradients compare absolutely.
  real floor = 1e-6;
  /// 0 checks every entry; otherwise a random subset of this many entries per parameter.
  std::size_t max_entries_per_parameter = 0;
  std::uint64_t seed = 0;
  /// Applied to the tape gradients before comparison (harness self-tests).
  std::function<void(const ParameterList&)> tamper;
};

struct GradCheckReport {
  real max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  real worst_analytic = 0.0;
  real worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares tape gradients of a scalar network with central finite differences.
/// `build` must be deterministic and return a scalar loss.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& build, const ParameterList& params,
                                  const GradCheckOptions& opt = {}) {
  zero_grads(params);
  {
    Tape t;
    t.backward(build(t));
  }
  if (opt.tamper) opt.tamper(params);
  std::vector<std::vector<real>> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params) analytic.emplace_back(p->grad().begin(), p->grad().end());

  auto eval = [&]() {
    Tape t;
    return build(t).scalar();
  };

  Rng rng(opt.seed);
  GradCheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    if (p->frozen()) continue;
    std::vector<std::size_t> idx(p->size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_entries_per_parameter > 0 && idx.size() > opt.max_entries_per_parameter) {
      rng.shuffle(idx);
      idx.resize(opt.max_entries_per_parameter);
    }
    for (std::size_t i : idx) {
      real& w = p->values()[i];
      const real saved = w;
      w = saved + opt.step;
      const real up = eval();
      w = saved - opt.step;
      const real down = eval();
      w = saved;
      const real numeric = (up - down) / (2.0 * opt.step);
      const real a = analytic[pi][i];
      const real rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_parameter = p->name();
        rep.worst_index = i;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  zero_grads(params);
  return rep;
}

}  // namespace qrefine::nn
