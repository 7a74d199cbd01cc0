#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

namespace qrefine::eval {

template <typename T>
using NGram = std::vector<T>;

/// n-gram -> count for a single order n.
template <typename T>
std::map<NGram<T>, std::size_t> ngram_counts(const std::vector<T>& s, std::size_t n) {
  std::map<NGram<T>, std::size_t> out;
  if (n == 0 || s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[NGram<T>(s.begin() + i, s.begin() + i + n)];
  return out;
}

struct NGramPrecision {
  std::size_t matches = 0;
  std::size_t total = 0;
};

/// Clipped n-gram matches of `cand` against a single reference.
template <typename T>
NGramPrecision modified_precision(const std::vector<T>& cand, const std::vector<T>& ref, std::size_t n) {
  const auto c = ngram_counts(cand, n);
  const auto r = ngram_counts(ref, n);
  NGramPrecision p;
  for (const auto& [g, k] : c) {
    p.total += k;
    auto it = r.find(g);
    if (it != r.end()) p.matches += std::min(k, it->second);
  }
  return p;
}

/// Sentence BLEU-n against one reference: geometric mean of clipped precisions of
/// orders 1..n times the brevity penalty exp(1 - r/c) when c < r. Orders >= 2 with
/// no match are smoothed to (m + 1) / (total + 1); an order-1 miss gives 0.
template <typename T>
double bleu(const std::vector<T>& cand, const std::vector<T>& ref, std::size_t n) {
  if (n < 1 || n > 4) throw std::invalid_argument("bleu: n must be in 1..4");
  if (cand.empty() || ref.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const auto p = modified_precision(cand, ref, k);
    double prec;
    if (p.matches == 0) {
      if (k == 1) return 0.0;
      prec = 1.0 / static_cast<double>(p.total + 1);
    } else {
      prec = static_cast<double>(p.matches) / static_cast<double>(p.total);
    }
    log_sum += std::log(prec);
  }
  const double c = static_cast<double>(cand.size());
  const double r = static_cast<double>(ref.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(n));
}

template <typename T>
std::size_t lcs_length(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

/// LCS-based F-measure (1 + b^2) P R / (R + b^2 P).
template <typename T>
double rouge_l(const std::vector<T>& cand, const std::vector<T>& ref, double beta = kRougeBeta) {
  if (cand.empty() || ref.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(cand, ref));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(cand.size());
  const double r = l / static_cast<double>(ref.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

}  // namespace qrefine::eval
