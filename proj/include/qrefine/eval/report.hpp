#pragma once

#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "qrefine/eval/bm25.hpp"
#include "qrefine/eval/metrics.hpp"
#include "qrefine/seq2seq.hpp"

namespace qrefine::eval {

inline constexpr std::size_t kHitsK[] = {1, 3, 5, 10};

struct MetricsReport {
  std::string name;
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double rouge_l = 0;
  double hits1 = 0, hits3 = 0, hits5 = 0, hits10 = 0;
  std::size_t count = 0;

  std::vector<double> values() const { return {bleu1, bleu2, bleu3, bleu4, rouge_l, hits1, hits3, hits5, hits10}; }
  static std::vector<std::string> columns() {
    return {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "hits1", "hits3", "hits5", "hits10"};
  }
};

/// Distinct answers as retrieval documents; each triple points at its answer's document.
struct AnswerPool {
  Bm25Index index;
  std::vector<std::size_t> gold;  // per triple

  static AnswerPool build(const std::vector<Triple>& triples) {
    std::map<std::vector<std::string>, std::size_t> ids;
    std::vector<std::vector<std::string>> docs;
    std::vector<std::size_t> gold;
    for (const auto& t : triples) {
      auto words = t.answer.without_eos().words();
      auto [it, added] = ids.emplace(words, docs.size());
      if (added) docs.push_back(words);
      gold.push_back(it->second);
    }
    return {Bm25Index(std::move(docs)), std::move(gold)};
  }
};

/// Scores candidate questions against references and retrieves with them as queries.
/// Sequences are compared as surface words.
inline MetricsReport evaluate_candidates(const std::string& name, const std::vector<std::vector<std::string>>& cands,
                                         const std::vector<std::vector<std::string>>& refs, const AnswerPool* pool) {
  if (cands.size() != refs.size()) throw std::invalid_argument("evaluate: candidate/reference count mismatch");
  MetricsReport r;
  r.name = name;
  r.count = cands.size();
  if (cands.empty()) return r;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    r.bleu1 += bleu(cands[i], refs[i], 1);
    r.bleu2 += bleu(cands[i], refs[i], 2);
    r.bleu3 += bleu(cands[i], refs[i], 3);
    r.bleu4 += bleu(cands[i], refs[i], 4);
    r.rouge_l += rouge_l(cands[i], refs[i]);
    if (pool) {
      const std::size_t rank = pool->index.rank_of(cands[i], pool->gold.at(i));
      r.hits1 += rank < 1;
      r.hits3 += rank < 3;
      r.hits5 += rank < 5;
      r.hits10 += rank < 10;
    }
  }
  const double n = static_cast<double>(cands.size());
  for (double* v : {&r.bleu1, &r.bleu2, &r.bleu3, &r.bleu4, &r.rouge_l, &r.hits1, &r.hits3, &r.hits5, &r.hits10})
    *v /= n;
  return r;
}

inline std::vector<std::string> generate_words(Policy& p, const TokenSeq& x) {
  return p.to_tokens(p.greedy_decode(x)).words();
}

/// Greedy-decodes each ill-formed question and scores it against the well-formed one.
inline MetricsReport evaluate_generation(const std::string& name, Policy& p, const std::vector<Triple>& triples,
                                         const AnswerPool* pool) {
  std::vector<std::vector<std::string>> cands, refs;
  for (const auto& t : triples) {
    cands.push_back(generate_words(p, t.ill));
    refs.push_back(t.well.without_eos().words());
  }
  return evaluate_candidates(name, cands, refs, pool);
}

/// The unrefined input as its own candidate.
inline MetricsReport evaluate_ill_formed(const std::vector<Triple>& triples, const AnswerPool* pool) {
  std::vector<std::vector<std::string>> cands, refs;
  for (const auto& t : triples) {
    cands.push_back(t.ill.without_eos().words());
    refs.push_back(t.well.without_eos().words());
  }
  return evaluate_candidates("ill_formed", cands, refs, pool);
}

/// Mean sentence BLEU-1 of greedy outputs.
inline double bleu1_of(Policy& p, const std::vector<Triple>& triples) {
  if (triples.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : triples) s += bleu(generate_words(p, t.ill), t.well.without_eos().words(), 1);
  return s / static_cast<double>(triples.size());
}

/// CSV with a "system" column followed by the metric columns, values scaled by 100.
inline void write_csv(std::ostream& os, const std::vector<MetricsReport>& rows) {
  os << "system";
  for (const auto& c : MetricsReport::columns()) os << ',' << c;
  os << '\n';
  char buf[32];
  for (const auto& r : rows) {
    os << r.name;
    for (double v : r.values()) {
      std::snprintf(buf, sizeof buf, "%.4f", 100.0 * v);
      os << ',' << buf;
    }
    os << '\n';
  }
}

inline void print_table(std::ostream& os, const std::vector<MetricsReport>& rows) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-18s", "system");
  os << buf;
  for (const auto& c : MetricsReport::columns()) {
    std::snprintf(buf, sizeof buf, "%9s", c.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-18s", r.name.c_str());
    os << buf;
    for (double v : r.values()) {
      std::snprintf(buf, sizeof buf, "%9.2f", 100.0 * v);
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace qrefine::eval
