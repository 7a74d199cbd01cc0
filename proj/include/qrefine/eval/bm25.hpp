#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace qrefine::eval {

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

struct Hit {
  std::size_t doc;
  double score;
};

/// Okapi BM25 over pre-tokenized documents. idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1),
/// which stays positive for terms present in every document. Repeated query terms count once.
class Bm25Index {
 public:
  explicit Bm25Index(std::vector<std::vector<std::string>> docs, Bm25Params params = {})
      : docs_(std::move(docs)), params_(params) {
    if (docs_.empty()) throw std::invalid_argument("build_index: empty answer pool");
    tf_.resize(docs_.size());
    double total = 0.0;
    for (std::size_t d = 0; d < docs_.size(); ++d) {
      for (const auto& w : docs_[d]) ++tf_[d][w];
      for (const auto& [w, c] : tf_[d]) ++df_[w];
      total += static_cast<double>(docs_[d].size());
    }
    avgdl_ = total / static_cast<double>(docs_.size());
  }

  std::size_t size() const { return docs_.size(); }
  const std::vector<std::string>& doc(std::size_t i) const { return docs_.at(i); }
  const Bm25Params& params() const { return params_; }
  double avgdl() const { return avgdl_; }

  std::size_t df(const std::string& term) const {
    auto it = df_.find(term);
    return it == df_.end() ? 0 : it->second;
  }

  double idf(const std::string& term) const {
    const double n = static_cast<double>(docs_.size());
    const double d = static_cast<double>(df(term));
    return std::log((n - d + 0.5) / (d + 0.5) + 1.0);
  }

  double score(const std::vector<std::string>& query, std::size_t doc) const {
    const auto& tf = tf_.at(doc);
    const double dl = static_cast<double>(docs_[doc].size());
    const double norm = params_.k1 * (1.0 - params_.b + params_.b * (avgdl_ > 0 ? dl / avgdl_ : 0.0));
    double s = 0.0;
    for (const auto& term : std::set<std::string>(query.begin(), query.end())) {
      auto it = tf.find(term);
      if (it == tf.end()) continue;
      const double f = static_cast<double>(it->second);
      s += idf(term) * f * (params_.k1 + 1.0) / (f + norm);
    }
    return s;
  }

  /// All documents ranked by descending score, ties by lower document id.
  std::vector<Hit> rank(const std::vector<std::string>& query) const {
    std::vector<Hit> hits;
    hits.reserve(docs_.size());
    for (std::size_t d = 0; d < docs_.size(); ++d) hits.push_back({d, score(query, d)});
    std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.score > b.score; });
    return hits;
  }

  std::vector<Hit> search(const std::vector<std::string>& query, std::size_t k) const {
    auto hits = rank(query);
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

  /// 0-based position of `gold` in rank(query).
  std::size_t rank_of(const std::vector<std::string>& query, std::size_t gold) const {
    if (gold >= docs_.size()) throw std::out_of_range("rank_of: unknown document id");
    const double g = score(query, gold);
    std::size_t above = 0;
    for (std::size_t d = 0; d < docs_.size(); ++d) {
      const double s = score(query, d);
      if (s > g || (s == g && d < gold)) ++above;
    }
    return above;
  }

 private:
  std::vector<std::vector<std::string>> docs_;
  Bm25Params params_;
  std::vector<std::unordered_map<std::string, std::size_t>> tf_;
  std::unordered_map<std::string, std::size_t> df_;
  double avgdl_ = 0.0;
};

/// 1 when the gold document is among the top k results.
inline int hits_at_k(const std::vector<std::string>& query, std::size_t gold, const Bm25Index& index, std::size_t k) {
  if (k < 1) throw std::invalid_argument("hits_at_k: k must be >= 1");
  return index.rank_of(query, gold) < k ? 1 : 0;
}

}  // namespace qrefine::eval
