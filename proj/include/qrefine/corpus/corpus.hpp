#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace qrefine {

using TokenId = std::uint32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kSos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kNumReserved = 4;

inline const std::string& reserved_surface(TokenId id) {
  static const std::string names[kNumReserved] = {"<pad>", "<unk>", "<sos>", "<eos>"};
  return names[id];
}

struct Token {
  std::string surface;
  TokenId id = kUnk;

  bool operator==(const Token&) const = default;
};

/// Ordered tokens. At most one EOS, and only in the final position.
class TokenSeq {
 public:
  TokenSeq() = default;
  explicit TokenSeq(std::vector<Token> tokens) : tokens_(std::move(tokens)) { validate(); }

  static TokenSeq from_words(const std::vector<std::string>& words) {
    std::vector<Token> t;
    t.reserve(words.size());
    for (const auto& w : words) t.push_back({w, kUnk});
    return TokenSeq(std::move(t));
  }

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  const Token& operator[](std::size_t i) const { return tokens_[i]; }
  Token& operator[](std::size_t i) { return tokens_[i]; }
  auto begin() const { return tokens_.begin(); }
  auto end() const { return tokens_.end(); }
  auto begin() { return tokens_.begin(); }
  auto end() { return tokens_.end(); }
  const std::vector<Token>& tokens() const { return tokens_; }

  void push_back(Token t) {
    if (!tokens_.empty() && tokens_.back().id == kEos)
      throw std::invalid_argument("TokenSeq: token appended after EOS");
    tokens_.push_back(std::move(t));
  }

  bool ends_with_eos() const { return !tokens_.empty() && tokens_.back().id == kEos; }

  std::vector<TokenId> ids() const {
    std::vector<TokenId> out;
    out.reserve(tokens_.size());
    for (const auto& t : tokens_) out.push_back(t.id);
    return out;
  }
  std::vector<std::string> words() const {
    std::vector<std::string> out;
    out.reserve(tokens_.size());
    for (const auto& t : tokens_) out.push_back(t.surface);
    return out;
  }
  /// Surfaces joined by single spaces, EOS omitted.
  std::string text() const {
    std::string s;
    for (const auto& t : tokens_) {
      if (t.id == kEos) break;
      if (!s.empty()) s += ' ';
      s += t.surface;
    }
    return s;
  }
  /// Copy without a trailing EOS.
  TokenSeq without_eos() const {
    TokenSeq out = *this;
    if (out.ends_with_eos()) out.tokens_.pop_back();
    return out;
  }
  void truncate(std::size_t n) {
    if (tokens_.size() > n) tokens_.resize(n);
  }

  bool operator==(const TokenSeq&) const = default;

 private:
  void validate() const {
    for (std::size_t i = 0; i + 1 < tokens_.size(); ++i)
      if (tokens_[i].id == kEos) throw std::invalid_argument("TokenSeq: EOS before the final position");
  }

  std::vector<Token> tokens_;
};

/// One training instance: ill-formed question x, well-formed question y, answer a.
struct Triple {
  std::string id;
  TokenSeq ill;
  TokenSeq well;
  TokenSeq answer;

  bool operator==(const Triple&) const = default;
};

// ---------------------------------------------------------------------------
// Tokenization

namespace detail {

inline bool is_punct(unsigned char c) { return c < 128 && std::ispunct(c) && c != '\''; }

inline void split_clitics(const std::string& piece, std::vector<std::string>& out) {
  if (piece.empty()) return;
  if (piece.find('\'') == std::string::npos) {
    out.push_back(piece);
    return;
  }
  static const char* const kSuffixes[] = {"'s", "'re", "'ve", "'ll", "'d", "'m"};
  if (piece.size() >= 3 && piece.ends_with("n't")) {
    split_clitics(piece.substr(0, piece.size() - 3), out);
    out.push_back("n't");
    return;
  }
  for (const char* suf : kSuffixes) {
    const std::string_view s(suf);
    if (piece.size() >= s.size() && piece.ends_with(s)) {
      split_clitics(piece.substr(0, piece.size() - s.size()), out);
      out.emplace_back(s);
      return;
    }
  }
  // Stray apostrophes at either end become their own tokens.
  if (piece.front() == '\'') {
    out.push_back("'");
    split_clitics(piece.substr(1), out);
    return;
  }
  if (piece.back() == '\'') {
    split_clitics(piece.substr(0, piece.size() - 1), out);
    out.push_back("'");
    return;
  }
  out.push_back(piece);
}

}  // namespace detail

/// Lowercases, splits on whitespace and punctuation (each mark its own token),
/// and separates the clitics n't 's 're 've 'll 'd 'm. EOS is not appended.
inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    detail::split_clitics(cur, out);
    cur.clear();
  };
  for (unsigned char c : text) {
    if (c < 128 && std::isspace(c)) {
      flush();
    } else if (detail::is_punct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur += static_cast<char>(c < 128 ? std::tolower(c) : c);
    }
  }
  flush();
  return out;
}

inline TokenSeq tokenize(std::string_view text) { return TokenSeq::from_words(tokenize_words(text)); }

inline std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Vocabularies

class VocabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Word <-> id bijection over retained words; ids 0..3 reserved for PAD UNK SOS EOS.
class Vocabulary {
 public:
  Vocabulary() {
    for (TokenId i = 0; i < kNumReserved; ++i) words_.push_back(reserved_surface(i));
  }

  /// Retains words with count >= min_count, ordered by descending count then lexicographically.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences, std::size_t min_count) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : sentences)
      for (const auto& w : s) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [w, c] : counts)
      if (c >= min_count) kept.emplace_back(w, c);
    if (kept.empty())
      throw VocabError("build_vocab: no word reaches min_count=" + std::to_string(min_count));
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    v.min_count_ = min_count;
    for (const auto& [w, c] : kept) v.add(w);
    return v;
  }

  /// Rebuilds from an explicit id-ordered word list (ids >= 4), e.g. from checkpoint metadata.
  static Vocabulary from_words(const std::vector<std::string>& words, std::size_t min_count = 1) {
    Vocabulary v;
    v.min_count_ = min_count;
    for (const auto& w : words) v.add(w);
    return v;
  }

  std::size_t size() const { return words_.size(); }
  std::size_t min_count() const { return min_count_; }

  TokenId id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& w) const { return index_.count(w) > 0; }
  const std::string& word(TokenId id) const {
    if (id >= words_.size()) throw std::out_of_range("Vocabulary::word: id " + std::to_string(id));
    return words_[id];
  }
  /// Retained words in id order (reserved entries excluded).
  std::vector<std::string> retained() const { return {words_.begin() + kNumReserved, words_.end()}; }

  /// Fills token ids in place; unknown surfaces become UNK.
  void encode(TokenSeq& seq) const {
    for (auto& t : seq)
      if (t.id != kEos) t.id = id(t.surface);
  }
  TokenSeq encoded(TokenSeq seq) const {
    encode(seq);
    return seq;
  }
  void encode(Triple& t) const {
    encode(t.ill);
    encode(t.well);
    encode(t.answer);
  }
  TokenSeq decode(const std::vector<TokenId>& ids) const {
    TokenSeq out;
    for (TokenId i : ids) out.push_back({word(i), i});
    return out;
  }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) throw VocabError("Vocabulary: duplicate word " + w);
    index_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t min_count_ = 1;
};

/// Byte-level character inventory; id 0 is the unknown character.
class CharVocabulary {
 public:
  static constexpr std::uint32_t kUnknownChar = 0;

  CharVocabulary() { map_.fill(kUnknownChar); }

  static CharVocabulary build(const std::vector<std::vector<std::string>>& sentences) {
    std::array<bool, 256> seen{};
    for (const auto& s : sentences)
      for (const auto& w : s)
        for (unsigned char c : w) seen[c] = true;
    CharVocabulary v;
    for (int c = 0; c < 256; ++c)
      if (seen[c]) v.add(static_cast<unsigned char>(c));
    return v;
  }
  static CharVocabulary from_chars(const std::string& chars) {
    CharVocabulary v;
    for (unsigned char c : chars) v.add(c);
    return v;
  }

  std::size_t size() const { return chars_.size() + 1; }
  std::uint32_t id(unsigned char c) const { return map_[c]; }
  std::vector<std::uint32_t> ids(const std::string& word) const {
    std::vector<std::uint32_t> out;
    out.reserve(word.size());
    for (unsigned char c : word) out.push_back(id(c));
    return out;
  }
  /// Known characters in id order (id = position + 1).
  const std::string& chars() const { return chars_; }
  /// Known lowercase ASCII letters, used as the substitution alphabet for typos.
  std::string letters() const {
    std::string s;
    for (char c : chars_)
      if (c >= 'a' && c <= 'z') s += c;
    return s;
  }

 private:
  void add(unsigned char c) {
    if (map_[c] != kUnknownChar) return;
    chars_ += static_cast<char>(c);
    map_[c] = static_cast<std::uint32_t>(chars_.size());
  }

  std::array<std::uint32_t, 256> map_{};
  std::string chars_;
};

/// Sentences whose words define the vocabulary: the well-formed question and the
/// answer of every triple. Ill-formed surfaces outside it map to UNK.
inline std::vector<std::vector<std::string>> vocabulary_sentences(const std::vector<Triple>& triples) {
  std::vector<std::vector<std::string>> out;
  out.reserve(2 * triples.size());
  for (const auto& t : triples) {
    out.push_back(t.well.words());
    out.push_back(t.answer.words());
  }
  return out;
}

inline std::pair<Vocabulary, CharVocabulary> build_vocab(const std::vector<Triple>& triples, std::size_t min_count) {
  if (triples.empty()) throw VocabError("build_vocab: empty corpus");
  auto sentences = vocabulary_sentences(triples);
  auto words = Vocabulary::build(sentences, min_count);
  for (const auto& t : triples) sentences.push_back(t.ill.words());
  return {std::move(words), CharVocabulary::build(sentences)};
}

// ---------------------------------------------------------------------------
// JSONL

class CorpusFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Triple triple_from_text(std::string id, std::string_view ill, std::string_view well, std::string_view answer) {
  return {std::move(id), tokenize(ill), tokenize(well), tokenize(answer)};
}

/// One object per line: string fields "ill", "well", "answer" and optional "id".
inline std::vector<Triple> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorpusFormatError("cannot open corpus " + path);
  std::vector<Triple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) {
      return CorpusFormatError(path + ":" + std::to_string(lineno) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("malformed JSON (") + e.what() + ")");
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    for (const char* key : {"ill", "well", "answer"})
      if (!j.contains(key) || !j[key].is_string()) throw fail(std::string("missing string field \"") + key + "\"");
    std::string id = "line-" + std::to_string(lineno);
    if (j.contains("id")) {
      if (!j["id"].is_string()) throw fail("field \"id\" must be a string");
      id = j["id"].get<std::string>();
    }
    out.push_back(triple_from_text(std::move(id), j["ill"].get<std::string>(), j["well"].get<std::string>(),
                                   j["answer"].get<std::string>()));
  }
  return out;
}

inline void save_jsonl(const std::vector<Triple>& triples, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CorpusFormatError("cannot write corpus " + path);
  for (const auto& t : triples) {
    nlohmann::ordered_json j;
    j["id"] = t.id;
    j["ill"] = t.ill.text();
    j["well"] = t.well.text();
    j["answer"] = t.answer.text();
    out << j.dump() << '\n';
  }
  if (!out) throw CorpusFormatError("write failed: " + path);
}

}  // namespace qrefine
