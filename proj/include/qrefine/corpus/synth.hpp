#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrefine/corpus/corpus.hpp"
#include "qrefine/corpus/corruption.hpp"
#include "qrefine/rng.hpp"

namespace qrefine {

/// A question pattern and its answer pattern. `{slot}` placeholders name single-token
/// fillers; every slot used by the answer also appears in the question.
struct QuestionTemplate {
  std::string question;
  std::string answer;
};

struct Grammar {
  std::vector<QuestionTemplate> templates;
  std::map<std::string, std::vector<std::string>> slots;
};

/// Desk-scale question grammar: 24 templates over 14 slot classes.
inline Grammar default_grammar() {
  Grammar g;
  g.slots = {
      {"nation", {"italian", "french", "german", "spanish", "japanese", "korean", "mexican", "greek", "indian", "brazilian"}},
      {"place", {"restaurants", "hotels", "schools", "hospitals", "airports", "museums", "shops", "offices"}},
      {"drink", {"water", "coffee", "tea", "juice", "milk", "wine", "beer", "soda"}},
      {"food", {"bread", "rice", "cheese", "pasta", "soup", "salad", "fish", "chicken"}},
      {"animal", {"cats", "dogs", "horses", "rabbits", "birds", "cows", "goats", "snakes"}},
      {"device", {"phone", "laptop", "printer", "camera", "router", "tablet", "keyboard", "monitor"}},
      {"part", {"battery", "screen", "cable", "charger", "speaker", "fan"}},
      {"city", {"paris", "london", "tokyo", "berlin", "madrid", "rome", "chicago", "sydney"}},
      {"season", {"winter", "summer", "spring", "autumn"}},
      {"job", {"doctors", "teachers", "nurses", "pilots", "farmers", "lawyers", "engineers", "chefs"}},
      {"activity", {"swimming", "running", "cycling", "hiking", "dancing", "painting", "reading", "cooking"}},
      {"body", {"back", "knee", "neck", "shoulder", "stomach", "head"}},
      {"plant", {"roses", "tomatoes", "tulips", "potatoes", "carrots", "lilies"}},
      {"color", {"red", "blue", "green", "yellow", "black", "white"}},
  };
  g.templates = {
      {"why don't {nation} {place} serve {drink} ?", "{nation} {place} often charge for {drink} so guests must ask for it ."},
      {"how do i fix the {part} on my {device} ?", "to fix the {part} on a {device} restart it and check the {part} connection ."},
      {"what is the best time to visit {city} in {season} ?", "{city} in {season} is pleasant if you visit early in the week ."},
      {"why do {animal} sleep so much during {season} ?", "{animal} save energy in {season} by sleeping longer than usual ."},
      {"how much do {job} earn in {city} ?", "{job} in {city} usually earn a good salary with bonuses ."},
      {"is {activity} good for my {body} ?", "{activity} can help your {body} if you warm up first ."},
      {"how can i grow {plant} in {season} ?", "{plant} grow well in {season} with sun and regular watering ."},
      {"what should i feed my {animal} in {season} ?", "in {season} most {animal} need fresh food and clean water ."},
      {"where can i buy cheap {food} in {city} ?", "local markets in {city} sell cheap {food} every morning ."},
      {"why is my {color} {device} so slow ?", "a slow {device} often has too many apps running ; {color} models are no different ."},
      {"how long does it take to learn {activity} ?", "most people learn basic {activity} in a few months of practice ."},
      {"can {animal} eat {food} ?", "{animal} can eat small amounts of {food} but not every day ."},
      {"what do {job} do in {season} ?", "in {season} many {job} take extra shifts or short holidays ."},
      {"how do i clean a {color} {device} ?", "wipe the {color} {device} with a soft dry cloth ."},
      {"why do {nation} people drink so much {drink} ?", "{drink} is part of daily life in {nation} culture ."},
      {"which {place} in {city} are open on sunday ?", "many {place} in {city} are open on sunday afternoons ."},
      {"what skills do {job} need for {activity} ?", "{job} who enjoy {activity} need patience and regular training ."},
      {"is it safe to drink {drink} every day ?", "drinking {drink} every day is safe in moderate amounts ."},
      {"how do you cook {food} with {drink} ?", "cook the {food} slowly and add a little {drink} at the end ."},
      {"what causes pain in my {body} after {activity} ?", "pain in the {body} after {activity} usually comes from poor form ."},
      {"why are {color} {plant} so popular ?", "{color} {plant} are popular because they look bright in gardens ."},
      {"how do i keep {animal} warm in {season} ?", "keep {animal} warm in {season} with dry bedding and shelter ."},
      {"what is a traditional {nation} dish with {food} ?", "a traditional {nation} dish mixes {food} with local herbs and spices ."},
      {"how do i charge my {device} without a {part} ?", "you can charge a {device} without a {part} using a usb port ."},
  };
  return g;
}

namespace detail {

inline bool is_slot(const std::string& w) { return w.size() > 2 && w.front() == '{' && w.back() == '}'; }

/// Template tokens with slot placeholders kept whole ("{nation}").
inline std::vector<std::string> template_tokens(const std::string& pattern) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    if (is_slot(cur))
      out.push_back(cur);
    else
      for (auto& w : tokenize_words(cur)) out.push_back(std::move(w));
    cur.clear();
  };
  for (char c : pattern) {
    if (c == ' ') {
      flush();
    } else {
      cur += c;
    }
  }
  flush();
  return out;
}

inline std::vector<std::string> instantiate(const std::vector<std::string>& pattern,
                                            const std::map<std::string, std::string>& fill) {
  std::vector<std::string> out;
  for (const auto& w : pattern) out.push_back(is_slot(w) ? fill.at(w.substr(1, w.size() - 2)) : w);
  return out;
}

}  // namespace detail

/// True when `words` is an instantiation of some template question.
inline bool parses(const Grammar& g, const std::vector<std::string>& words) {
  for (const auto& t : g.templates) {
    const auto pat = detail::template_tokens(t.question);
    if (pat.size() != words.size()) continue;
    bool ok = true;
    for (std::size_t i = 0; ok && i < pat.size(); ++i) {
      if (detail::is_slot(pat[i])) {
        const auto& fillers = g.slots.at(pat[i].substr(1, pat[i].size() - 2));
        ok = std::find(fillers.begin(), fillers.end(), words[i]) != fillers.end();
      } else {
        ok = pat[i] == words[i];
      }
    }
    if (ok) return true;
  }
  return false;
}

/// Generates n triples: well = template instantiation, answer = the paired answer
/// template with the same fillers, ill = corrupt_composite(well) drawing distractor
/// phrases from the other triples' answers.
inline std::vector<Triple> synth_corpus(const Grammar& g, long n, std::uint64_t seed,
                                        const CorruptionSpec& spec = {}) {
  if (n <= 0) throw std::invalid_argument("synth_corpus: n must be positive");
  if (g.templates.empty()) throw std::invalid_argument("synth_corpus: grammar has no templates");
  Rng rng(seed);
  std::vector<Triple> out;
  out.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    const auto& t = g.templates[rng.below(g.templates.size())];
    const auto qpat = detail::template_tokens(t.question);
    std::map<std::string, std::string> fill;
    for (const auto& w : qpat) {
      if (!detail::is_slot(w)) continue;
      const std::string name = w.substr(1, w.size() - 2);
      if (fill.count(name)) continue;
      const auto& options = g.slots.at(name);
      fill[name] = options[rng.below(options.size())];
    }
    Triple tr;
    char id[32];
    std::snprintf(id, sizeof id, "q%06ld", i + 1);
    tr.id = id;
    tr.well = TokenSeq::from_words(detail::instantiate(qpat, fill));
    tr.answer = TokenSeq::from_words(detail::instantiate(detail::template_tokens(t.answer), fill));
    out.push_back(std::move(tr));
  }
  std::vector<TokenSeq> pool;
  pool.reserve(out.size());
  for (const auto& t : out) pool.push_back(t.answer);
  Rng corrupt_rng = rng.fork(0xC0);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i].ill = corrupt_composite(out[i].well, pool, spec, corrupt_rng, pool.size() > 1 ? i : pool.size());
  return out;
}

}  // namespace qrefine
