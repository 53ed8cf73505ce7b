#pragma once

// Synthetic languages for the directional checks. Each language has its own syllable
// inventory and lexicon but all share one grammar with gender agreement, so a backbone
// trained on one language has learned structure that transfers to another once the
// other's vocabulary is mapped in.

#include <random>
#include <set>
#include <string>
#include <vector>

namespace peft::testing {

struct LanguageSpec {
  std::string consonants;
  std::string vowels;
  std::uint64_t seed = 0;
  std::size_t nouns_per_field = 10;
  std::size_t fields = 4;  // nouns are grouped into topical fields
  std::size_t verbs = 16;
  std::size_t adjectives = 12;
  std::size_t names = 12;
  std::size_t places = 12;
};

class SyntheticLanguage {
 public:
  explicit SyntheticLanguage(const LanguageSpec& spec) : spec_(spec) {
    std::mt19937_64 rng(spec.seed);
    auto word = [&](std::size_t syllables) {
      std::string w;
      for (std::size_t k = 0; k < syllables; ++k) {
        w += spec_.consonants[rng() % spec_.consonants.size()];
        w += spec_.vowels[rng() % spec_.vowels.size()];
      }
      return w;
    };
    auto fresh = [&](std::size_t syllables) {
      for (;;) {
        auto w = word(syllables);
        if (used_.insert(w).second) return w;
      }
    };
    for (int g = 0; g < 2; ++g)
      for (int k = 0; k < 2; ++k) determiners_[g].push_back(fresh(1));
    for (int g = 0; g < 2; ++g) gender_suffix_[g] = fresh(1);
    for (std::size_t f = 0; f < spec.fields; ++f) {
      nouns_.emplace_back();
      for (std::size_t i = 0; i < spec.nouns_per_field; ++i) nouns_.back().push_back({fresh(2), static_cast<int>(i % 2)});
    }
    for (std::size_t i = 0; i < spec.verbs; ++i) verbs_.push_back(fresh(2));
    for (std::size_t i = 0; i < spec.adjectives; ++i) adjectives_.push_back(fresh(2));
    for (std::size_t i = 0; i < 4; ++i) prepositions_.push_back(fresh(1));
    for (std::size_t i = 0; i < spec.names; ++i) names_.push_back(fresh(3));
    for (std::size_t i = 0; i < spec.places; ++i) places_.push_back(fresh(3));
  }

  std::size_t fields() const { return nouns_.size(); }

  /// A sentence whose nouns all come from `field`:
  ///   DET [ADJ-g] NOUN VERB-g DET [ADJ-g] NOUN [PREP DET NOUN]
  /// where g is the gender of the subject noun (determiners and adjectives agree with
  /// their own noun).
  std::string sentence(std::mt19937_64& rng, std::size_t field) const {
    std::vector<std::string> w;
    auto phrase = [&]() {
      const auto& n = nouns_[field][rng() % nouns_[field].size()];
      w.push_back(determiners_[n.gender][rng() % 2]);
      if (rng() % 2) w.push_back(adjectives_[rng() % adjectives_.size()] + gender_suffix_[n.gender]);
      w.push_back(n.form);
      return n.gender;
    };
    const int subject = phrase();
    w.push_back(verbs_[rng() % verbs_.size()] + gender_suffix_[subject]);
    phrase();
    if (rng() % 3 == 0) {
      w.push_back(prepositions_[rng() % prepositions_.size()]);
      phrase();
    }
    std::string s;
    for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
    return s;
  }

  std::string sentence(std::mt19937_64& rng) const { return sentence(rng, rng() % nouns_.size()); }

  /// Roughly `bytes` of text, one sentence per line.
  std::vector<std::string> corpus(std::size_t bytes, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<std::string> out;
    std::size_t total = 0;
    while (total < bytes) {
      out.push_back(sentence(rng));
      total += out.back().size() + 1;
    }
    return out;
  }

  struct Tagged {
    std::vector<std::string> tokens;
    std::vector<std::string> tags;
  };

  /// Sentence with named entities: "NAME VERB-g [PREP] PLACE ..." mixed with ordinary phrases.
  Tagged tagged_sentence(std::mt19937_64& rng) const {
    Tagged t;
    auto add = [&](const std::string& w, const std::string& tag) {
      t.tokens.push_back(w);
      t.tags.push_back(tag);
    };
    auto phrase = [&]() {
      const auto& field = nouns_[rng() % nouns_.size()];
      const auto& n = field[rng() % field.size()];
      add(determiners_[n.gender][rng() % 2], "O");
      add(n.form, "O");
    };
    if (rng() % 2) add(names_[rng() % names_.size()], "B-PER");
    else phrase();
    add(verbs_[rng() % verbs_.size()] + gender_suffix_[rng() % 2], "O");
    if (rng() % 2) {
      add(prepositions_[rng() % prepositions_.size()], "O");
      add(places_[rng() % places_.size()], "B-LOC");
    } else {
      add(names_[rng() % names_.size()], "B-PER");
    }
    if (rng() % 2) phrase();
    return t;
  }

  const std::vector<std::string>& determiners(int gender) const { return determiners_[gender]; }

  /// Gender of a noun form, or -1 for words that are not nouns.
  int gender_of(const std::string& form) const {
    for (const auto& field : nouns_)
      for (const auto& n : field)
        if (n.form == form) return n.gender;
    return -1;
  }

  std::vector<std::string> field_nouns(std::size_t field) const {
    std::vector<std::string> out;
    for (const auto& n : nouns_.at(field)) out.push_back(n.form);
    return out;
  }

 private:
  struct Noun {
    std::string form;
    int gender = 0;
  };

  LanguageSpec spec_;
  std::set<std::string> used_;
  std::vector<std::string> determiners_[2];
  std::string gender_suffix_[2];
  std::vector<std::vector<Noun>> nouns_;
  std::vector<std::string> verbs_;
  std::vector<std::string> adjectives_;
  std::vector<std::string> prepositions_;
  std::vector<std::string> names_;
  std::vector<std::string> places_;
};

inline LanguageSpec language_a() { return {"ptkmn", "aiu", 101}; }
inline LanguageSpec language_b() { return {"bdgrsl", "eoy", 202}; }
inline LanguageSpec language_c() { return {"fvzhjw", "aeo", 303}; }

}  // namespace peft::testing
