#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "peft/errors.hpp"

namespace peft::verbalizer {

struct Triple {
  std::string head;
  std::string relation;
  std::string tail;
  std::string language;
};

using RelationEntry = std::pair<std::string_view, std::string_view>;

/// ConceptNet relation → predicate, in table order.
inline constexpr std::array<RelationEntry, 33> kRelationMap = {{
    {"Antonym", "is the opposite of"},
    {"DerivedFrom", "is derived from"},
    {"EtymologicallyDerivedFrom", "is etymologically derived from"},
    {"EtymologicallyRelatedTo", "is etymologically related to"},
    {"FormOf", "is a form of"},
    {"PartOf", "is a part of"},
    {"HasA", "belongs to"},
    {"UsedFor", "is used for"},
    {"AtLocation", "is a typical location for"},
    {"Causes", "causes"},
    {"CausesDesire", "makes someone want"},
    {"MadeOf", "is made of"},
    {"ReceivesAction", "receives action of"},
    {"HasSubevent", "is a subevent of"},
    {"HasFirstSubevent", "is an event that begins with subevent"},
    {"HasLastSubevent", "is an event that concludes with subevent"},
    {"HasPrerequisite", "has prerequisite of"},
    {"HasProperty", "can be described as"},
    {"MotivatedByGoal", "is a step toward accomplishing the goal"},
    {"ObstructedBy", "is an obstacle in the way of"},
    {"Desires", "is a conscious entity that typically wants"},
    {"CreatedBy", "is a process or agent that creates"},
    {"CapableOf", "is capable of"},
    {"HasContext", "is a word used in the context of"},
    {"IsA", "is a type of"},
    {"RelatedTo", "is related to"},
    {"SimilarTo", "is similar to"},
    {"Synonym", "is a synonym of"},
    {"SymbolOf", "symbolically represents"},
    {"DefinedAs", "is a more explanatory version of"},
    {"DistinctFrom", "is distinct from"},
    {"MannerOf", "is a specific way to do"},
    {"LocatedNear", "is typically found near"},
}};

inline std::string_view predicate_for(std::string_view relation) {
  for (const auto& [rel, pred] : kRelationMap)
    if (rel == relation) return pred;
  throw MappingError("unknown ConceptNet relation '" + std::string(relation) + "'");
}

inline std::string trim(std::string_view s) {
  const auto ws = " \t\r\n\v\f";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

/// "<head> <predicate> <tail>." with head and tail trimmed, no other normalisation.
inline std::string verbalize(const Triple& t) {
  const auto head = trim(t.head), tail = trim(t.tail);
  if (head.empty() || tail.empty()) throw ValidationError("triple has an empty head or tail");
  const auto pred = predicate_for(trim(t.relation));
  std::string s;
  s.reserve(head.size() + pred.size() + tail.size() + 3);
  s.append(head).append(" ").append(pred).append(" ").append(tail).append(".");
  return s;
}

enum class SkipReason { malformed_line, language_mismatch, empty_field, unknown_relation };

inline constexpr std::array<SkipReason, 4> kSkipReasons = {SkipReason::malformed_line, SkipReason::language_mismatch,
                                                           SkipReason::empty_field, SkipReason::unknown_relation};

inline std::string to_string(SkipReason r) {
  switch (r) {
    case SkipReason::malformed_line: return "malformed_line";
    case SkipReason::language_mismatch: return "language_mismatch";
    case SkipReason::empty_field: return "empty_field";
    case SkipReason::unknown_relation: return "unknown_relation";
  }
  return "?";
}

struct TsvRow {
  std::size_t line = 0;
  bool malformed = false;
  Triple triple;
};

/// Tab-separated head, relation, tail, language. Rows with another field count are kept
/// as malformed so they show up in the skip report.
inline std::vector<TsvRow> read_triples_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read triples '" + path + "'");
  std::vector<TsvRow> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == '\t') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    TsvRow row;
    row.line = n;
    if (fields.size() != 4) {
      row.malformed = true;
    } else {
      row.triple = {fields[0], fields[1], fields[2], fields[3]};
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct KgCorpus {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::map<SkipReason, std::size_t> skipped;
  std::size_t valid = 0;
};

/// Verbalises the rows that pass the language filter (empty filter keeps all), shuffles
/// the sentences with `seed` and holds out round(n·val_fraction) of them (at least one
/// when n ≥ 2). Duplicates are kept.
inline KgCorpus build_kg_corpus(const std::vector<TsvRow>& rows, const std::string& language, double val_fraction,
                                std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("val_fraction must lie in (0, 1), got " + std::to_string(val_fraction));
  KgCorpus out;
  for (auto r : kSkipReasons) out.skipped[r] = 0;
  std::vector<std::string> sentences;
  for (const auto& row : rows) {
    if (row.malformed) {
      ++out.skipped[SkipReason::malformed_line];
      continue;
    }
    if (!language.empty() && trim(row.triple.language) != language) {
      ++out.skipped[SkipReason::language_mismatch];
      continue;
    }
    try {
      sentences.push_back(verbalize(row.triple));
    } catch (const ValidationError&) {
      ++out.skipped[SkipReason::empty_field];
    } catch (const MappingError&) {
      ++out.skipped[SkipReason::unknown_relation];
    }
  }
  out.valid = sentences.size();
  if (sentences.empty())
    throw ValidationError("no valid triples" + (language.empty() ? std::string() : " for language '" + language + "'"));
  std::mt19937_64 rng(seed);
  std::shuffle(sentences.begin(), sentences.end(), rng);
  std::size_t k = 0;
  if (sentences.size() >= 2) {
    k = static_cast<std::size_t>(std::llround(static_cast<double>(sentences.size()) * val_fraction));
    k = std::clamp<std::size_t>(k, 1, sentences.size() - 1);
  }
  out.val.assign(sentences.begin(), sentences.begin() + static_cast<std::ptrdiff_t>(k));
  out.train.assign(sentences.begin() + static_cast<std::ptrdiff_t>(k), sentences.end());
  return out;
}

inline KgCorpus build_kg_corpus(const std::vector<Triple>& triples, const std::string& language, double val_fraction,
                                std::uint64_t seed) {
  std::vector<TsvRow> rows;
  rows.reserve(triples.size());
  for (const auto& t : triples) rows.push_back({0, false, t});
  return build_kg_corpus(rows, language, val_fraction, seed);
}

inline void write_skip_report(const std::string& path, const KgCorpus& c) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << "reason,count\n";
  for (auto r : kSkipReasons) out << to_string(r) << ',' << c.skipped.at(r) << '\n';
}

}  // namespace peft::verbalizer
