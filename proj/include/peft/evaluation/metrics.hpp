#pragma once

#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "peft/errors.hpp"

namespace peft::evaluation {

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // gold count
};

struct TaskMetrics {
  std::vector<ClassScores> per_class;        // macro_f1: indexed by class id
  std::map<std::string, ClassScores> per_type;  // entity_f1: by entity type
  double macro_f1 = 0.0;
  double precision = 0.0;  // entity_f1: micro over chunks
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {

inline ClassScores scores(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassScores s;
  s.support = tp + fn;
  s.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  s.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

}  // namespace detail

/// Unweighted mean of per-class F1 over all `num_classes` classes. A class absent from
/// both predictions and gold scores 0 and still counts in the mean.
inline TaskMetrics macro_f1(const std::vector<int>& predictions, const std::vector<int>& golds, std::size_t num_classes) {
  if (predictions.empty()) throw InputError("macro_f1: no predictions");
  if (predictions.size() != golds.size())
    throw InputError("macro_f1: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(golds.size()) + " gold labels");
  if (num_classes == 0) throw InputError("macro_f1: num_classes must be positive");
  std::vector<std::size_t> tp(num_classes), fp(num_classes), fn(num_classes);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = predictions[i], g = golds[i];
    if (p < 0 || g < 0 || static_cast<std::size_t>(p) >= num_classes || static_cast<std::size_t>(g) >= num_classes)
      throw InputError("macro_f1: label outside [0, " + std::to_string(num_classes) + ")");
    if (p == g) {
      ++tp[static_cast<std::size_t>(p)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(g)];
    }
  }
  TaskMetrics m;
  double sum = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    m.per_class.push_back(detail::scores(tp[c], fp[c], fn[c]));
    sum += m.per_class.back().f1;
  }
  m.macro_f1 = sum / static_cast<double>(num_classes);
  m.f1 = m.macro_f1;
  return m;
}

/// Typed half-open span [begin, end).
struct Chunk {
  std::string type;
  std::size_t begin = 0;
  std::size_t end = 0;
  auto operator<=>(const Chunk&) const = default;
};

/// Splits "B-PER" into ('B', "PER"); "O" into ('O', ""). Other shapes are input errors.
inline std::pair<char, std::string> parse_tag(const std::string& tag) {
  if (tag == "O") return {'O', ""};
  if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') return {tag[0], tag.substr(2)};
  throw InputError("unknown tag '" + tag + "' (expected O, B-<type> or I-<type>)");
}

/// Chunks of a BIO sequence. A B- tag, an I- tag following O, or an I- tag whose type
/// differs from the running chunk starts a new chunk.
inline std::vector<Chunk> extract_chunks(const std::vector<std::string>& tags) {
  std::vector<Chunk> out;
  bool open = false;
  Chunk cur;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto [prefix, type] = parse_tag(tags[i]);
    const bool continues = open && prefix == 'I' && type == cur.type;
    if (continues) continue;
    if (open) {
      cur.end = i;
      out.push_back(cur);
      open = false;
    }
    if (prefix != 'O') {
      cur = {type, i, 0};
      open = true;
    }
  }
  if (open) {
    cur.end = tags.size();
    out.push_back(cur);
  }
  return out;
}

/// Micro precision/recall/F1 over exact (sentence, type, span) matches.
inline TaskMetrics entity_f1(const std::vector<std::vector<std::string>>& pred_tags,
                             const std::vector<std::vector<std::string>>& gold_tags) {
  if (pred_tags.size() != gold_tags.size())
    throw InputError("entity_f1: " + std::to_string(pred_tags.size()) + " predicted vs " +
                     std::to_string(gold_tags.size()) + " gold sequences");
  using Key = std::tuple<std::size_t, std::string, std::size_t, std::size_t>;
  std::set<Key> pred, gold;
  for (std::size_t s = 0; s < pred_tags.size(); ++s) {
    if (pred_tags[s].size() != gold_tags[s].size())
      throw InputError("entity_f1: sequence " + std::to_string(s) + " has mismatched lengths");
    for (const auto& c : extract_chunks(pred_tags[s])) pred.insert({s, c.type, c.begin, c.end});
    for (const auto& c : extract_chunks(gold_tags[s])) gold.insert({s, c.type, c.begin, c.end});
  }
  std::map<std::string, std::size_t> tp, np, ng;
  std::size_t tp_all = 0;
  for (const auto& k : pred) {
    ++np[std::get<1>(k)];
    if (gold.count(k)) {
      ++tp[std::get<1>(k)];
      ++tp_all;
    }
  }
  for (const auto& k : gold) ++ng[std::get<1>(k)];
  TaskMetrics m;
  const auto micro = detail::scores(tp_all, pred.size() - tp_all, gold.size() - tp_all);
  m.precision = micro.precision;
  m.recall = micro.recall;
  m.f1 = micro.f1;
  std::set<std::string> types;
  for (const auto& [t, n] : np) types.insert(t);
  for (const auto& [t, n] : ng) types.insert(t);
  double sum = 0;
  for (const auto& t : types) {
    m.per_type[t] = detail::scores(tp[t], np[t] - tp[t], ng[t] - tp[t]);
    sum += m.per_type[t].f1;
  }
  m.macro_f1 = types.empty() ? 0.0 : sum / static_cast<double>(types.size());
  return m;
}

}  // namespace peft::evaluation
