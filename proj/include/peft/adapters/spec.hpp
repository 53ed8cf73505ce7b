#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peft/encoder/config.hpp"
#include "peft/encoder/model.hpp"
#include "peft/encoder/parameters.hpp"

namespace peft::adapters {

using encoder::EncoderConfig;
using encoder::Projection;

enum class Family { seq_bn, seq_bn_inv, lora };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::seq_bn: return "seq_bn";
    case Family::seq_bn_inv: return "seq_bn_inv";
    case Family::lora: return "lora";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  if (s == "seq_bn") return Family::seq_bn;
  if (s == "seq_bn_inv") return Family::seq_bn_inv;
  if (s == "lora") return Family::lora;
  throw ConfigError("unknown adapter family '" + s + "' (expected seq_bn, seq_bn_inv or lora)");
}

inline Projection projection_from_string(const std::string& s) {
  if (s == "Q" || s == "query") return Projection::query;
  if (s == "K" || s == "key") return Projection::key;
  if (s == "V" || s == "value") return Projection::value;
  if (s == "O" || s == "output") return Projection::output;
  throw ConfigError("unknown LoRA target '" + s + "' (expected Q, K, V or O)");
}

inline std::string short_name(Projection p) {
  switch (p) {
    case Projection::query: return "Q";
    case Projection::key: return "K";
    case Projection::value: return "V";
    case Projection::output: return "O";
  }
  return "?";
}

/// Adapter family and its hyperparameters. Defaults are reduction factor 16 for the
/// bottleneck families and α = 8, r = 8 on the query/value projections for LoRA.
struct AdapterSpec {
  Family family = Family::seq_bn;
  std::size_t reduction_factor = 16;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  std::vector<Projection> lora_targets = {Projection::query, Projection::value};
  double invertible_split = 0.5;
  std::size_t invertible_inner_reduction = 2;

  bool has_bottleneck() const { return family != Family::lora; }
  bool has_coupling() const { return family == Family::seq_bn_inv; }
  bool has_lora() const { return family == Family::lora; }

  std::size_t bottleneck_width(std::size_t hidden) const { return hidden / reduction_factor; }
  std::size_t split_width(std::size_t hidden) const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(hidden) * invertible_split));
  }
  std::size_t coupling_width(std::size_t hidden) const { return hidden / (2 * invertible_inner_reduction); }

  void validate(const EncoderConfig& c) const {
    const auto h = c.hidden;
    if (has_bottleneck()) {
      if (reduction_factor == 0 || h % reduction_factor != 0)
        throw ConfigError("hidden size " + std::to_string(h) + " not divisible by reduction factor " +
                          std::to_string(reduction_factor));
    }
    if (has_coupling()) {
      const double exact = static_cast<double>(h) * invertible_split;
      if (!(invertible_split > 0.0 && invertible_split < 1.0) || std::abs(exact - std::round(exact)) > 1e-9)
        throw ConfigError("invertible split " + std::to_string(invertible_split) +
                          " does not divide hidden size " + std::to_string(h) + " into integral parts");
      if (invertible_inner_reduction == 0 || h % (2 * invertible_inner_reduction) != 0)
        throw ConfigError("hidden size " + std::to_string(h) + " not divisible by 2 x inner reduction " +
                          std::to_string(invertible_inner_reduction));
    }
    if (has_lora()) {
      if (lora_rank == 0 || lora_rank > h)
        throw ConfigError("LoRA rank " + std::to_string(lora_rank) + " must be in [1, hidden]");
      if (!(lora_alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
      if (lora_targets.empty()) throw ConfigError("LoRA needs at least one target projection");
      std::set<Projection> seen(lora_targets.begin(), lora_targets.end());
      if (seen.size() != lora_targets.size()) throw ConfigError("LoRA targets repeat a projection");
    }
  }

  bool targets(Projection p) const {
    return has_lora() && std::find(lora_targets.begin(), lora_targets.end(), p) != lora_targets.end();
  }
};

inline void to_json(nlohmann::json& j, const AdapterSpec& s) {
  std::vector<std::string> targets;
  for (auto p : s.lora_targets) targets.push_back(short_name(p));
  j = nlohmann::json{{"family", to_string(s.family)},
                     {"reduction_factor", s.reduction_factor},
                     {"lora_rank", s.lora_rank},
                     {"lora_alpha", s.lora_alpha},
                     {"lora_targets", targets},
                     {"invertible_split", s.invertible_split},
                     {"invertible_inner_reduction", s.invertible_inner_reduction}};
}

inline void from_json(const nlohmann::json& j, AdapterSpec& s) {
  if (!j.is_object()) throw ConfigError("adapter spec must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "family") s.family = family_from_string(v.get<std::string>());
      else if (k == "reduction_factor") s.reduction_factor = v.get<std::size_t>();
      else if (k == "lora_rank") s.lora_rank = v.get<std::size_t>();
      else if (k == "lora_alpha") s.lora_alpha = v.get<double>();
      else if (k == "lora_targets") {
        s.lora_targets.clear();
        for (const auto& t : v) s.lora_targets.push_back(projection_from_string(t.get<std::string>()));
      } else if (k == "invertible_split") s.invertible_split = v.get<double>();
      else if (k == "invertible_inner_reduction") s.invertible_inner_reduction = v.get<std::size_t>();
      else throw ConfigError("adapter spec: unknown key '" + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("adapter spec: bad value for '" + k + "': " + e.what());
    }
  }
}

/// Declared parameters of one adapter, names relative to the adapter.
inline ParameterLayout adapter_layout(const EncoderConfig& c, const AdapterSpec& s) {
  s.validate(c);
  const auto h = c.hidden;
  ParameterLayout l;
  if (s.has_bottleneck()) {
    const auto w = s.bottleneck_width(h);
    for (std::size_t i = 0; i < c.layers; ++i) {
      const auto p = "bottleneck." + std::to_string(i) + ".";
      l.push_back({p + "down.weight", {h, w}, Init::normal});
      l.push_back({p + "down.bias", {w}, Init::zeros});
      l.push_back({p + "up.weight", {w, h}, Init::zeros});
      l.push_back({p + "up.bias", {h}, Init::zeros});
    }
  }
  if (s.has_coupling()) {
    const auto first = s.split_width(h), second = h - first, inner = s.coupling_width(h);
    // F: second half -> first half; G: first half -> second half
    l.push_back({"invertible.f.in.weight", {second, inner}, Init::normal});
    l.push_back({"invertible.f.in.bias", {inner}, Init::zeros});
    l.push_back({"invertible.f.out.weight", {inner, first}, Init::zeros});
    l.push_back({"invertible.f.out.bias", {first}, Init::zeros});
    l.push_back({"invertible.g.in.weight", {first, inner}, Init::normal});
    l.push_back({"invertible.g.in.bias", {inner}, Init::zeros});
    l.push_back({"invertible.g.out.weight", {inner, second}, Init::zeros});
    l.push_back({"invertible.g.out.bias", {second}, Init::zeros});
  }
  if (s.has_lora()) {
    for (std::size_t i = 0; i < c.layers; ++i)
      for (auto t : s.lora_targets) {
        const auto p = "lora." + std::to_string(i) + "." + encoder::to_string(t) + ".";
        l.push_back({p + "a", {h, s.lora_rank}, Init::normal});
        l.push_back({p + "b", {s.lora_rank, h}, Init::zeros});
      }
  }
  return l;
}

/// Closed-form adapter parameter count.
inline std::size_t adapter_parameter_count(const EncoderConfig& c, const AdapterSpec& s) {
  s.validate(c);
  const auto h = c.hidden;
  std::size_t n = 0;
  if (s.has_bottleneck()) {
    const auto w = s.bottleneck_width(h);
    n += c.layers * (2 * h * w + w + h);
  }
  if (s.has_coupling()) {
    const auto a = s.split_width(h), b = h - a, k = s.coupling_width(h);
    n += (b * k + k + k * a + a) + (a * k + k + k * b + b);
  }
  if (s.has_lora()) n += c.layers * s.lora_targets.size() * 2 * h * s.lora_rank;
  return n;
}

/// Fusion: per-layer query/key/value projections over member outputs.
inline ParameterLayout fusion_layout(const EncoderConfig& c) {
  const auto h = c.hidden;
  ParameterLayout l;
  for (std::size_t i = 0; i < c.layers; ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    l.push_back({p + "query.weight", {h, h}, Init::normal});
    l.push_back({p + "query.bias", {h}, Init::zeros});
    l.push_back({p + "key.weight", {h, h}, Init::normal});
    l.push_back({p + "key.bias", {h}, Init::zeros});
    l.push_back({p + "value.weight", {h, h}, Init::identity});
    l.push_back({p + "value.bias", {h}, Init::zeros});
  }
  return l;
}

/// Backbone plus one language adapter, names prefixed "encoder." and "la.0.".
inline ParameterLayout adapted_layout(const EncoderConfig& c, const AdapterSpec& s) {
  auto l = prefixed(encoder::backbone_layout(c), "encoder");
  for (auto& d : prefixed(adapter_layout(c, s), "la.0")) l.push_back(d);
  return l;
}

}  // namespace peft::adapters
