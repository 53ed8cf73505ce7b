#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "peft/errors.hpp"

namespace peft::encoder {

enum class Objective { mlm, clm };

inline std::string to_string(Objective o) { return o == Objective::mlm ? "mlm" : "clm"; }

inline Objective objective_from_string(const std::string& s) {
  if (s == "mlm") return Objective::mlm;
  if (s == "clm") return Objective::clm;
  throw ConfigError("unknown objective '" + s + "' (expected mlm or clm)");
}

/// Transformer-encoder geometry. `layers` may be 0, which leaves the embedding block only.
struct EncoderConfig {
  std::size_t vocab_size = 30522;
  std::size_t hidden = 768;
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t ff_dim = 3072;
  std::size_t max_positions = 512;
  std::size_t type_vocab = 2;
  double dropout = 0.1;
  double layer_norm_eps = 1e-12;
  double init_std = 0.02;
  Objective objective = Objective::mlm;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("encoder config: ") + name + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(hidden, "hidden");
    positive(heads, "heads");
    positive(ff_dim, "ff_dim");
    positive(max_positions, "max_positions");
    positive(type_vocab, "type_vocab");
    if (hidden % heads != 0)
      throw ConfigError("encoder config: hidden " + std::to_string(hidden) +
                        " not divisible by heads " + std::to_string(heads));
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder config: dropout must be in [0,1)");
    if (!(layer_norm_eps > 0.0)) throw ConfigError("encoder config: layer_norm_eps must be positive");
    if (!(init_std > 0.0)) throw ConfigError("encoder config: init_std must be positive");
  }

  std::size_t head_dim() const { return hidden / heads; }

  /// mBERT-base geometry.
  static EncoderConfig mbert_base() {
    EncoderConfig c;
    c.vocab_size = 119547;
    return c;
  }

  /// XLM-R-base geometry.
  static EncoderConfig xlmr_base() {
    EncoderConfig c;
    c.vocab_size = 250002;
    c.max_positions = 514;
    c.type_vocab = 1;
    c.layer_norm_eps = 1e-5;
    return c;
  }

  bool operator==(const EncoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"hidden", c.hidden},
                     {"layers", c.layers},         {"heads", c.heads},
                     {"ff_dim", c.ff_dim},         {"max_positions", c.max_positions},
                     {"type_vocab", c.type_vocab}, {"dropout", c.dropout},
                     {"layer_norm_eps", c.layer_norm_eps}, {"init_std", c.init_std},
                     {"objective", to_string(c.objective)}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  if (!j.is_object()) throw ConfigError("encoder config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "vocab_size") c.vocab_size = v.get<std::size_t>();
      else if (k == "hidden") c.hidden = v.get<std::size_t>();
      else if (k == "layers") c.layers = v.get<std::size_t>();
      else if (k == "heads") c.heads = v.get<std::size_t>();
      else if (k == "ff_dim") c.ff_dim = v.get<std::size_t>();
      else if (k == "max_positions") c.max_positions = v.get<std::size_t>();
      else if (k == "type_vocab") c.type_vocab = v.get<std::size_t>();
      else if (k == "dropout") c.dropout = v.get<double>();
      else if (k == "layer_norm_eps") c.layer_norm_eps = v.get<double>();
      else if (k == "init_std") c.init_std = v.get<double>();
      else if (k == "objective") c.objective = objective_from_string(v.get<std::string>());
      else throw ConfigError("encoder config: unknown key '" + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("encoder config: bad value for '" + k + "': " + e.what());
    }
  }
}

/// Closed-form parameter counts.
struct ParameterCounts {
  std::size_t embeddings = 0;
  std::size_t per_layer = 0;
  std::size_t mlm_head = 0;

  std::size_t backbone(std::size_t layers) const { return embeddings + layers * per_layer; }
};

inline ParameterCounts parameter_counts(const EncoderConfig& c) {
  const auto h = c.hidden, f = c.ff_dim;
  ParameterCounts p;
  // token + position + type tables, embedding layer norm
  p.embeddings = (c.vocab_size + c.max_positions + c.type_vocab) * h + 2 * h;
  // Q,K,V,O with biases; FF up/down with biases; two layer norms
  p.per_layer = 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h;
  // transform dense + layer norm + output bias (projection tied to the token table)
  p.mlm_head = (h * h + h) + 2 * h + c.vocab_size;
  return p;
}

/// Embeddings plus encoder layers, the denominator for trainable-parameter percentages.
inline std::size_t backbone_parameter_count(const EncoderConfig& c) {
  return parameter_counts(c).backbone(c.layers);
}

/// Everything build_encoder allocates, MLM head included.
inline std::size_t total_parameter_count(const EncoderConfig& c) {
  const auto p = parameter_counts(c);
  return p.backbone(c.layers) + p.mlm_head;
}

}  // namespace peft::encoder
