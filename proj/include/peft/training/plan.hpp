#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "peft/adapters/adapted_model.hpp"
#include "peft/corpus/batches.hpp"
#include "peft/errors.hpp"

namespace peft::training {

using adapters::FreezePolicy;

enum class TrainObjective { mlm, clm, sequence_classification, token_classification };

inline std::string to_string(TrainObjective o) {
  switch (o) {
    case TrainObjective::mlm: return "mlm";
    case TrainObjective::clm: return "clm";
    case TrainObjective::sequence_classification: return "sequence_classification";
    case TrainObjective::token_classification: return "token_classification";
  }
  return "?";
}

inline TrainObjective train_objective_from_string(const std::string& s) {
  if (s == "mlm") return TrainObjective::mlm;
  if (s == "clm") return TrainObjective::clm;
  if (s == "sequence_classification") return TrainObjective::sequence_classification;
  if (s == "token_classification") return TrainObjective::token_classification;
  throw ConfigError("unknown objective '" + s + "'");
}

inline bool is_language_modeling(TrainObjective o) { return o == TrainObjective::mlm || o == TrainObjective::clm; }

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainPlan {
  TrainObjective objective = TrainObjective::mlm;
  std::size_t max_steps = 100000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  std::size_t eval_every = 1000;
  std::size_t patience = 5;  // evaluations without improvement before stopping; 0 disables
  FreezePolicy freeze_policy = FreezePolicy::base_frozen;
  std::uint64_t seed = 0;
  std::size_t seq_length = 128;  // window length T
  double clip_norm = 1.0;        // global gradient norm; 0 disables
  bool overfit_one_batch = false;  // reuse the first batch at every step (debugging)
  AdamOptions adam;
  corpus::MaskingOptions masking;

  void validate() const {
    if (max_steps == 0) throw ConfigError("train plan: max_steps must be >= 1");
    if (eval_every == 0) throw ConfigError("train plan: eval_every must be >= 1");
    if (eval_every > max_steps)
      throw ConfigError("train plan: eval_every (" + std::to_string(eval_every) + ") exceeds max_steps (" +
                        std::to_string(max_steps) + ")");
    if (batch_size == 0) throw ConfigError("train plan: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train plan: learning_rate must be positive");
    if (seq_length < 3) throw ConfigError("train plan: seq_length must be >= 3");
    if (!(clip_norm >= 0.0)) throw ConfigError("train plan: clip_norm must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
      throw ConfigError("train plan: Adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("train plan: Adam eps must be positive");
    if (!(masking.mask_prob > 0.0 && masking.mask_prob < 1.0))
      throw ConfigError("train plan: mask_prob must lie in (0, 1)");
    if (masking.mask_share < 0.0 || masking.random_share < 0.0 || masking.mask_share + masking.random_share > 1.0)
      throw ConfigError("train plan: mask_share + random_share must lie in [0, 1]");
  }

  /// Language adapter on free text: up to 100k steps, batch 16, lr 1e-4.
  static TrainPlan glotcc_language_adapter() { return TrainPlan{}; }

  /// Language adapter on verbalised knowledge-graph sentences: up to 25k steps.
  static TrainPlan conceptnet_language_adapter() {
    TrainPlan p;
    p.max_steps = 25000;
    return p;
  }

  /// Full fine-tuning on free text: batch 1, lr 1e-4, nothing frozen.
  static TrainPlan full_finetune_lm() {
    TrainPlan p;
    p.batch_size = 1;
    p.freeze_policy = FreezePolicy::nothing_frozen;
    return p;
  }

  /// Task adapter: batch 32, lr 1e-4. The step budget is not given for tasks.
  static TrainPlan task_adapter(TrainObjective objective) {
    TrainPlan p;
    p.objective = objective;
    p.max_steps = 10000;
    p.batch_size = 32;
    p.eval_every = 500;
    p.freeze_policy = FreezePolicy::base_and_la_frozen;
    return p;
  }

  /// Task training of a fully fine-tuned model: lr 2e-5, batch 16 for TC and 8 otherwise.
  static TrainPlan full_finetune_task(TrainObjective objective, bool topic_classification) {
    TrainPlan p = task_adapter(objective);
    p.batch_size = topic_classification ? 16 : 8;
    p.learning_rate = 2e-5;
    p.freeze_policy = FreezePolicy::nothing_frozen;
    return p;
  }
};

inline void to_json(nlohmann::json& j, const TrainPlan& p) {
  j = nlohmann::json{{"objective", to_string(p.objective)},
                     {"max_steps", p.max_steps},
                     {"batch_size", p.batch_size},
                     {"learning_rate", p.learning_rate},
                     {"eval_every", p.eval_every},
                     {"patience", p.patience},
                     {"freeze_policy", adapters::to_string(p.freeze_policy)},
                     {"seed", p.seed},
                     {"seq_length", p.seq_length},
                     {"clip_norm", p.clip_norm},
                     {"overfit_one_batch", p.overfit_one_batch},
                     {"adam_beta1", p.adam.beta1},
                     {"adam_beta2", p.adam.beta2},
                     {"adam_eps", p.adam.eps},
                     {"mask_prob", p.masking.mask_prob},
                     {"mask_share", p.masking.mask_share},
                     {"random_share", p.masking.random_share}};
}

/// Missing keys keep their current values; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainPlan& p) {
  if (!j.is_object()) throw ConfigError("train plan must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "objective") p.objective = train_objective_from_string(v.get<std::string>());
      else if (k == "max_steps") p.max_steps = v.get<std::size_t>();
      else if (k == "batch_size") p.batch_size = v.get<std::size_t>();
      else if (k == "learning_rate") p.learning_rate = v.get<double>();
      else if (k == "eval_every") p.eval_every = v.get<std::size_t>();
      else if (k == "patience") p.patience = v.get<std::size_t>();
      else if (k == "freeze_policy") p.freeze_policy = adapters::freeze_policy_from_string(v.get<std::string>());
      else if (k == "seed") p.seed = v.get<std::uint64_t>();
      else if (k == "seq_length") p.seq_length = v.get<std::size_t>();
      else if (k == "clip_norm") p.clip_norm = v.get<double>();
      else if (k == "overfit_one_batch") p.overfit_one_batch = v.get<bool>();
      else if (k == "adam_beta1") p.adam.beta1 = v.get<double>();
      else if (k == "adam_beta2") p.adam.beta2 = v.get<double>();
      else if (k == "adam_eps") p.adam.eps = v.get<double>();
      else if (k == "mask_prob") p.masking.mask_prob = v.get<double>();
      else if (k == "mask_share") p.masking.mask_share = v.get<double>();
      else if (k == "random_share") p.masking.random_share = v.get<double>();
      else throw ConfigError("train plan: unknown key '" + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train plan: bad value for '" + k + "': " + e.what());
    }
  }
}

}  // namespace peft::training
