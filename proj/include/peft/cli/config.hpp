#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peft/adapters/spec.hpp"
#include "peft/training/plan.hpp"

namespace peft::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

/// 1 for configuration errors, 3 for numerical failures, 2 for everything else.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  if (dynamic_cast<const ConfigError*>(&e)) return kUsage;
  return kData;
}

inline constexpr const char* kOutRootEnv = "PEFT_OUT_ROOT";

/// $PEFT_OUT_ROOT, or ./runs when unset.
inline fs::path output_root() {
  const char* r = std::getenv(kOutRootEnv);
  return r && *r ? fs::path(r) : fs::path("runs");
}

inline fs::path output_dir(const std::string& given, const std::string& command) {
  fs::path p = given.empty() ? output_root() / command : fs::path(given);
  fs::create_directories(p);
  return p;
}

/// Task names: lm (language modelling), tc, sa (sequence classification), ner (token).
inline bool is_known_task(const std::string& t) { return t == "lm" || t == "tc" || t == "sa" || t == "ner"; }

inline training::TrainObjective task_objective(const std::string& t) {
  if (t == "ner") return training::TrainObjective::token_classification;
  if (t == "tc" || t == "sa") return training::TrainObjective::sequence_classification;
  throw ConfigError("task '" + t + "' is not a classification task (expected tc, sa or ner)");
}

/// Declarative description of one training run. `plan` holds train-plan keys applied over
/// the command's preset.
struct ExperimentConfig {
  std::string model;
  std::string tokenizer;
  adapters::AdapterSpec adapter;
  std::vector<std::string> language_adapters;
  bool fuse = false;
  std::string task = "lm";
  adapters::AdapterSpec task_adapter;
  std::string train;
  std::string val;
  std::optional<std::size_t> length;
  std::string preset;
  nlohmann::json plan = nlohmann::json::object();
  std::string out;
  std::uint64_t seed = 0;

  void validate() const {
    if (!is_known_task(task)) throw ConfigError("config: unknown task '" + task + "' (expected lm, tc, sa or ner)");
    if (!preset.empty() && preset != "glotcc" && preset != "conceptnet")
      throw ConfigError("config: unknown preset '" + preset + "' (expected glotcc or conceptnet)");
    if (length && *length < 3) throw ConfigError("config: length must be >= 3");
    training::TrainPlan probe;
    from_json(plan, probe);
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"model", c.model},     {"tokenizer", c.tokenizer},
                     {"adapter", c.adapter}, {"language_adapters", c.language_adapters},
                     {"fuse", c.fuse},       {"task", c.task},
                     {"task_adapter", c.task_adapter},
                     {"train", c.train},     {"val", c.val},
                     {"preset", c.preset},   {"plan", c.plan},
                     {"out", c.out},         {"seed", c.seed}};
  if (c.length) j["length"] = *c.length;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "model") c.model = v.get<std::string>();
      else if (k == "tokenizer") c.tokenizer = v.get<std::string>();
      else if (k == "adapter") from_json(v, c.adapter);
      else if (k == "language_adapters") c.language_adapters = v.get<std::vector<std::string>>();
      else if (k == "fuse") c.fuse = v.get<bool>();
      else if (k == "task") c.task = v.get<std::string>();
      else if (k == "task_adapter") from_json(v, c.task_adapter);
      else if (k == "train") c.train = v.get<std::string>();
      else if (k == "val") c.val = v.get<std::string>();
      else if (k == "length") c.length = v.get<std::size_t>();
      else if (k == "preset") c.preset = v.get<std::string>();
      else if (k == "plan") {
        if (!v.is_object()) throw ConfigError("config: plan must be a JSON object");
        c.plan = v;
      } else if (k == "out") c.out = v.get<std::string>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("config: unknown key '" + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + k + "': " + e.what());
    }
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig c;
  from_json(read_json_file(path), c);
  return c;
}

}  // namespace peft::cli
