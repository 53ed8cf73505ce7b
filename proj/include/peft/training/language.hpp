#pragma once

#include <string>
#include <vector>

#include "peft/adapters/adapted_model.hpp"
#include "peft/corpus/batches.hpp"
#include "peft/random.hpp"
#include "peft/training/loop.hpp"

namespace peft::training {

using adapters::AdaptedModel;

/// Tokenised language-modelling data: train and validation windows.
struct LmData {
  corpus::Windows train;
  corpus::Windows val;
  std::size_t vocab_size = 0;
};

inline LmData make_lm_data(const corpus::Tokenizer& tok, const std::vector<std::string>& train_docs,
                           const std::vector<std::string>& val_docs, TrainObjective objective, std::size_t T) {
  LmData d;
  d.vocab_size = tok.vocab_size();
  if (objective == TrainObjective::mlm) {
    d.train = corpus::mlm_windows(tok, train_docs, T);
    d.val = corpus::mlm_windows(tok, val_docs, T);
  } else if (objective == TrainObjective::clm) {
    d.train = corpus::clm_windows(tok, train_docs, T);
    d.val = corpus::clm_windows(tok, val_docs, T);
  } else {
    throw ConfigError("language-model data needs the mlm or clm objective, got " + to_string(objective));
  }
  return d;
}

namespace detail {

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix64(seed ^ (stream << 56)); }

inline constexpr std::uint64_t kBatchStream = 1, kDropoutStream = 2, kEvalStream = 3;

}  // namespace detail

/// Cross-entropy over the corrupted positions of an MLM batch.
template <class T>
ad::Tensor<T> mlm_loss(const AdaptedModel<T>& model, const corpus::MlmBatch& b,
                       const encoder::ForwardContext<T>& ctx = {}) {
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> targets;
  for (std::size_t i = 0; i < b.labels.size(); ++i)
    if (b.labels[i] != corpus::kIgnore) {
      rows.push_back(i);
      targets.push_back(b.labels[i]);
    }
  if (rows.empty()) throw InputError("MLM batch has no masked positions");
  auto hidden = model.encode(b.input, ctx);
  return ad::softmax_cross_entropy(model.mlm_logits_at(hidden, rows, ctx), targets);
}

/// Next-token cross-entropy over every labelled position.
template <class T>
ad::Tensor<T> clm_loss(const AdaptedModel<T>& model, const corpus::ClmBatch& b,
                       const encoder::ForwardContext<T>& ctx = {}) {
  auto hidden = model.encode(b.input, ctx);
  auto logits = model.mlm_logits(hidden, ctx);
  return ad::softmax_cross_entropy(ad::reshape(logits, {b.input.batch * b.input.length, model.config().vocab_size}),
                                   b.labels, corpus::kIgnore);
}

/// Training batch for `step`. An MLM draw that masks nothing is redrawn from a salted seed.
inline corpus::MlmBatch training_mlm_batch(const LmData& d, const TrainPlan& plan, std::size_t step) {
  const auto seed = detail::stream_seed(plan.seed, detail::kBatchStream);
  for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
    auto b = corpus::mlm_batch(d.train, d.vocab_size, plan.batch_size, plan.masking, splitmix64(seed + attempt), step);
    if (b.selected() > 0) return b;
  }
  throw InputError("training windows contain no maskable tokens");
}

inline corpus::ClmBatch training_clm_batch(const LmData& d, const TrainPlan& plan, std::size_t step) {
  return corpus::clm_batch(d.train, plan.batch_size, detail::stream_seed(plan.seed, detail::kBatchStream), step);
}

/// Mean validation loss per predicted token. MLM masks are fixed by the plan seed, so
/// repeated calls score the same positions.
template <class T>
double lm_eval_loss(const AdaptedModel<T>& model, const LmData& d, const TrainPlan& plan) {
  if (d.val.rows.empty()) throw ConfigError("validation set is empty");
  ad::NoGradGuard ng;
  double total = 0.0;
  std::size_t count = 0;
  if (plan.objective == TrainObjective::mlm) {
    const auto batches = corpus::mlm_eval_batches(d.val, d.vocab_size, plan.batch_size, plan.masking,
                                                  detail::stream_seed(plan.seed, detail::kEvalStream));
    for (const auto& b : batches) {
      const auto n = b.selected();
      if (n == 0) continue;
      total += static_cast<double>(mlm_loss(model, b).item()) * static_cast<double>(n);
      count += n;
    }
  } else {
    for (std::size_t s = 0; s < d.val.rows.size(); s += plan.batch_size) {
      std::vector<const std::vector<std::int32_t>*> rows;
      for (std::size_t i = s; i < std::min(d.val.rows.size(), s + plan.batch_size); ++i) rows.push_back(&d.val.rows[i]);
      corpus::ClmBatch b;
      b.input = corpus::pad_rows(rows, d.val.length);
      b.labels = corpus::shifted_labels(b.input);
      std::size_t n = 0;
      for (auto l : b.labels) n += l != corpus::kIgnore;
      if (n == 0) continue;
      total += static_cast<double>(clm_loss(model, b).item()) * static_cast<double>(n);
      count += n;
    }
  }
  if (count == 0) throw ConfigError("validation set has no positions to predict");
  return total / static_cast<double>(count);
}

namespace detail {

template <class T>
TrainReport train_lm(const AdaptedModel<T>& model, const LmData& data, const TrainPlan& plan) {
  plan.validate();
  if (!is_language_modeling(plan.objective))
    throw ConfigError("language-model training needs the mlm or clm objective, got " + to_string(plan.objective));
  const bool causal = model.config().objective == encoder::Objective::clm;
  if (causal != (plan.objective == TrainObjective::clm))
    throw ConfigError("plan objective " + to_string(plan.objective) + " does not match the backbone's " +
                      encoder::to_string(model.config().objective) + " attention");
  if (data.train.rows.empty()) throw ConfigError("training set is empty");
  if (data.val.rows.empty()) throw ConfigError("validation set is empty");
  if (data.vocab_size != model.config().vocab_size)
    throw ConfigError("tokenizer vocabulary " + std::to_string(data.vocab_size) + " does not match backbone vocabulary " +
                      std::to_string(model.config().vocab_size));
  model.apply_freeze_policy(plan.freeze_policy);
  LoopHooks<T> hooks;
  hooks.loss = [&](std::size_t step) {
    auto rng = step_rng(stream_seed(plan.seed, kDropoutStream), step);
    encoder::ForwardContext<T> ctx;
    ctx.training = true;
    ctx.rng = &rng;
    const auto batch_step = plan.overfit_one_batch ? 1 : step;
    if (plan.objective == TrainObjective::mlm) return mlm_loss(model, training_mlm_batch(data, plan, batch_step), ctx);
    return clm_loss(model, training_clm_batch(data, plan, batch_step), ctx);
  };
  hooks.evaluate = [&] { return EvalResult{lm_eval_loss(model, data, plan), std::nullopt}; };
  hooks.select = Select::lowest_loss;
  return run_training(model.parameters(), plan, hooks);
}

}  // namespace detail

/// Trains the single language adapter of `model` with the backbone frozen. The adapter is
/// updated in place and left at its best-validation state.
template <class T>
TrainReport train_language_adapter(const AdaptedModel<T>& model, const LmData& data, const TrainPlan& plan) {
  if (plan.freeze_policy != FreezePolicy::base_frozen)
    throw ConfigError("language-adapter training needs freeze policy base_frozen, got " +
                      adapters::to_string(plan.freeze_policy));
  if (model.language_adapters().size() != 1 || model.fusion() || model.task_adapter())
    throw ConfigError("language-adapter training needs a backbone with exactly one language adapter");
  return detail::train_lm(model, data, plan);
}

/// Language-model training of every backbone parameter.
template <class T>
TrainReport full_finetune(const AdaptedModel<T>& model, const LmData& data, const TrainPlan& plan) {
  if (plan.freeze_policy != FreezePolicy::nothing_frozen)
    throw ConfigError("full fine-tuning needs freeze policy nothing_frozen, got " +
                      adapters::to_string(plan.freeze_policy));
  if (!model.language_adapters().empty() || model.fusion() || model.task_adapter())
    throw ConfigError("full fine-tuning runs on a bare backbone");
  return detail::train_lm(model, data, plan);
}

}  // namespace peft::training
