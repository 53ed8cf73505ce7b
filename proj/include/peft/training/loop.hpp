#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "peft/training/optimizer.hpp"

namespace peft::training {

struct ReportRow {
  std::size_t step = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
  std::optional<double> metric;
};

struct TrainReport {
  std::vector<ReportRow> rows;
  std::size_t best_step = 0;  // 0: no evaluation ran
  double best_value = 0.0;    // selection value at best_step
  std::size_t steps_run = 0;
  bool stopped_early = false;
  double wall_seconds = 0.0;

  std::vector<double> losses(const std::string& split) const {
    std::vector<double> out;
    for (const auto& r : rows)
      if (r.split == split) out.push_back(r.loss);
    return out;
  }
};

/// CSV with columns step,split,loss,metric; metric is empty for rows without one.
inline void write_report_csv(const std::string& path, const TrainReport& r) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out.precision(17);
  out << "step,split,loss,metric\n";
  for (const auto& row : r.rows) {
    out << row.step << ',' << row.split << ',' << row.loss << ',';
    if (row.metric) out << *row.metric;
    out << '\n';
  }
}

struct EvalResult {
  double loss = 0.0;
  std::optional<double> metric;
};

/// Selection rule for the kept snapshot.
enum class Select { lowest_loss, highest_metric };

template <class T>
struct LoopHooks {
  /// Builds the loss for optimisation step `step` (1-based) with gradients recorded.
  std::function<ad::Tensor<T>(std::size_t step)> loss;
  /// Validation pass; must not record gradients.
  std::function<EvalResult()> evaluate;
  Select select = Select::lowest_loss;
};

/// Adam over the trainable entries of `params`. Evaluates at every multiple of eval_every,
/// keeps the best snapshot by the selection rule, stops after `patience` evaluations without
/// improvement and restores the best snapshot at the end.
template <class T>
TrainReport run_training(const std::vector<NamedParameter<T>>& params, const TrainPlan& plan,
                         const LoopHooks<T>& hooks) {
  plan.validate();
  const auto start = std::chrono::steady_clock::now();
  AdamState<T> state(params, plan.adam);
  if (state.slots().empty()) throw ConfigError("nothing to train: every parameter is frozen");
  for (const auto& p : params) p.tensor.drop_grad();

  TrainReport report;
  std::vector<std::vector<T>> best;
  std::size_t since_best = 0;
  auto snapshot = [&] {
    best.clear();
    for (const auto& s : state.slots()) best.emplace_back(s.param.values().begin(), s.param.values().end());
  };

  for (std::size_t step = 1; step <= plan.max_steps; ++step) {
    ad::current_tape<T>().clear();
    auto loss = hooks.loss(step);
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) throw NumericalError("non-finite training loss at step " + std::to_string(step));
    ad::backward(loss);
    clip_grad_norm(state, plan.clip_norm);
    adam_step(state, plan.learning_rate);
    for (const auto& p : params) p.tensor.drop_grad();
    report.rows.push_back({step, "train", lv, std::nullopt});
    report.steps_run = step;

    if (step % plan.eval_every != 0) continue;
    const auto ev = hooks.evaluate();
    report.rows.push_back({step, "val", ev.loss, ev.metric});
    double value = ev.loss;
    if (hooks.select == Select::highest_metric) {
      if (!ev.metric) throw ConfigError("metric selection needs an evaluation metric");
      value = *ev.metric;
    }
    const bool improved = report.best_step == 0 ||
                          (hooks.select == Select::lowest_loss ? value < report.best_value : value > report.best_value);
    if (improved) {
      report.best_step = step;
      report.best_value = value;
      since_best = 0;
      snapshot();
    } else if (plan.patience > 0 && ++since_best >= plan.patience) {
      report.stopped_early = true;
      break;
    }
  }
  if (!best.empty())
    for (std::size_t k = 0; k < best.size(); ++k) {
      auto dst = state.slots()[k].param.mutable_values();
      std::copy(best[k].begin(), best[k].end(), dst.begin());
    }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace peft::training
