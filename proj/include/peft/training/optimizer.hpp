#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "peft/encoder/parameters.hpp"
#include "peft/errors.hpp"
#include "peft/training/plan.hpp"

namespace peft::training {

/// Moment buffers for the trainable parameters only, in the order given at construction.
template <class T>
class AdamState {
 public:
  struct Slot {
    std::string name;
    ad::Tensor<T> param;
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamState() = default;
  AdamState(const std::vector<NamedParameter<T>>& params, const AdamOptions& opt = {}) : opt_(opt) {
    for (const auto& p : params)
      if (p.tensor.requires_grad()) slots_.push_back({p.name, p.tensor, std::vector<double>(p.tensor.numel()),
                                                      std::vector<double>(p.tensor.numel())});
  }

  const AdamOptions& options() const { return opt_; }
  std::size_t step() const { return step_; }
  const std::vector<Slot>& slots() const { return slots_; }
  std::vector<Slot>& slots() { return slots_; }
  void advance() { ++step_; }

 private:
  AdamOptions opt_;
  std::size_t step_ = 0;
  std::vector<Slot> slots_;
};

/// Raises NumericalError naming the first parameter with a non-finite gradient.
template <class T>
void check_gradients(const AdamState<T>& state, std::size_t step) {
  for (const auto& s : state.slots()) {
    auto g = s.param.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NumericalError("non-finite gradient in '" + s.name + "' at element " + std::to_string(i) +
                             " (step " + std::to_string(step) + ")");
  }
}

/// Global L2 norm of the gradients; scales them to `max_norm` when larger. Returns the norm
/// before scaling.
template <class T>
double clip_grad_norm(const AdamState<T>& state, double max_norm) {
  double sq = 0.0;
  for (const auto& s : state.slots())
    for (auto g : s.param.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& s : state.slots())
      if (s.param.has_grad())
        for (auto& g : s.param.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * f);
  }
  return norm;
}

/// One bias-corrected Adam update. Parameters without a gradient are treated as having
/// zero gradient.
template <class T>
void adam_step(AdamState<T>& state, double lr) {
  check_gradients(state, state.step() + 1);
  state.advance();
  const auto& o = state.options();
  const double t = static_cast<double>(state.step());
  const double c1 = 1.0 - std::pow(o.beta1, t), c2 = 1.0 - std::pow(o.beta2, t);
  for (auto& s : state.slots()) {
    auto values = s.param.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = static_cast<double>(s.param.grad_at(i));
      s.m[i] = o.beta1 * s.m[i] + (1.0 - o.beta1) * g;
      s.v[i] = o.beta2 * s.v[i] + (1.0 - o.beta2) * g * g;
      const double update = lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + o.eps);
      values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
    }
  }
}

}  // namespace peft::training
