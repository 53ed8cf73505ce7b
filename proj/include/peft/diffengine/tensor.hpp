#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "peft/errors.hpp"

// Finite-value checks on every op output; on by default in debug builds.
#if !defined(PEFT_CHECK_FINITE) && !defined(NDEBUG)
#define PEFT_CHECK_FINITE 1
#endif

namespace peft::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::uint64_t id = next_node_id();

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Shared handle to a dense row-major array with an optional gradient slot.
/// Constness is shallow, as with shared_ptr.
/// Copies alias the same storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor extents must be positive: " + to_string(shape));
    if (numel_of(shape) != values.size())
      throw DimensionError("shape " + to_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    auto n = numel_of(shape);
    return from(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() const { return node_->value; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Empty span when no gradient has been accumulated.
  std::span<const T> grad() const {
    if (!has_grad()) return {};
    return node_->grad;
  }
  std::span<T> mutable_grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  /// Gradient value with absent slots read as zero.
  T grad_at(std::size_t i) const { return has_grad() ? node_->grad[i] : T(0); }
  void zero_grad() const { node_->grad.assign(node_->value.size(), T(0)); }
  void drop_grad() const { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }

  std::uint64_t id() const { return node_->id; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Deep copy without gradient or tape history.
  Tensor clone(bool requires_grad = false) const {
    return from(shape(), node_->value, requires_grad);
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
struct TapeRecord {
  std::string_view op;
  std::vector<std::uint64_t> inputs;
  std::shared_ptr<Node<T>> output;
  std::function<void(const std::vector<T>& out_grad)> backward;
};

/// Define-by-run record of differentiable ops, replayed in reverse by backward().
/// Records are appended in execution order, so every input of record k is either a
/// leaf or the output of an earlier record.
template <class T>
class Tape {
 public:
  void push(TapeRecord<T> rec) { records_.push_back(std::move(rec)); }
  std::size_t size() const { return records_.size(); }
  const std::vector<TapeRecord<T>>& records() const { return records_; }
  void clear() { records_.clear(); }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw DimensionError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    if (!loss.requires_grad()) {
      clear();
      return;
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      const auto& out = *it->output;
      if (out.grad.size() != out.value.size()) continue;
      it->backward(out.grad);
    }
    clear();
  }

 private:
  std::vector<TapeRecord<T>> records_;
};

template <class T>
Tape<T>& current_tape() {
  thread_local Tape<T> tape;
  return tape;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables tape recording for its lifetime (evaluation paths).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
void backward(const Tensor<T>& loss) {
  current_tape<T>().backward(loss);
}

namespace detail {

template <class T>
void check_finite(std::string_view op, const std::vector<T>& values) {
#if PEFT_CHECK_FINITE
  for (const auto& v : values)
    if (!std::isfinite(v)) throw NumericalError("non-finite value produced by " + std::string(op));
#else
  (void)op;
  (void)values;
#endif
}

/// Builds an op result and, when any input needs a gradient, records `bw` on the tape.
/// `bw` receives the output gradient and accumulates into its captured inputs.
template <class T, class Backward>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& bw) {
  check_finite(op, values);
  auto out = Tensor<T>::from(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (auto* in : inputs) needs = needs || in->requires_grad();
  if (!needs) return out;
  out.set_requires_grad(true);
  TapeRecord<T> rec;
  rec.op = op;
  for (auto* in : inputs) rec.inputs.push_back(in->id());
  rec.output = out.node();
  rec.backward = std::forward<Backward>(bw);
  current_tape<T>().push(std::move(rec));
  return out;
}

/// Variadic-input form for ops such as concat.
template <class T, class Backward>
Tensor<T> make_result_n(std::string_view op, Shape shape, std::vector<T> values,
                        const std::vector<Tensor<T>>& inputs, Backward&& bw) {
  check_finite(op, values);
  auto out = Tensor<T>::from(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  out.set_requires_grad(true);
  TapeRecord<T> rec;
  rec.op = op;
  for (const auto& in : inputs) rec.inputs.push_back(in.id());
  rec.output = out.node();
  rec.backward = std::forward<Backward>(bw);
  current_tape<T>().push(std::move(rec));
  return out;
}

}  // namespace detail
}  // namespace peft::ad
