#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "peft/adapters/spec.hpp"
#include "peft/diffengine/ops.hpp"
#include "peft/encoder/model.hpp"

namespace peft::adapters {

using ad::Tensor;
using encoder::EncoderModel;
using encoder::ForwardContext;
using encoder::TokenBatch;

/// One adapter's parameters and the functions they implement: residual bottlenecks after
/// each feed-forward sublayer, an additive coupling block around the embeddings, and/or
/// low-rank updates on attention projections.
template <class T>
class Adapter {
 public:
  Adapter(AdapterSpec spec, EncoderConfig geometry, ParameterStore<T> params)
      : spec_(std::move(spec)), geometry_(std::move(geometry)), params_(std::move(params)) {
    spec_.validate(geometry_);
    for (const auto& d : adapter_layout(geometry_, spec_)) {
      if (!params_.contains(d.name)) throw FormatError("adapter is missing parameter '" + d.name + "'");
      if (params_.get(d.name).shape() != d.shape)
        throw FormatError("adapter parameter '" + d.name + "' has the wrong shape");
    }
  }

  /// Down-projections, coupling input layers and LoRA A are normal(0, init_std); every
  /// output-side matrix (bottleneck up, coupling out, LoRA B) starts at zero.
  static Adapter create(const AdapterSpec& spec, const EncoderConfig& geometry, std::uint64_t seed) {
    spec.validate(geometry);
    std::mt19937_64 rng(seed);
    ParameterStore<T> store;
    store.add_all(adapter_layout(geometry, spec), geometry.init_std, rng);
    return Adapter(spec, geometry, std::move(store));
  }

  const AdapterSpec& spec() const { return spec_; }
  const EncoderConfig& geometry() const { return geometry_; }
  const ParameterStore<T>& params() const { return params_; }
  ParameterStore<T>& params() { return params_; }

  /// f + up(gelu(down(f)))
  Tensor<T> bottleneck(std::size_t layer, const Tensor<T>& f) const {
    const auto p = "bottleneck." + std::to_string(layer) + ".";
    const auto& db = params_.get(p + "down.bias");
    const auto& ub = params_.get(p + "up.bias");
    auto z = ad::gelu(ad::linear(f, params_.get(p + "down.weight"), &db));
    return ad::add(f, ad::linear(z, params_.get(p + "up.weight"), &ub));
  }

  /// (α/r)·(x·A)·B for a targeted projection.
  Tensor<T> lora_delta(std::size_t layer, Projection which, const Tensor<T>& x) const {
    const auto p = "lora." + std::to_string(layer) + "." + encoder::to_string(which) + ".";
    auto low = ad::matmul(ad::reshape(x, {x.numel() / geometry_.hidden, geometry_.hidden}), params_.get(p + "a"));
    auto delta = ad::matmul(low, params_.get(p + "b"));
    return ad::scale(delta, static_cast<T>(spec_.lora_alpha / static_cast<double>(spec_.lora_rank)));
  }

  Tensor<T> coupling_f(const Tensor<T>& x) const { return coupling_map("invertible.f.", x); }
  Tensor<T> coupling_g(const Tensor<T>& x) const { return coupling_map("invertible.g.", x); }

 private:
  Tensor<T> coupling_map(const std::string& p, const Tensor<T>& x) const {
    const auto& ib = params_.get(p + "in.bias");
    const auto& ob = params_.get(p + "out.bias");
    auto z = ad::gelu(ad::linear(x, params_.get(p + "in.weight"), &ib));
    return ad::linear(z, params_.get(p + "out.weight"), &ob);
  }

  AdapterSpec spec_;
  EncoderConfig geometry_;
  ParameterStore<T> params_;
};

/// Additive coupling: o₁ = e₁ + F(e₂), o₂ = e₂ + G(o₁).
template <class T>
Tensor<T> invertible_forward(const Adapter<T>& state, const Tensor<T>& e) {
  if (!state.spec().has_coupling()) throw ConfigError("adapter has no invertible coupling block");
  const auto h = state.geometry().hidden;
  const auto a = state.spec().split_width(h);
  auto halves = ad::split_last_dim(e, {a, h - a});
  auto o1 = ad::add(halves[0], state.coupling_f(halves[1]));
  auto o2 = ad::add(halves[1], state.coupling_g(o1));
  return ad::concat_last_dim<T>({o1, o2});
}

/// Exact inverse: e₂ = o₂ − G(o₁), e₁ = o₁ − F(e₂).
template <class T>
Tensor<T> invertible_inverse(const Adapter<T>& state, const Tensor<T>& o) {
  if (!state.spec().has_coupling()) throw ConfigError("adapter has no invertible coupling block");
  const auto h = state.geometry().hidden;
  const auto a = state.spec().split_width(h);
  auto halves = ad::split_last_dim(o, {a, h - a});
  auto e2 = ad::sub(halves[1], state.coupling_g(halves[0]));
  auto e1 = ad::sub(halves[0], state.coupling_f(e2));
  return ad::concat_last_dim<T>({e1, e2});
}

/// Attention over member-adapter outputs; query from the feed-forward output.
template <class T>
class Fusion {
 public:
  Fusion(EncoderConfig geometry, std::size_t members, ParameterStore<T> params)
      : geometry_(std::move(geometry)), members_(members), params_(std::move(params)) {
    for (const auto& d : fusion_layout(geometry_))
      if (!params_.contains(d.name) || params_.get(d.name).shape() != d.shape)
        throw FormatError("fusion parameters do not match geometry at '" + d.name + "'");
  }

  /// Query/key normal(0, init_std), value projection identity, zero biases.
  static Fusion create(const EncoderConfig& geometry, std::size_t members, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParameterStore<T> store;
    store.add_all(fusion_layout(geometry), geometry.init_std, rng);
    return Fusion(geometry, members, std::move(store));
  }

  std::size_t members() const { return members_; }
  const ParameterStore<T>& params() const { return params_; }
  ParameterStore<T>& params() { return params_; }

  /// query [N×H], outputs: one [N×H] per member. Returns the mixed [N×H].
  Tensor<T> mix(std::size_t layer, const Tensor<T>& query, const std::vector<Tensor<T>>& outputs,
                const ForwardContext<T>& ctx) const {
    if (outputs.size() != members_)
      throw ConfigError("fusion built for " + std::to_string(members_) + " members, got " +
                        std::to_string(outputs.size()));
    const auto h = geometry_.hidden, n = query.dim(0), m = outputs.size();
    const auto p = "layers." + std::to_string(layer) + ".";
    const auto& qb = params_.get(p + "query.bias");
    const auto& kb = params_.get(p + "key.bias");
    const auto& vb = params_.get(p + "value.bias");
    auto q = ad::reshape(ad::linear(query, params_.get(p + "query.weight"), &qb), {n, 1, h});
    auto stacked = ad::reshape(ad::concat_last_dim(outputs), {n * m, h});
    auto k = ad::reshape(ad::linear(stacked, params_.get(p + "key.weight"), &kb), {n, m, h});
    auto v = ad::reshape(ad::linear(stacked, params_.get(p + "value.weight"), &vb), {n, m, h});
    auto weights = ad::softmax_last(ad::bmm(q, ad::transpose(k, 1, 2)));
    if (ctx.probe) ctx.probe->fusion_weights.push_back(weights);
    return ad::reshape(ad::bmm(weights, v), {n, h});
  }

 private:
  EncoderConfig geometry_;
  std::size_t members_;
  ParameterStore<T> params_;
};

enum class FreezePolicy { base_frozen, base_and_la_frozen, nothing_frozen };

inline std::string to_string(FreezePolicy p) {
  switch (p) {
    case FreezePolicy::base_frozen: return "base_frozen";
    case FreezePolicy::base_and_la_frozen: return "base+LA_frozen";
    case FreezePolicy::nothing_frozen: return "nothing_frozen";
  }
  return "?";
}

inline FreezePolicy freeze_policy_from_string(const std::string& s) {
  if (s == "base_frozen") return FreezePolicy::base_frozen;
  if (s == "base+LA_frozen" || s == "base_and_la_frozen") return FreezePolicy::base_and_la_frozen;
  if (s == "nothing_frozen") return FreezePolicy::nothing_frozen;
  throw ConfigError("unknown freeze policy '" + s + "'");
}

/// A backbone view with optional language adapters, fusion and task adapter.
/// Per layer the feed-forward output passes language adapter (or fusion of several)
/// then task adapter, then the residual add & norm. Views share the backbone.
template <class T>
class AdaptedModel : public encoder::EncoderHooks<T> {
 public:
  explicit AdaptedModel(std::shared_ptr<EncoderModel<T>> base) : base_(std::move(base)) {
    if (!base_) throw ConfigError("adapted model needs a backbone");
  }

  const EncoderModel<T>& base() const { return *base_; }
  const std::shared_ptr<EncoderModel<T>>& base_ptr() const { return base_; }
  const EncoderConfig& config() const { return base_->config(); }

  const std::vector<std::shared_ptr<Adapter<T>>>& language_adapters() const { return language_; }
  const std::shared_ptr<Fusion<T>>& fusion() const { return fusion_; }
  const std::shared_ptr<Adapter<T>>& task_adapter() const { return task_; }

  void add_language_adapter(std::shared_ptr<Adapter<T>> a) { language_.push_back(std::move(a)); }
  void set_fusion(std::shared_ptr<Fusion<T>> f) { fusion_ = std::move(f); }
  void set_task_adapter(std::shared_ptr<Adapter<T>> a) { task_ = std::move(a); }

  Tensor<T> encode(const TokenBatch& batch, const ForwardContext<T>& ctx = {}) const {
    return encoder::encode(*base_, batch, *this, ctx);
  }
  Tensor<T> mlm_logits(const Tensor<T>& hidden, const ForwardContext<T>& ctx = {}) const {
    return encoder::mlm_logits(*base_, hidden, *this, ctx);
  }
  Tensor<T> mlm_logits_at(const Tensor<T>& hidden, std::span<const std::size_t> rows,
                          const ForwardContext<T>& ctx = {}) const {
    return encoder::mlm_logits_at(*base_, hidden, rows, *this, ctx);
  }

  /// Every parameter with a view-qualified name: encoder.*, la.<k>.*, fusion.*, task.*.
  std::vector<NamedParameter<T>> parameters() const {
    std::vector<NamedParameter<T>> out;
    auto push = [&](const std::string& prefix, const ParameterStore<T>& store) {
      for (const auto& e : store.entries()) out.push_back({prefix + "." + e.name, e.tensor});
    };
    push("encoder", base_->params());
    for (std::size_t k = 0; k < language_.size(); ++k) push("la." + std::to_string(k), language_[k]->params());
    if (fusion_) push("fusion", fusion_->params());
    if (task_) push("task", task_->params());
    return out;
  }

  void apply_freeze_policy(FreezePolicy policy) const {
    const bool base_trainable = policy == FreezePolicy::nothing_frozen;
    const bool la_trainable = policy != FreezePolicy::base_and_la_frozen;
    for (const auto& e : base_->params().entries()) ad::Tensor<T>(e.tensor).set_requires_grad(base_trainable);
    for (const auto& la : language_)
      for (const auto& e : la->params().entries()) ad::Tensor<T>(e.tensor).set_requires_grad(la_trainable);
    if (fusion_)
      for (const auto& e : fusion_->params().entries()) ad::Tensor<T>(e.tensor).set_requires_grad(true);
    if (task_)
      for (const auto& e : task_->params().entries()) ad::Tensor<T>(e.tensor).set_requires_grad(true);
  }

  // --- hooks -------------------------------------------------------------

  Tensor<T> after_embeddings(const Tensor<T>& e, const ForwardContext<T>&) const override {
    if (auto la = single_language(); la && la->spec().has_coupling()) return invertible_forward(*la, e);
    return e;
  }

  Tensor<T> adjust_projection(std::size_t layer, Projection which, const Tensor<T>& input, Tensor<T> output,
                              const ForwardContext<T>&) const override {
    if (auto la = single_language(); la && la->spec().targets(which))
      return ad::add(output, la->lora_delta(layer, which, input));
    return output;
  }

  Tensor<T> after_ffn(std::size_t layer, const Tensor<T>& f, const ForwardContext<T>& ctx) const override {
    Tensor<T> out = f;
    if (fusion_) {
      std::vector<Tensor<T>> outputs;
      for (const auto& la : language_) outputs.push_back(la->bottleneck(layer, f));
      out = fusion_->mix(layer, f, outputs, ctx);
    } else if (auto la = single_language(); la && la->spec().has_bottleneck()) {
      out = la->bottleneck(layer, f);
    }
    if (task_) out = task_->bottleneck(layer, out);
    return out;
  }

  Tensor<T> before_output_projection(const Tensor<T>& h, const ForwardContext<T>&) const override {
    if (auto la = single_language(); la && la->spec().has_coupling()) return invertible_inverse(*la, h);
    return h;
  }

 private:
  const Adapter<T>* single_language() const {
    return (!fusion_ && language_.size() == 1) ? language_.front().get() : nullptr;
  }

  std::shared_ptr<EncoderModel<T>> base_;
  std::vector<std::shared_ptr<Adapter<T>>> language_;
  std::shared_ptr<Fusion<T>> fusion_;
  std::shared_ptr<Adapter<T>> task_;
};

/// Backbone with one freshly initialised language adapter; backbone frozen.
template <class T>
AdaptedModel<T> attach_adapter(std::shared_ptr<EncoderModel<T>> model, const AdapterSpec& spec,
                               std::uint64_t seed) {
  spec.validate(model->config());
  AdaptedModel<T> out(model);
  out.add_language_adapter(std::make_shared<Adapter<T>>(Adapter<T>::create(spec, model->config(), seed)));
  out.apply_freeze_policy(FreezePolicy::base_frozen);
  return out;
}

/// Adds a task adapter (bottleneck family only). Backbone and language adapters frozen.
/// Stacking onto a bare backbone view gives the single-task-adapter baseline.
template <class T>
AdaptedModel<T> stack_task_adapter(const AdaptedModel<T>& adapted, const AdapterSpec& task_spec,
                                   std::uint64_t seed) {
  if (task_spec.family != Family::seq_bn) throw ConfigError("task adapters must use the seq_bn family");
  if (adapted.task_adapter()) throw ConfigError("model already carries a task adapter");
  task_spec.validate(adapted.config());
  AdaptedModel<T> out = adapted;
  out.set_task_adapter(std::make_shared<Adapter<T>>(Adapter<T>::create(task_spec, adapted.config(), seed)));
  out.apply_freeze_policy(FreezePolicy::base_and_la_frozen);
  return out;
}

/// Fuses the language adapters of several views of one backbone. Members must be plain
/// bottleneck adapters; members and backbone are frozen, fusion parameters trainable.
template <class T>
AdaptedModel<T> fuse(const std::vector<AdaptedModel<T>>& members, std::uint64_t fusion_seed) {
  if (members.empty()) throw ConfigError("fusion needs at least one member");
  const auto& base = members.front().base_ptr();
  AdaptedModel<T> out(base);
  for (const auto& m : members) {
    if (m.base_ptr() != base) throw ConfigError("fusion members do not share one backbone");
    if (m.fusion() || m.task_adapter() || m.language_adapters().size() != 1)
      throw ConfigError("each fusion member must be a backbone with exactly one language adapter");
    const auto& la = m.language_adapters().front();
    if (la->spec().family != Family::seq_bn)
      throw ConfigError("fusion members must be seq_bn adapters, got " + to_string(la->spec().family));
    out.add_language_adapter(la);
  }
  out.set_fusion(std::make_shared<Fusion<T>>(Fusion<T>::create(base->config(), members.size(), fusion_seed)));
  out.apply_freeze_policy(FreezePolicy::base_and_la_frozen);
  return out;
}

/// Exact count of parameters not matched by the freeze mask.
template <class T>
std::size_t count_trainable(const AdaptedModel<T>& model, const FreezeMask& mask) {
  std::size_t n = 0;
  for (const auto& p : model.parameters())
    if (!mask.frozen(p.name)) n += p.tensor.numel();
  return n;
}

/// Count of parameters currently marked trainable.
template <class T>
std::size_t count_trainable(const AdaptedModel<T>& model) {
  return count_requires_grad(model.parameters());
}

}  // namespace peft::adapters
