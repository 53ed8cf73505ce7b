#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "peft/diffengine/ops.hpp"
#include "peft/encoder/config.hpp"
#include "peft/encoder/parameters.hpp"

namespace peft::encoder {

using ad::Tensor;

/// Padded batch of token ids, row-major [batch × length].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> attention_mask;  // 1 = real token
  std::vector<std::int32_t> type_ids;        // empty = all zero

  void validate() const {
    if (batch == 0 || length == 0) throw InputError("token batch must be non-empty");
    if (ids.size() != batch * length || attention_mask.size() != batch * length)
      throw InputError("token batch buffers do not match batch x length");
    if (!type_ids.empty() && type_ids.size() != batch * length)
      throw InputError("token batch type ids do not match batch x length");
  }
};

/// Optional capture of intermediate tensors for inspection.
template <class T>
struct Probe {
  std::vector<Tensor<T>> attention;       // per layer, [B, heads, T, T]
  std::vector<Tensor<T>> fusion_weights;  // per layer, [rows, 1, members]
};

template <class T>
struct ForwardContext {
  bool training = false;  // enables dropout
  std::mt19937_64* rng = nullptr;
  Probe<T>* probe = nullptr;
};

enum class Projection { query = 0, key = 1, value = 2, output = 3 };

inline const char* to_string(Projection p) {
  switch (p) {
    case Projection::query: return "query";
    case Projection::key: return "key";
    case Projection::value: return "value";
    case Projection::output: return "output";
  }
  return "?";
}

/// Attachment points for adapters. The defaults leave the encoder unchanged.
template <class T>
class EncoderHooks {
 public:
  virtual ~EncoderHooks() = default;
  /// Output of the embedding block, [rows × H].
  virtual Tensor<T> after_embeddings(const Tensor<T>& e, const ForwardContext<T>&) const { return e; }
  /// `output` = input·W + b for one attention projection.
  virtual Tensor<T> adjust_projection(std::size_t /*layer*/, Projection, const Tensor<T>& /*input*/,
                                      Tensor<T> output, const ForwardContext<T>&) const {
    return output;
  }
  /// Feed-forward sublayer output before the residual add & norm.
  virtual Tensor<T> after_ffn(std::size_t /*layer*/, const Tensor<T>& f, const ForwardContext<T>&) const {
    return f;
  }
  /// MLM transform output right before the tied vocabulary projection.
  virtual Tensor<T> before_output_projection(const Tensor<T>& h, const ForwardContext<T>&) const {
    return h;
  }
};

inline ParameterLayout encoder_layout(const EncoderConfig& c) {
  const auto h = c.hidden, f = c.ff_dim;
  ParameterLayout l;
  l.push_back({"embeddings.token.weight", {c.vocab_size, h}, Init::normal});
  l.push_back({"embeddings.position.weight", {c.max_positions, h}, Init::normal});
  l.push_back({"embeddings.type.weight", {c.type_vocab, h}, Init::normal});
  l.push_back({"embeddings.norm.gamma", {h}, Init::ones});
  l.push_back({"embeddings.norm.beta", {h}, Init::zeros});
  for (std::size_t i = 0; i < c.layers; ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    for (auto proj : {"query", "key", "value", "output"}) {
      l.push_back({p + "attention." + proj + ".weight", {h, h}, Init::normal});
      l.push_back({p + "attention." + proj + ".bias", {h}, Init::zeros});
    }
    l.push_back({p + "attention_norm.gamma", {h}, Init::ones});
    l.push_back({p + "attention_norm.beta", {h}, Init::zeros});
    l.push_back({p + "ffn.up.weight", {h, f}, Init::normal});
    l.push_back({p + "ffn.up.bias", {f}, Init::zeros});
    l.push_back({p + "ffn.down.weight", {f, h}, Init::normal});
    l.push_back({p + "ffn.down.bias", {h}, Init::zeros});
    l.push_back({p + "ffn_norm.gamma", {h}, Init::ones});
    l.push_back({p + "ffn_norm.beta", {h}, Init::zeros});
  }
  l.push_back({"mlm_head.transform.weight", {h, h}, Init::normal});
  l.push_back({"mlm_head.transform.bias", {h}, Init::zeros});
  l.push_back({"mlm_head.norm.gamma", {h}, Init::ones});
  l.push_back({"mlm_head.norm.beta", {h}, Init::zeros});
  l.push_back({"mlm_head.output.bias", {c.vocab_size}, Init::zeros});
  return l;
}

/// Backbone parameters only (embeddings and layers, no MLM head).
inline ParameterLayout backbone_layout(const EncoderConfig& c) {
  ParameterLayout out;
  for (auto& d : encoder_layout(c))
    if (!under_prefix(d.name, "mlm_head")) out.push_back(d);
  return out;
}

template <class T>
class EncoderModel {
 public:
  EncoderModel(EncoderConfig config, ParameterStore<T> params)
      : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    for (const auto& d : encoder_layout(config_)) {
      if (!params_.contains(d.name)) throw FormatError("encoder is missing parameter '" + d.name + "'");
      if (params_.get(d.name).shape() != d.shape)
        throw FormatError("encoder parameter '" + d.name + "' has shape " +
                          ad::to_string(params_.get(d.name).shape()) + ", expected " +
                          ad::to_string(d.shape));
    }
  }

  const EncoderConfig& config() const { return config_; }
  const ParameterStore<T>& params() const { return params_; }
  ParameterStore<T>& params() { return params_; }
  const Tensor<T>& p(const std::string& name) const { return params_.get(name); }
  const Tensor<T>& layer_p(std::size_t layer, const std::string& rest) const {
    return params_.get("layers." + std::to_string(layer) + "." + rest);
  }

 private:
  EncoderConfig config_;
  ParameterStore<T> params_;
};

/// Normal(0, init_std) weights and embeddings, zero biases, unit layer-norm gains,
/// drawn in layout order from mt19937_64(seed).
template <class T>
EncoderModel<T> build_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParameterStore<T> store;
  store.add_all(encoder_layout(config), config.init_std, rng);
  return EncoderModel<T>(config, std::move(store));
}

namespace detail {

template <class T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double p, const ForwardContext<T>& ctx) {
  if (!ctx.training || p <= 0.0) return x;
  if (!ctx.rng) throw ConfigError("training forward pass needs an rng for dropout");
  return ad::dropout(x, p, *ctx.rng);
}

template <class T>
Tensor<T> attention_projection(const EncoderModel<T>& m, std::size_t layer, Projection which,
                               const Tensor<T>& x, const EncoderHooks<T>& hooks,
                               const ForwardContext<T>& ctx) {
  const std::string base = std::string("attention.") + to_string(which);
  const auto& b = m.layer_p(layer, base + ".bias");
  auto out = ad::linear(x, m.layer_p(layer, base + ".weight"), &b);
  return hooks.adjust_projection(layer, which, x, std::move(out), ctx);
}

template <class T>
Tensor<T> self_attention(const EncoderModel<T>& m, std::size_t layer, const Tensor<T>& x,
                         const TokenBatch& batch, const EncoderHooks<T>& hooks,
                         const ForwardContext<T>& ctx) {
  const auto& c = m.config();
  const auto b = batch.batch, t = batch.length, nh = c.heads, dh = c.head_dim();
  auto split_heads = [&](const Tensor<T>& y) {
    // [B·T, H] -> [B·heads, T, dh]
    auto r = ad::reshape(y, {b, t, nh, dh});
    return ad::reshape(ad::transpose(r, 1, 2), {b * nh, t, dh});
  };
  auto q = split_heads(attention_projection(m, layer, Projection::query, x, hooks, ctx));
  auto k = split_heads(attention_projection(m, layer, Projection::key, x, hooks, ctx));
  auto v = split_heads(attention_projection(m, layer, Projection::value, x, hooks, ctx));
  auto scores = ad::scale(ad::bmm(q, ad::transpose(k, 1, 2)), T(1) / std::sqrt(static_cast<T>(dh)));
  auto probs = ad::masked_softmax(ad::reshape(scores, {b, nh, t, t}), batch.attention_mask,
                                  c.objective == Objective::clm);
  if (ctx.probe) ctx.probe->attention.push_back(probs);
  auto context = ad::bmm(ad::reshape(probs, {b * nh, t, t}), v);
  auto merged = ad::reshape(ad::transpose(ad::reshape(context, {b, nh, t, dh}), 1, 2), {b * t, c.hidden});
  return attention_projection(m, layer, Projection::output, merged, hooks, ctx);
}

}  // namespace detail

/// Post-layer-norm encoder stack. Returns hidden states [B × T × H].
template <class T>
Tensor<T> encode(const EncoderModel<T>& model, const TokenBatch& batch,
                 const EncoderHooks<T>& hooks = EncoderHooks<T>{},
                 const ForwardContext<T>& ctx = ForwardContext<T>{}) {
  batch.validate();
  const auto& c = model.config();
  if (batch.length > c.max_positions)
    throw InputError("sequence length " + std::to_string(batch.length) + " exceeds max_positions " +
                     std::to_string(c.max_positions));
  for (auto id : batch.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size)
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(c.vocab_size));
  const auto rows = batch.batch * batch.length;
  std::vector<std::int32_t> positions(rows);
  for (std::size_t r = 0; r < rows; ++r) positions[r] = static_cast<std::int32_t>(r % batch.length);
  std::vector<std::int32_t> types = batch.type_ids.empty() ? std::vector<std::int32_t>(rows, 0) : batch.type_ids;

  auto emb = ad::add(ad::add(ad::embedding_lookup(model.p("embeddings.token.weight"), batch.ids),
                             ad::embedding_lookup(model.p("embeddings.position.weight"), positions)),
                     ad::embedding_lookup(model.p("embeddings.type.weight"), types));
  const T eps = static_cast<T>(c.layer_norm_eps);
  auto h = ad::layer_norm(emb, model.p("embeddings.norm.gamma"), model.p("embeddings.norm.beta"), eps);
  h = detail::maybe_dropout(h, c.dropout, ctx);
  h = hooks.after_embeddings(h, ctx);

  for (std::size_t i = 0; i < c.layers; ++i) {
    auto attn = detail::maybe_dropout(detail::self_attention(model, i, h, batch, hooks, ctx), c.dropout, ctx);
    auto a = ad::layer_norm(ad::add(h, attn), model.layer_p(i, "attention_norm.gamma"),
                            model.layer_p(i, "attention_norm.beta"), eps);
    const auto& up_b = model.layer_p(i, "ffn.up.bias");
    const auto& down_b = model.layer_p(i, "ffn.down.bias");
    auto f = ad::linear(ad::gelu(ad::linear(a, model.layer_p(i, "ffn.up.weight"), &up_b)),
                        model.layer_p(i, "ffn.down.weight"), &down_b);
    f = detail::maybe_dropout(f, c.dropout, ctx);
    f = hooks.after_ffn(i, f, ctx);
    h = ad::layer_norm(ad::add(a, f), model.layer_p(i, "ffn_norm.gamma"), model.layer_p(i, "ffn_norm.beta"), eps);
  }
  return ad::reshape(h, {batch.batch, batch.length, c.hidden});
}

/// MLM logits for rows of `hidden` (any shape ending in H); the vocabulary projection is
/// the transposed token-embedding table plus an output bias.
template <class T>
Tensor<T> mlm_logits(const EncoderModel<T>& model, const Tensor<T>& hidden,
                     const EncoderHooks<T>& hooks = EncoderHooks<T>{},
                     const ForwardContext<T>& ctx = ForwardContext<T>{}) {
  const auto& c = model.config();
  if (hidden.shape().back() != c.hidden)
    throw DimensionError("mlm_logits: hidden width " + std::to_string(hidden.shape().back()) +
                         " != " + std::to_string(c.hidden));
  auto flat = ad::reshape(hidden, {hidden.numel() / c.hidden, c.hidden});
  const auto& tb = model.p("mlm_head.transform.bias");
  auto t = ad::gelu(ad::linear(flat, model.p("mlm_head.transform.weight"), &tb));
  t = ad::layer_norm(t, model.p("mlm_head.norm.gamma"), model.p("mlm_head.norm.beta"),
                     static_cast<T>(c.layer_norm_eps));
  t = hooks.before_output_projection(t, ctx);
  auto logits = ad::add(ad::matmul_nt(t, model.p("embeddings.token.weight")), model.p("mlm_head.output.bias"));
  ad::Shape shape = hidden.shape();
  shape.back() = c.vocab_size;
  return ad::reshape(logits, std::move(shape));
}

/// MLM logits [rows.size() × V] for the selected flat positions of `hidden`.
template <class T>
Tensor<T> mlm_logits_at(const EncoderModel<T>& model, const Tensor<T>& hidden,
                        std::span<const std::size_t> rows,
                        const EncoderHooks<T>& hooks = EncoderHooks<T>{},
                        const ForwardContext<T>& ctx = ForwardContext<T>{}) {
  return mlm_logits(model, ad::select_rows(hidden, rows), hooks, ctx);
}

/// Zeroes the MLM head's norm affine and output bias so every position predicts the uniform
/// distribution over the vocabulary, whatever the input.
template <class T>
void make_mlm_head_uniform(const EncoderModel<T>& model) {
  for (const char* name : {"mlm_head.norm.gamma", "mlm_head.norm.beta", "mlm_head.output.bias"})
    for (auto& v : model.p(name).mutable_values()) v = T(0);
}

enum class HeadKind { sequence, token };

/// Trainable classification head: a single projection H → C.
template <class T>
struct ClassificationHead {
  HeadKind kind = HeadKind::sequence;
  std::vector<std::string> labels;
  ParameterStore<T> params;  // "weight" [H×C], "bias" [C]

  std::size_t classes() const { return labels.size(); }
};

template <class T>
ClassificationHead<T> make_head(const EncoderConfig& config, HeadKind kind,
                                std::vector<std::string> labels, std::uint64_t seed) {
  if (labels.size() < 2)
    throw ConfigError("classification head needs at least 2 classes, got " + std::to_string(labels.size()));
  ClassificationHead<T> head;
  head.kind = kind;
  head.labels = std::move(labels);
  std::mt19937_64 rng(seed);
  head.params.add_all({{"weight", {config.hidden, head.labels.size()}, Init::normal},
                       {"bias", {head.labels.size()}, Init::zeros}},
                      config.init_std, rng);
  return head;
}

/// Sequence logits [B × C] from the first-position hidden state.
template <class T>
Tensor<T> classify(const EncoderModel<T>& model, const ClassificationHead<T>& head, const Tensor<T>& hidden) {
  if (hidden.rank() != 3 || hidden.dim(2) != model.config().hidden)
    throw DimensionError("classify: expected hidden [B,T,H], got " + ad::to_string(hidden.shape()));
  if (head.classes() < 2) throw ConfigError("classification head needs at least 2 classes");
  const auto b = hidden.dim(0), t = hidden.dim(1);
  std::vector<std::size_t> first(b);
  for (std::size_t i = 0; i < b; ++i) first[i] = i * t;
  auto pooled = ad::select_rows(hidden, first);
  const auto& bias = head.params.get("bias");
  return ad::linear(pooled, head.params.get("weight"), &bias);
}

/// Per-token logits [B × T × C].
template <class T>
Tensor<T> token_classify(const EncoderModel<T>& model, const ClassificationHead<T>& head,
                         const Tensor<T>& hidden) {
  if (hidden.rank() != 3 || hidden.dim(2) != model.config().hidden)
    throw DimensionError("token_classify: expected hidden [B,T,H], got " + ad::to_string(hidden.shape()));
  if (head.classes() < 2) throw ConfigError("classification head needs at least 2 classes");
  const auto& bias = head.params.get("bias");
  return ad::linear(hidden, head.params.get("weight"), &bias);
}

}  // namespace peft::encoder
