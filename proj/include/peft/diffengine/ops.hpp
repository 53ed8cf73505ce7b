#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "peft/diffengine/kernels.hpp"
#include "peft/diffengine/tensor.hpp"

namespace peft::ad {

namespace detail {

inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <class T>
void accumulate(const Tensor<T>& t, const std::vector<T>& g) {
  auto dst = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matrix products

/// a[m×k] · b[k×n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {&a, &b},
                                [a, b, m, k, n](const std::vector<T>& g) mutable {
                                  if (a.requires_grad())
                                    kernels::gemm_nt(g.data(), b.values().data(),
                                                     a.mutable_grad().data(), m, n, k);
                                  if (b.requires_grad())
                                    kernels::gemm_tn(a.values().data(), g.data(),
                                                     b.mutable_grad().data(), m, k, n);
                                });
}

/// a[m×k] · b[n×k]ᵀ
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: cannot multiply " + to_string(a.shape()) + " by transpose of " +
                      to_string(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_result<T>("matmul_nt", {m, n}, std::move(out), {&a, &b},
                                [a, b, m, k, n](const std::vector<T>& g) mutable {
                                  if (a.requires_grad())
                                    kernels::gemm_nn(g.data(), b.values().data(),
                                                     a.mutable_grad().data(), m, n, k);
                                  if (b.requires_grad())
                                    kernels::gemm_tn(g.data(), a.values().data(),
                                                     b.mutable_grad().data(), m, n, k);
                                });
}

/// Batched product a[G×m×k] · b[G×k×n].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  const auto groups = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(groups * m * n, T(0));
  for (std::size_t g = 0; g < groups; ++g)
    kernels::gemm_nn(a.values().data() + g * m * k, b.values().data() + g * k * n,
                     out.data() + g * m * n, m, k, n);
  return detail::make_result<T>(
      "bmm", {groups, m, n}, std::move(out), {&a, &b},
      [a, b, groups, m, k, n](const std::vector<T>& g) mutable {
        for (std::size_t q = 0; q < groups; ++q) {
          const T* gq = g.data() + q * m * n;
          if (a.requires_grad())
            kernels::gemm_nt(gq, b.values().data() + q * k * n, a.mutable_grad().data() + q * m * k,
                             m, n, k);
          if (b.requires_grad())
            kernels::gemm_tn(a.values().data() + q * m * k, gq, b.mutable_grad().data() + q * k * n,
                             m, k, n);
        }
      });
}

// ---------------------------------------------------------------------------
// elementwise

/// Elementwise a + b; b may match a exactly or a trailing suffix of a's shape.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(detail::is_suffix(a.shape(), b.shape()),
                  "add: " + to_string(b.shape()) + " does not broadcast onto " + to_string(a.shape()));
  const auto n = a.numel(), nb = b.numel();
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % nb];
  return detail::make_result<T>("add", a.shape(), std::move(out), {&a, &b},
                                [a, b, nb](const std::vector<T>& g) mutable {
                                  if (a.requires_grad()) detail::accumulate(a, g);
                                  if (b.requires_grad()) {
                                    auto gb = b.mutable_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
                                  }
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(detail::is_suffix(a.shape(), b.shape()),
                  "sub: " + to_string(b.shape()) + " does not broadcast onto " + to_string(a.shape()));
  const auto n = a.numel(), nb = b.numel();
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i % nb];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {&a, &b},
                                [a, b, nb](const std::vector<T>& g) mutable {
                                  if (a.requires_grad()) detail::accumulate(a, g);
                                  if (b.requires_grad()) {
                                    auto gb = b.mutable_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] -= g[i];
                                  }
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(detail::is_suffix(a.shape(), b.shape()),
                  "mul: " + to_string(b.shape()) + " does not broadcast onto " + to_string(a.shape()));
  const auto n = a.numel(), nb = b.numel();
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % nb];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {&a, &b},
                                [a, b, nb](const std::vector<T>& g) mutable {
                                  auto av = a.values();
                                  auto bv = b.values();
                                  if (a.requires_grad()) {
                                    auto ga = a.mutable_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % nb];
                                  }
                                  if (b.requires_grad()) {
                                    auto gb = b.mutable_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * av[i];
                                  }
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  return detail::make_result<T>("scale", x.shape(), std::move(out), {&x},
                                [x, factor](const std::vector<T>& g) mutable {
                                  auto gx = x.mutable_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
                                });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (auto v : x.values()) acc += v;
  return detail::make_result<T>("sum", {1}, {acc}, {&x}, [x](const std::vector<T>& g) mutable {
    for (auto& v : x.mutable_grad()) v += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

namespace detail {
template <class T>
constexpr T gelu_k0 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <class T>
constexpr T gelu_k1 = static_cast<T>(0.044715);
}  // namespace detail

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  using detail::gelu_k0;
  using detail::gelu_k1;
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(gelu_k0<T> * (v + gelu_k1<T> * v * v * v)));
  }
  return detail::make_result<T>("gelu", x.shape(), std::move(out), {&x},
                                [x](const std::vector<T>& g) mutable {
                                  auto xv = x.values();
                                  auto gx = x.mutable_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const T v = xv[i];
                                    const T u = gelu_k0<T> * (v + gelu_k1<T> * v * v * v);
                                    const T th = std::tanh(u);
                                    const T du = gelu_k0<T> * (T(1) + T(3) * gelu_k1<T> * v * v);
                                    const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
                                    gx[i] += g[i] * d;
                                  }
                                });
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = u(rng) < p ? T(0) : keep_scale;
  auto mask_t = Tensor<T>::from(x.shape(), std::move(mask));
  return mul(x, mask_t);
}

// ---------------------------------------------------------------------------
// normalisation and softmax

/// Normalises each row over the last extent H, then applies gamma·x̂ + beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  detail::require(x.rank() >= 1 && gamma.rank() == 1 && beta.rank() == 1 &&
                      gamma.dim(0) == x.shape().back() && beta.dim(0) == x.shape().back(),
                  "layer_norm: affine shape " + to_string(gamma.shape()) + " does not match input " +
                      to_string(x.shape()));
  const auto h = x.shape().back();
  const auto rows = x.numel() / h;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * h;
    T mu = T(0);
    for (std::size_t j = 0; j < h; ++j) mu += row[j];
    mu /= static_cast<T>(h);
    T var = T(0);
    for (std::size_t j = 0; j < h; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(h);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      xhat[r * h + j] = (row[j] - mu) * rstd[r];
      out[r * h + j] = gv[j] * xhat[r * h + j] + bv[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), h,
       rows](const std::vector<T>& g) mutable {
        auto gv = gamma.values();
        if (gamma.requires_grad()) {
          auto gg = gamma.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < h; ++j) gg[j] += g[r * h + j] * xhat[r * h + j];
        }
        if (beta.requires_grad()) {
          auto gb = beta.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < h; ++j) gb[j] += g[r * h + j];
        }
        if (x.requires_grad()) {
          auto gx = x.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < h; ++j) {
              const T d = g[r * h + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[r * h + j];
            }
            mean_d /= static_cast<T>(h);
            mean_dx /= static_cast<T>(h);
            for (std::size_t j = 0; j < h; ++j) {
              const T d = g[r * h + j] * gv[j];
              gx[r * h + j] += rstd[r] * (d - mean_d - xhat[r * h + j] * mean_dx);
            }
          }
        }
      });
}

namespace detail {
template <class T>
void softmax_backward_rows(const std::vector<T>& y, const std::vector<T>& g, std::span<T> gx,
                           std::size_t width) {
  const auto rows = y.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = T(0);
    for (std::size_t j = 0; j < width; ++j) dot += g[r * width + j] * y[r * width + j];
    for (std::size_t j = 0; j < width; ++j)
      gx[r * width + j] += y[r * width + j] * (g[r * width + j] - dot);
  }
}
}  // namespace detail

/// Softmax over the last extent.
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const auto w = x.shape().back();
  const auto rows = x.numel() / w;
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * w;
    T mx = *std::max_element(row, row + w);
    T z = T(0);
    for (std::size_t j = 0; j < w; ++j) z += (out[r * w + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] /= z;
  }
  auto saved = out;
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {&x},
                                [x, y = std::move(saved), w](const std::vector<T>& g) mutable {
                                  detail::softmax_backward_rows(y, g, x.mutable_grad(), w);
                                });
}

/// Attention softmax over scores[B×heads×Tq×Tk]. Keys with key_mask[b·Tk + j] == 0 (and,
/// when causal, keys j > i) get −∞ logits. A query row with no visible key yields zeros.
template <class T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> key_mask,
                         bool causal) {
  detail::require(scores.rank() == 4, "masked_softmax: expected [B,heads,Tq,Tk], got " +
                                          to_string(scores.shape()));
  const auto batch = scores.dim(0), heads = scores.dim(1), tq = scores.dim(2), tk = scores.dim(3);
  detail::require(key_mask.size() == batch * tk, "masked_softmax: key mask length mismatch");
  std::vector<T> out(scores.numel(), T(0));
  auto sv = scores.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < tq; ++i) {
        const std::size_t base = ((b * heads + h) * tq + i) * tk;
        auto visible = [&](std::size_t j) { return key_mask[b * tk + j] && !(causal && j > i); };
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < tk; ++j)
          if (visible(j)) mx = std::max(mx, sv[base + j]);
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T z = T(0);
        for (std::size_t j = 0; j < tk; ++j)
          if (visible(j)) z += (out[base + j] = std::exp(sv[base + j] - mx));
        for (std::size_t j = 0; j < tk; ++j) out[base + j] /= z;
      }
  auto saved = out;
  return detail::make_result<T>("masked_softmax", scores.shape(), std::move(out), {&scores},
                                [scores, y = std::move(saved), tk](const std::vector<T>& g) mutable {
                                  detail::softmax_backward_rows(y, g, scores.mutable_grad(), tk);
                                });
}

/// Mean of −log softmax(logits[r])[targets[r]] over rows whose target != ignore_index.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                std::int32_t ignore_index = -100) {
  detail::require(logits.rank() == 2 && logits.dim(0) == targets.size(),
                  "softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                      std::to_string(targets.size()) + " targets");
  const auto rows = logits.dim(0), v = logits.dim(1);
  auto lv = logits.values();
  std::vector<T> probs(logits.numel(), T(0));
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] == ignore_index) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= v)
      throw InputError("softmax_cross_entropy: target " + std::to_string(tgt[r]) +
                       " outside [0, " + std::to_string(v) + ")");
    const T* row = lv.data() + r * v;
    T mx = *std::max_element(row, row + v);
    T z = T(0);
    for (std::size_t j = 0; j < v; ++j) z += (probs[r * v + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += (mx + std::log(z)) - row[tgt[r]];
    ++count;
  }
  if (count == 0) throw InputError("softmax_cross_entropy: every target is ignored");
  const T inv = T(1) / static_cast<T>(count);
  return detail::make_result<T>(
      "softmax_cross_entropy", {1}, {total * inv}, {&logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), ignore_index, v,
       inv](const std::vector<T>& g) mutable {
        auto gl = logits.mutable_grad();
        const T s = g[0] * inv;
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          if (tgt[r] == ignore_index) continue;
          for (std::size_t j = 0; j < v; ++j) gl[r * v + j] += s * probs[r * v + j];
          gl[r * v + static_cast<std::size_t>(tgt[r])] -= s;
        }
      });
}

// ---------------------------------------------------------------------------
// indexing and shape

/// Rows of table[V×H] selected by ids; result [ids.size()×H].
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  detail::require(table.rank() == 2, "embedding_lookup: table must be 2-D");
  detail::require(!ids.empty(), "embedding_lookup: no ids");
  const auto vocab = table.dim(0), h = table.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * h);
  auto tv = table.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab)
      throw InputError("embedding_lookup: id " + std::to_string(idx[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    std::copy_n(tv.data() + static_cast<std::size_t>(idx[r]) * h, h, out.data() + r * h);
  }
  return detail::make_result<T>("embedding_lookup", Shape{ids.size(), h}, std::move(out), {&table},
                                [table, idx = std::move(idx), h](const std::vector<T>& g) mutable {
                                  auto gt = table.mutable_grad();
                                  for (std::size_t r = 0; r < idx.size(); ++r) {
                                    T* dst = gt.data() + static_cast<std::size_t>(idx[r]) * h;
                                    for (std::size_t j = 0; j < h; ++j) dst[j] += g[r * h + j];
                                  }
                                });
}

/// Rows of x viewed as [N × last-extent]; result [rows.size() × last-extent].
template <class T>
Tensor<T> select_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const auto w = x.shape().back();
  const auto n = x.numel() / w;
  detail::require(!rows.empty(), "select_rows: no rows requested");
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * w);
  auto xv = x.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    detail::require(idx[r] < n, "select_rows: row " + std::to_string(idx[r]) + " out of range");
    std::copy_n(xv.data() + idx[r] * w, w, out.data() + r * w);
  }
  return detail::make_result<T>("select_rows", Shape{rows.size(), w}, std::move(out), {&x},
                                [x, idx = std::move(idx), w](const std::vector<T>& g) mutable {
                                  auto gx = x.mutable_grad();
                                  for (std::size_t r = 0; r < idx.size(); ++r)
                                    for (std::size_t j = 0; j < w; ++j) gx[idx[r] * w + j] += g[r * w + j];
                                });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel_of(shape) == x.numel(),
                  "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {&x},
                                [x](const std::vector<T>& g) mutable { detail::accumulate(x, g); });
}

/// Swaps two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t axis_a, std::size_t axis_b) {
  detail::require(axis_a < x.rank() && axis_b < x.rank(), "transpose: axis out of range");
  Shape out_shape = x.shape();
  std::swap(out_shape[axis_a], out_shape[axis_b]);
  const auto rank = x.rank();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank - 1; d > 0; --d) in_strides[d - 1] = in_strides[d] * x.shape()[d];
  // stride in the input for each output axis
  std::vector<std::size_t> mapped = in_strides;
  std::swap(mapped[axis_a], mapped[axis_b]);
  const auto n = x.numel();
  std::vector<std::size_t> perm(n);
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) src += counter[d] * mapped[d];
    perm[o] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out_shape[d]) break;
      counter[d] = 0;
    }
  }
  std::vector<T> out(n);
  auto xv = x.values();
  for (std::size_t o = 0; o < n; ++o) out[o] = xv[perm[o]];
  return detail::make_result<T>("transpose", std::move(out_shape), std::move(out), {&x},
                                [x, perm = std::move(perm)](const std::vector<T>& g) mutable {
                                  auto gx = x.mutable_grad();
                                  for (std::size_t o = 0; o < g.size(); ++o) gx[perm[o]] += g[o];
                                });
}

template <class T>
Tensor<T> concat_last_dim(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_last_dim: nothing to concatenate");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == lead.size() + 1 &&
                        std::equal(lead.begin(), lead.end(), p.shape().begin()),
                    "concat_last_dim: leading shapes differ");
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const auto rows = numel_of(lead);
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return detail::make_result_n<T>("concat_last_dim", std::move(shape), std::move(out), parts,
                                  [parts, widths, rows, total](const std::vector<T>& g) mutable {
                                    std::size_t offset = 0;
                                    for (std::size_t k = 0; k < parts.size(); ++k) {
                                      if (parts[k].requires_grad()) {
                                        auto gp = parts[k].mutable_grad();
                                        for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t j = 0; j < widths[k]; ++j)
                                            gp[r * widths[k] + j] += g[r * total + offset + j];
                                      }
                                      offset += widths[k];
                                    }
                                  });
}

template <class T>
std::vector<Tensor<T>> split_last_dim(const Tensor<T>& x, const std::vector<std::size_t>& widths) {
  std::size_t total = 0;
  for (auto w : widths) {
    detail::require(w > 0, "split_last_dim: zero-width part");
    total += w;
  }
  detail::require(total == x.shape().back(), "split_last_dim: widths do not sum to last extent of " +
                                                 to_string(x.shape()));
  const auto rows = x.numel() / total;
  std::vector<Tensor<T>> parts;
  std::size_t offset = 0;
  auto xv = x.values();
  for (auto w : widths) {
    std::vector<T> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(xv.data() + r * total + offset, w, out.data() + r * w);
    Shape shape = x.shape();
    shape.back() = w;
    parts.push_back(detail::make_result<T>("split_last_dim", std::move(shape), std::move(out), {&x},
                                           [x, offset, w, rows, total](const std::vector<T>& g) mutable {
                                             auto gx = x.mutable_grad();
                                             for (std::size_t r = 0; r < rows; ++r)
                                               for (std::size_t j = 0; j < w; ++j)
                                                 gx[r * total + offset + j] += g[r * w + j];
                                           }));
    offset += w;
  }
  return parts;
}

/// x[..×K] · w[K×N] (+ bias[N]), keeping the leading extents.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  const auto k = x.shape().back();
  detail::require(weight.rank() == 2 && weight.dim(0) == k,
                  "linear: weight " + to_string(weight.shape()) + " does not fit input " +
                      to_string(x.shape()));
  auto flat = x.rank() == 2 ? x : reshape(x, {x.numel() / k, k});
  auto y = matmul(flat, weight);
  if (bias) y = add(y, *bias);
  if (x.rank() == 2) return y;
  Shape shape = x.shape();
  shape.back() = weight.dim(1);
  return reshape(y, std::move(shape));
}

}  // namespace peft::ad
