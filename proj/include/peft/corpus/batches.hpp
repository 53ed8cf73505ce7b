#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "peft/corpus/tokenizer.hpp"
#include "peft/encoder/model.hpp"
#include "peft/random.hpp"

namespace peft::corpus {

inline constexpr std::int32_t kIgnore = -100;

/// Token windows cut from documents without overlap.
struct Windows {
  std::size_t length = 0;  // T, including CLS/SEP for MLM windows
  std::vector<std::vector<std::int32_t>> rows;
};

/// MLM windows: [CLS] + up to T−2 content ids + [SEP]; documents longer than T−2 ids are
/// cut into consecutive pieces.
inline Windows mlm_windows(const Tokenizer& tok, const std::vector<std::string>& docs, std::size_t T) {
  if (T < 2) throw ConfigError("sequence length must be at least 2, got " + std::to_string(T));
  Windows w;
  w.length = T;
  const auto body = T - 2;
  if (body == 0) return w;
  for (const auto& d : docs) {
    const auto ids = tok.encode(d);
    for (std::size_t s = 0; s < ids.size(); s += body) {
      std::vector<std::int32_t> row = {Tokenizer::kCls};
      row.insert(row.end(), ids.begin() + static_cast<std::ptrdiff_t>(s),
                 ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), s + body)));
      row.push_back(Tokenizer::kSep);
      w.rows.push_back(std::move(row));
    }
  }
  return w;
}

/// CLM windows: up to T content ids, no specials.
inline Windows clm_windows(const Tokenizer& tok, const std::vector<std::string>& docs, std::size_t T) {
  if (T < 2) throw ConfigError("sequence length must be at least 2, got " + std::to_string(T));
  Windows w;
  w.length = T;
  for (const auto& d : docs) {
    const auto ids = tok.encode(d);
    for (std::size_t s = 0; s < ids.size(); s += T)
      w.rows.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(s),
                          ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), s + T)));
  }
  return w;
}

struct MlmBatch {
  encoder::TokenBatch input;
  std::vector<std::int32_t> labels;  // original id at corrupted positions, kIgnore elsewhere

  std::size_t selected() const {
    std::size_t n = 0;
    for (auto l : labels) n += l != kIgnore;
    return n;
  }
};

struct MaskingOptions {
  double mask_prob = 0.15;
  double mask_share = 0.8;    // of selected: replaced by [MASK]
  double random_share = 0.1;  // of selected: replaced by a random non-special id
};

/// Pads `rows` into a B×T batch (PAD id 0, mask 0).
inline encoder::TokenBatch pad_rows(const std::vector<const std::vector<std::int32_t>*>& rows, std::size_t T) {
  encoder::TokenBatch b;
  b.batch = rows.size();
  b.length = T;
  b.ids.assign(b.batch * T, Tokenizer::kPad);
  b.attention_mask.assign(b.batch * T, 0);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t t = 0; t < rows[r]->size() && t < T; ++t) {
      b.ids[r * T + t] = (*rows[r])[t];
      b.attention_mask[r * T + t] = 1;
    }
  return b;
}

/// Corrupts non-special positions in place: each is selected with probability mask_prob,
/// then 80% become [MASK], 10% a random non-special id, 10% stay. Returns labels.
inline std::vector<std::int32_t> apply_masking(encoder::TokenBatch& b, std::size_t vocab_size,
                                               const MaskingOptions& opt, std::mt19937_64& rng) {
  if (!(opt.mask_prob > 0.0 && opt.mask_prob < 1.0))
    throw ConfigError("mask_prob must lie in (0, 1), got " + std::to_string(opt.mask_prob));
  if (vocab_size <= static_cast<std::size_t>(Tokenizer::kSpecials))
    throw ConfigError("vocabulary has no non-special ids to sample");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> random_id(Tokenizer::kSpecials, static_cast<std::int32_t>(vocab_size) - 1);
  std::vector<std::int32_t> labels(b.ids.size(), kIgnore);
  for (std::size_t i = 0; i < b.ids.size(); ++i) {
    const auto id = b.ids[i];
    if (!b.attention_mask[i] || id < Tokenizer::kSpecials) continue;
    if (u(rng) >= opt.mask_prob) continue;
    labels[i] = id;
    const double r = u(rng);
    if (r < opt.mask_share) b.ids[i] = Tokenizer::kMask;
    else if (r < opt.mask_share + opt.random_share) b.ids[i] = random_id(rng);
  }
  return labels;
}

/// Batch number `step` of an MLM stream: B windows drawn uniformly with replacement, then
/// masked. A pure function of (windows, seed, step).
inline MlmBatch mlm_batch(const Windows& w, std::size_t vocab_size, std::size_t B, const MaskingOptions& opt,
                          std::uint64_t seed, std::uint64_t step) {
  if (w.rows.empty()) throw InputError("no token windows to sample from");
  if (B == 0) throw ConfigError("batch size must be positive");
  auto rng = step_rng(seed, step);
  std::uniform_int_distribution<std::size_t> pick(0, w.rows.size() - 1);
  std::vector<const std::vector<std::int32_t>*> rows;
  for (std::size_t i = 0; i < B; ++i) rows.push_back(&w.rows[pick(rng)]);
  MlmBatch out;
  out.input = pad_rows(rows, w.length);
  out.labels = apply_masking(out.input, vocab_size, opt, rng);
  return out;
}

/// Deterministic MLM batches over every window in order (evaluation).
inline std::vector<MlmBatch> mlm_eval_batches(const Windows& w, std::size_t vocab_size, std::size_t B,
                                              const MaskingOptions& opt, std::uint64_t seed) {
  std::vector<MlmBatch> out;
  for (std::size_t s = 0, k = 0; s < w.rows.size(); s += B, ++k) {
    std::vector<const std::vector<std::int32_t>*> rows;
    for (std::size_t i = s; i < std::min(w.rows.size(), s + B); ++i) rows.push_back(&w.rows[i]);
    auto rng = step_rng(seed, k);
    MlmBatch b;
    b.input = pad_rows(rows, w.length);
    b.labels = apply_masking(b.input, vocab_size, opt, rng);
    out.push_back(std::move(b));
  }
  return out;
}

/// Convenience form: tokenise, window and build the first batch.
inline MlmBatch make_mlm_batch(const Tokenizer& tok, const std::vector<std::string>& docs, std::size_t B,
                               std::size_t T, double mask_prob, std::uint64_t seed) {
  MaskingOptions opt;
  opt.mask_prob = mask_prob;
  return mlm_batch(mlm_windows(tok, docs, T), tok.vocab_size(), B, opt, seed, 0);
}

struct ClmBatch {
  encoder::TokenBatch input;
  std::vector<std::int32_t> labels;  // next id; kIgnore at the last position and on padding
};

/// Labels are the inputs shifted left by one.
inline std::vector<std::int32_t> shifted_labels(const encoder::TokenBatch& b) {
  std::vector<std::int32_t> labels(b.ids.size(), kIgnore);
  for (std::size_t r = 0; r < b.batch; ++r)
    for (std::size_t t = 0; t + 1 < b.length; ++t) {
      const auto i = r * b.length + t;
      if (b.attention_mask[i] && b.attention_mask[i + 1]) labels[i] = b.ids[i + 1];
    }
  return labels;
}

inline ClmBatch clm_batch(const Windows& w, std::size_t B, std::uint64_t seed, std::uint64_t step) {
  if (w.rows.empty()) throw InputError("no token windows to sample from");
  auto rng = step_rng(seed, step);
  std::uniform_int_distribution<std::size_t> pick(0, w.rows.size() - 1);
  std::vector<const std::vector<std::int32_t>*> rows;
  for (std::size_t i = 0; i < B; ++i) rows.push_back(&w.rows[pick(rng)]);
  ClmBatch out;
  out.input = pad_rows(rows, w.length);
  out.labels = shifted_labels(out.input);
  return out;
}

inline ClmBatch make_clm_batch(const Tokenizer& tok, const std::vector<std::string>& docs, std::size_t B,
                               std::size_t T, std::uint64_t seed = 0) {
  return clm_batch(clm_windows(tok, docs, T), B, seed, 0);
}

}  // namespace peft::corpus
