#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "peft/adapters/adapted_model.hpp"
#include "peft/corpus/tokenizer.hpp"
#include "peft/encoder/model.hpp"

namespace peft::evaluation {

/// Anything that returns log p(target | masked input) at selected flat positions of a batch.
template <class S>
concept MaskedScorer = requires(const S& s, const encoder::TokenBatch& b, std::span<const std::size_t> rows,
                                std::span<const std::int32_t> targets) {
  { s.log_probs(b, rows, targets) } -> std::convertible_to<std::vector<double>>;
  { s.max_length() } -> std::convertible_to<std::size_t>;
};

/// Scores with an adapted encoder's MLM head, gradients off.
template <class T>
class ModelScorer {
 public:
  explicit ModelScorer(const adapters::AdaptedModel<T>& model) : model_(model) {}

  std::size_t max_length() const { return model_.config().max_positions; }

  std::vector<double> log_probs(const encoder::TokenBatch& b, std::span<const std::size_t> rows,
                                std::span<const std::int32_t> targets) const {
    ad::NoGradGuard ng;
    auto logits = model_.mlm_logits_at(model_.encode(b), rows);
    const auto v = logits.dim(1);
    auto lv = logits.values();
    std::vector<double> out(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto* row = lv.data() + r * v;
      double mx = static_cast<double>(row[0]);
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      out[r] = static_cast<double>(row[static_cast<std::size_t>(targets[r])]) - mx - std::log(z);
    }
    return out;
  }

 private:
  const adapters::AdaptedModel<T>& model_;
};

struct PpplOptions {
  std::size_t batch_size = 32;  // masked copies per forward pass
  std::int32_t cls = corpus::Tokenizer::kCls;
  std::int32_t sep = corpus::Tokenizer::kSep;
  std::int32_t mask = corpus::Tokenizer::kMask;
};

struct PseudoPerplexityReport {
  std::vector<double> sentence_pll;
  std::vector<std::size_t> sentence_tokens;
  double total_pll = 0.0;
  std::size_t total_tokens = 0;
  double pseudo_perplexity = 0.0;
};

/// Window of at most `width` content tokens used to score token i: centred on i, shifted
/// inward at the sentence edges. Returns the start offset.
inline std::size_t scoring_window_start(std::size_t i, std::size_t n, std::size_t width) {
  if (n <= width) return 0;
  const std::size_t half = width / 2;
  const std::size_t start = i > half ? i - half : 0;
  return std::min(start, n - width);
}

/// PLL of one sentence of content ids: each token masked in turn inside [CLS] … [SEP].
template <MaskedScorer S>
double sentence_pll(const S& scorer, const std::vector<std::int32_t>& ids, const PpplOptions& opt = {}) {
  const auto n = ids.size();
  if (n == 0) return 0.0;
  if (scorer.max_length() < 3) throw ConfigError("scorer window too short for pseudo-perplexity");
  const std::size_t width = std::min(n, scorer.max_length() - 2);
  const std::size_t len = width + 2;
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  double pll = 0.0;
  for (std::size_t first = 0; first < n; first += bs) {
    const std::size_t count = std::min(bs, n - first);
    encoder::TokenBatch b;
    b.batch = count;
    b.length = len;
    b.ids.resize(count * len);
    b.attention_mask.assign(count * len, 1);
    std::vector<std::size_t> rows(count);
    std::vector<std::int32_t> targets(count);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = first + k;
      const std::size_t start = scoring_window_start(i, n, width);
      auto* row = b.ids.data() + k * len;
      row[0] = opt.cls;
      for (std::size_t j = 0; j < width; ++j) row[1 + j] = ids[start + j];
      row[len - 1] = opt.sep;
      const std::size_t pos = 1 + (i - start);
      row[pos] = opt.mask;
      rows[k] = k * len + pos;
      targets[k] = ids[i];
    }
    for (double lp : scorer.log_probs(b, rows, targets)) pll += lp;
  }
  return pll;
}

/// exp(−ΣPLL / ΣN) over all sentences; specials are never scored. Sentence PLLs are summed
/// in sorted order so the total does not depend on sentence order.
template <MaskedScorer S>
PseudoPerplexityReport pseudo_perplexity(const S& scorer, const std::vector<std::vector<std::int32_t>>& sentences,
                                         const PpplOptions& opt = {}) {
  if (sentences.empty()) throw InputError("pseudo_perplexity: no sentences");
  PseudoPerplexityReport rep;
  for (const auto& s : sentences) {
    const double pll = sentence_pll(scorer, s, opt);
    rep.sentence_pll.push_back(pll);
    rep.sentence_tokens.push_back(s.size());
    rep.total_tokens += s.size();
  }
  auto sorted = rep.sentence_pll;
  std::sort(sorted.begin(), sorted.end());
  for (double v : sorted) rep.total_pll += v;
  if (rep.total_tokens == 0) throw InputError("pseudo_perplexity: sentences contain no tokens");
  rep.pseudo_perplexity = std::exp(-rep.total_pll / static_cast<double>(rep.total_tokens));
  return rep;
}

template <MaskedScorer S>
PseudoPerplexityReport pseudo_perplexity(const S& scorer, const corpus::Tokenizer& tok,
                                         const std::vector<std::string>& sentences, const PpplOptions& opt = {}) {
  std::vector<std::vector<std::int32_t>> ids;
  ids.reserve(sentences.size());
  for (const auto& s : sentences) ids.push_back(tok.encode(s));
  return pseudo_perplexity(scorer, ids, opt);
}

inline void write_pppl_csv(const std::string& path, const PseudoPerplexityReport& r) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out.precision(17);
  out << "sentence,tokens,pll\n";
  for (std::size_t i = 0; i < r.sentence_pll.size(); ++i)
    out << i << ',' << r.sentence_tokens[i] << ',' << r.sentence_pll[i] << '\n';
  out << "total," << r.total_tokens << ',' << r.total_pll << '\n';
  out << "pseudo_perplexity,," << r.pseudo_perplexity << '\n';
}

}  // namespace peft::evaluation
