#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "peft/errors.hpp"

namespace peft::corpus {

/// Byte-level BPE. Ids 0..4 are the specials, 5..260 the 256 byte values, merges follow
/// in the order they were learned. Every string encodes without UNK.
class Tokenizer {
 public:
  static constexpr std::int32_t kPad = 0, kUnk = 1, kCls = 2, kSep = 3, kMask = 4;
  static constexpr std::int32_t kSpecials = 5;
  static constexpr std::int32_t kFirstMerge = kSpecials + 256;
  static constexpr std::array<const char*, 5> kSpecialNames = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  static constexpr int kFormatVersion = 1;

  Tokenizer() { reset(); }

  /// Greedy merges of the most frequent adjacent pair until `vocab_size` ids exist or no
  /// pair occurs twice. Ties go to the lexicographically smallest (left, right) bytes.
  static Tokenizer train(const std::vector<std::string>& docs, std::size_t vocab_size) {
    if (vocab_size <= static_cast<std::size_t>(kFirstMerge))
      throw ConfigError("tokenizer vocab_size " + std::to_string(vocab_size) + " must exceed " +
                        std::to_string(kFirstMerge) + " (specials + byte symbols)");
    std::map<std::string, std::uint64_t> chunk_counts;
    for (const auto& d : docs)
      for (auto c : pretokenize(d)) ++chunk_counts[std::string(c)];
    struct Word {
      std::vector<std::int32_t> syms;
      std::uint64_t count;
    };
    std::vector<Word> words;
    words.reserve(chunk_counts.size());
    for (const auto& [text, n] : chunk_counts) words.push_back({byte_ids(text), n});

    Tokenizer tok;
    while (tok.vocab_size() < vocab_size) {
      std::unordered_map<std::uint64_t, std::uint64_t> pair_counts;
      for (const auto& w : words)
        for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) pair_counts[key(w.syms[i], w.syms[i + 1])] += w.count;
      std::uint64_t best_key = 0, best_count = 0;
      for (const auto& [k, n] : pair_counts) {
        if (n > best_count || (n == best_count && tok.pair_less(k, best_key))) {
          best_key = k;
          best_count = n;
        }
      }
      if (best_count < 2) break;
      const auto left = static_cast<std::int32_t>(best_key >> 32);
      const auto right = static_cast<std::int32_t>(best_key & 0xFFFFFFFFu);
      const auto id = tok.add_merge(left, right);
      for (auto& w : words) merge_in_place(w.syms, left, right, id);
    }
    return tok;
  }

  std::size_t vocab_size() const { return bytes_.size(); }
  const std::vector<std::pair<std::int32_t, std::int32_t>>& merges() const { return merges_; }
  bool is_special(std::int32_t id) const { return id >= 0 && id < kSpecials; }

  /// Byte string of a non-special id; the bracketed name for a special.
  const std::string& token_bytes(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= bytes_.size())
      throw InputError("token id " + std::to_string(id) + " outside vocabulary");
    return bytes_[static_cast<std::size_t>(id)];
  }

  /// Chunks start at each space run, so " word" keeps its leading space and merges never
  /// span two words.
  static std::vector<std::string_view> pretokenize(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 1; i < s.size(); ++i)
      if (s[i] == ' ' && s[i - 1] != ' ') {
        out.push_back(s.substr(start, i - start));
        start = i;
      }
    if (start < s.size()) out.push_back(s.substr(start));
    return out;
  }

  /// Not thread-safe: memoises chunk encodings.
  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> out;
    for (auto chunk : pretokenize(text)) {
      std::string k(chunk);
      auto it = cache_.find(k);
      if (it == cache_.end()) it = cache_.emplace(std::move(k), encode_chunk(chunk)).first;
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
    return out;
  }

  /// Concatenated bytes of the ids; specials are dropped.
  std::string decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (auto id : ids)
      if (!is_special(id)) out += token_bytes(id);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json specials = nlohmann::json::array();
    for (auto n : kSpecialNames) specials.push_back(n);
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [l, r] : merges_) merges.push_back({l, r});
    nlohmann::json vocab = nlohmann::json::array();
    for (std::size_t id = kSpecials; id < bytes_.size(); ++id) vocab.push_back(hex(bytes_[id]));
    return {{"format", "peft-bpe"}, {"version", kFormatVersion}, {"specials", specials}, {"merges", merges},
            {"vocab", vocab}};
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    try {
      if (j.at("format").get<std::string>() != "peft-bpe") throw FormatError("not a tokenizer file");
      if (j.at("version").get<int>() != kFormatVersion)
        throw FormatError("tokenizer format version " + j.at("version").dump() + " unsupported");
      const auto specials = j.at("specials").get<std::vector<std::string>>();
      if (specials.size() != kSpecialNames.size())
        throw FormatError("tokenizer file lists " + std::to_string(specials.size()) + " specials");
      for (std::size_t i = 0; i < specials.size(); ++i)
        if (specials[i] != kSpecialNames[i]) throw FormatError("unexpected special token '" + specials[i] + "'");
      Tokenizer tok;
      for (const auto& m : j.at("merges")) {
        const auto l = m.at(0).get<std::int32_t>(), r = m.at(1).get<std::int32_t>();
        const auto limit = static_cast<std::int32_t>(tok.vocab_size());
        if (l < kSpecials || r < kSpecials || l >= limit || r >= limit)
          throw FormatError("tokenizer merge refers to an invalid id");
        tok.add_merge(l, r);
      }
      const auto vocab = j.at("vocab").get<std::vector<std::string>>();
      if (vocab.size() + kSpecials != tok.vocab_size())
        throw FormatError("tokenizer vocab size disagrees with its merges");
      for (std::size_t i = 0; i < vocab.size(); ++i)
        if (vocab[i] != hex(tok.bytes_[i + kSpecials])) throw FormatError("tokenizer vocab disagrees with its merges");
      return tok;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("tokenizer file: ") + e.what());
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write tokenizer '" + path + "'");
    out << to_json().dump() << '\n';
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read tokenizer '" + path + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("tokenizer '" + path + "' is not valid JSON: " + e.what());
    }
  }

 private:
  void reset() {
    bytes_.clear();
    for (auto n : kSpecialNames) bytes_.emplace_back(n);
    for (int b = 0; b < 256; ++b) bytes_.emplace_back(1, static_cast<char>(b));
  }

  static std::uint64_t key(std::int32_t l, std::int32_t r) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) | static_cast<std::uint32_t>(r);
  }

  static std::vector<std::int32_t> byte_ids(std::string_view s) {
    std::vector<std::int32_t> ids;
    ids.reserve(s.size());
    for (char c : s) ids.push_back(kSpecials + static_cast<unsigned char>(c));
    return ids;
  }

  static void merge_in_place(std::vector<std::int32_t>& syms, std::int32_t l, std::int32_t r, std::int32_t id) {
    std::size_t out = 0;
    for (std::size_t i = 0; i < syms.size(); ++i) {
      if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
        syms[out++] = id;
        ++i;
      } else {
        syms[out++] = syms[i];
      }
    }
    syms.resize(out);
  }

  bool pair_less(std::uint64_t a, std::uint64_t b) const {
    const auto& al = bytes_[a >> 32];
    const auto& bl = bytes_[b >> 32];
    if (al != bl) return al < bl;
    return bytes_[a & 0xFFFFFFFFu] < bytes_[b & 0xFFFFFFFFu];
  }

  std::int32_t add_merge(std::int32_t l, std::int32_t r) {
    const auto id = static_cast<std::int32_t>(bytes_.size());
    bytes_.push_back(bytes_[static_cast<std::size_t>(l)] + bytes_[static_cast<std::size_t>(r)]);
    merges_.emplace_back(l, r);
    rank_[key(l, r)] = id;
    cache_.clear();
    return id;
  }

  /// Applies the lowest-ranked applicable merge until none applies.
  std::vector<std::int32_t> encode_chunk(std::string_view chunk) const {
    auto syms = byte_ids(chunk);
    while (syms.size() > 1) {
      std::int32_t best = -1;
      std::size_t at = 0;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = rank_.find(key(syms[i], syms[i + 1]));
        if (it != rank_.end() && (best < 0 || it->second < best)) {
          best = it->second;
          at = i;
        }
      }
      if (best < 0) break;
      merge_in_place(syms, syms[at], syms[at + 1], best);
    }
    return syms;
  }

  static std::string hex(const std::string& s) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned char c : s) {
      out.push_back(digits[c >> 4]);
      out.push_back(digits[c & 15]);
    }
    return out;
  }

  std::vector<std::string> bytes_;
  std::vector<std::pair<std::int32_t, std::int32_t>> merges_;
  std::unordered_map<std::uint64_t, std::int32_t> rank_;
  mutable std::unordered_map<std::string, std::vector<std::int32_t>> cache_;
};

}  // namespace peft::corpus
