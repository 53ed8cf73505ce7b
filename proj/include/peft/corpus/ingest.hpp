#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "peft/errors.hpp"

namespace peft::corpus {

struct CleaningRules {
  bool strip_control = true;
  bool drop_blank = true;
  bool normalize_whitespace = true;
};

struct CorpusSpec {
  std::string source;
  std::uint64_t byte_cap = 1ull << 30;
  double val_fraction = 0.1;
  CleaningRules cleaning;
  std::uint64_t seed = 0;

  void validate() const {
    if (byte_cap == 0) throw ConfigError("corpus byte_cap must be positive");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
      throw ConfigError("corpus val_fraction must lie in (0, 1), got " + std::to_string(val_fraction));
  }
};

struct IngestStats {
  std::uint64_t bytes_in = 0;    // size of the source file
  std::uint64_t bytes_kept = 0;  // cleaned documents plus one newline each
  std::uint64_t docs = 0;        // documents kept after cleaning (train + val)
  std::uint64_t val_docs = 0;
};

struct IngestResult {
  std::vector<std::string> train;
  std::vector<std::string> val;
  IngestStats stats;
};

/// Byte offset of the first malformed sequence, or npos.
inline std::size_t find_invalid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return i;
    }
    if (i + len > s.size()) return i;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return i;
      cp = (cp << 6) | (cc & 0x3F);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
    i += len;
  }
  return std::string_view::npos;
}

/// Applies the cleaning rules to one document. C0 controls other than tab, DEL and the
/// C1 range are removed; tab counts as whitespace.
inline std::string clean_document(std::string_view doc, const CleaningRules& rules) {
  std::string out;
  out.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto c = static_cast<unsigned char>(doc[i]);
    if (rules.strip_control) {
      if ((c < 0x20 && c != '\t') || c == 0x7F) continue;
      if (c == 0xC2 && i + 1 < doc.size()) {
        const auto n = static_cast<unsigned char>(doc[i + 1]);
        if (n >= 0x80 && n <= 0x9F) {
          ++i;
          continue;
        }
      }
    }
    out.push_back(static_cast<char>(c));
  }
  if (rules.normalize_whitespace) {
    auto is_ws = [](char ch) { return ch == ' ' || ch == '\t' || ch == '\r' || ch == '\v' || ch == '\f'; };
    std::string norm;
    norm.reserve(out.size());
    bool pending = false;
    for (char ch : out) {
      if (is_ws(ch)) {
        pending = !norm.empty();
        continue;
      }
      if (pending) norm.push_back(' ');
      pending = false;
      norm.push_back(ch);
    }
    out = std::move(norm);
  }
  return out;
}

/// Indices of the validation documents: round(n·fraction) of them, at least one when
/// n ≥ 2 and never all. Sorted ascending.
inline std::vector<std::size_t> validation_indices(std::size_t n, double fraction, std::uint64_t seed) {
  if (n < 2) return {};
  auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
  k = std::clamp<std::size_t>(k, 1, n - 1);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Splits `docs` into train/val keeping the input order within each part.
inline void split_documents(std::vector<std::string> docs, double fraction, std::uint64_t seed,
                            std::vector<std::string>& train, std::vector<std::string>& val) {
  const auto vidx = validation_indices(docs.size(), fraction, seed);
  std::size_t next = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (next < vidx.size() && vidx[next] == i) {
      val.push_back(std::move(docs[i]));
      ++next;
    } else {
      train.push_back(std::move(docs[i]));
    }
  }
}

/// Reads one document per line, keeps whole documents up to byte_cap raw bytes (each
/// counted with its newline), cleans them and splits train/validation.
inline IngestResult ingest(const CorpusSpec& spec) {
  spec.validate();
  std::ifstream in(spec.source, std::ios::binary);
  if (!in) throw IngestionError("cannot read corpus '" + spec.source + "'");
  IngestResult res;
  std::error_code ec;
  res.stats.bytes_in = std::filesystem::file_size(spec.source, ec);
  std::vector<std::string> kept;
  std::uint64_t used = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::uint64_t cost = line.size() + 1;
    if (used + cost > spec.byte_cap) {
      if (line_no == 1)
        throw IngestionError("byte cap " + std::to_string(spec.byte_cap) + " is smaller than the first document (" +
                             std::to_string(cost) + " bytes); no document fits");
      break;
    }
    used += cost;
    if (auto bad = find_invalid_utf8(line); bad != std::string::npos)
      throw IngestionError(spec.source + ":" + std::to_string(line_no) + ": invalid UTF-8 at byte " +
                           std::to_string(bad));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto doc = clean_document(line, spec.cleaning);
    if (spec.cleaning.drop_blank && doc.empty()) continue;
    kept.push_back(std::move(doc));
  }
  if (kept.empty()) throw IngestionError("corpus '" + spec.source + "' is empty after cleaning");
  for (const auto& d : kept) res.stats.bytes_kept += d.size() + 1;
  res.stats.docs = kept.size();
  split_documents(std::move(kept), spec.val_fraction, spec.seed, res.train, res.val);
  res.stats.val_docs = res.val.size();
  return res;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw InputError("failed writing '" + path + "'");
}

inline void write_stats_csv(const std::string& path, const IngestStats& s) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << "bytes_in,bytes_kept,docs,val_docs\n"
      << s.bytes_in << ',' << s.bytes_kept << ',' << s.docs << ',' << s.val_docs << '\n';
}

}  // namespace peft::corpus
