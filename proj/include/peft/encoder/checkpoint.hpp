#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peft/encoder/model.hpp"

// Container layout (all integers little-endian):
//   magic "PEFTCKPT" | u32 format version | u64 header length | header (UTF-8 JSON)
//   u64 tensor count | per tensor: u32 name length, name, u8 value width (4 or 8),
//                                  u32 rank, u64 extents[rank], values[product(extents)]
// Values are IEEE-754 binary32 or binary64 in the precision of the model that wrote them.
namespace peft::checkpoint {

inline constexpr std::array<char, 8> kMagic = {'P', 'E', 'F', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct StoredTensor {
  ad::Shape shape;
  std::uint8_t width = 4;
  std::vector<double> values;
};

struct Container {
  nlohmann::json header;
  std::vector<std::pair<std::string, StoredTensor>> tensors;

  const StoredTensor& at(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::istream& is) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    int c = is.get();
    if (c == EOF) throw FormatError("checkpoint truncated");
    v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline void write(const std::string& path, const Container& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os.write(kMagic.data(), kMagic.size());
  detail::put_le<std::uint32_t>(os, kFormatVersion);
  const auto header = c.header.dump();
  detail::put_le<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put_le<std::uint64_t>(os, c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(t.width));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_le<std::uint64_t>(os, d);
    if (t.width == 8)
      for (double v : t.values) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    else
      for (double v : t.values)
        detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) throw FormatError("failed writing '" + path + "'");
}

inline Container read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kFormatVersion)
    throw FormatError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kFormatVersion) + ")");
  Container c;
  const auto header_len = detail::get_le<std::uint64_t>(is);
  std::string header(header_len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw FormatError("checkpoint header truncated");
  try {
    c.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const auto count = detail::get_le<std::uint64_t>(is);
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto name_len = detail::get_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError("checkpoint truncated");
    StoredTensor t;
    t.width = detail::get_le<std::uint8_t>(is);
    if (t.width != 4 && t.width != 8)
      throw FormatError("tensor '" + name + "' has unsupported value width " + std::to_string(t.width));
    const auto rank = detail::get_le<std::uint32_t>(is);
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(detail::get_le<std::uint64_t>(is));
    if (rank == 0 || rank > 8) throw FormatError("tensor '" + name + "' has invalid rank");
    t.values.resize(ad::numel_of(t.shape));
    for (auto& v : t.values)
      v = t.width == 8 ? std::bit_cast<double>(detail::get_le<std::uint64_t>(is))
                       : static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(is)));
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

template <class T>
StoredTensor store(const ad::Tensor<T>& t) {
  StoredTensor s;
  s.shape = t.shape();
  s.width = sizeof(T) == 8 ? 8 : 4;
  s.values.assign(t.values().begin(), t.values().end());
  return s;
}

template <class T>
void append(Container& c, const std::string& prefix, const ParameterStore<T>& params) {
  for (const auto& e : params.entries())
    c.tensors.emplace_back(prefix.empty() ? e.name : prefix + "." + e.name, store(e.tensor));
}

/// Overwrites the values of every parameter in `params` from `c`, matching shapes exactly.
template <class T>
void load_into(const Container& c, const std::string& prefix, ParameterStore<T>& params) {
  for (const auto& e : params.entries()) {
    const auto& s = c.at(prefix.empty() ? e.name : prefix + "." + e.name);
    if (s.shape != e.tensor.shape())
      throw FormatError("checkpoint tensor '" + e.name + "' has shape " + ad::to_string(s.shape) +
                        ", model expects " + ad::to_string(e.tensor.shape()));
    auto t = e.tensor;
    auto dst = t.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(s.values[i]);
  }
}

inline void require_kind(const Container& c, const std::string& kind) {
  const auto got = c.header.value("kind", std::string{});
  if (got != kind) throw FormatError("expected a '" + kind + "' checkpoint, found '" + got + "'");
}

template <class T>
void save_encoder(const std::string& path, const encoder::EncoderModel<T>& model) {
  Container c;
  c.header = {{"kind", "encoder"}, {"config", model.config()}};
  append(c, "", model.params());
  write(path, c);
}

template <class T>
encoder::EncoderModel<T> load_encoder(const std::string& path) {
  auto c = read(path);
  require_kind(c, "encoder");
  encoder::EncoderConfig config;
  try {
    config = c.header.at("config").get<encoder::EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("encoder checkpoint header: ") + e.what());
  }
  config.validate();
  auto model = encoder::build_encoder<T>(config, 0);
  load_into(c, "", model.params());
  return model;
}

}  // namespace peft::checkpoint
