#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "peft/diffengine/tensor.hpp"
#include "peft/errors.hpp"

namespace peft {

/// Group of a dotted parameter name: everything before the last component.
inline std::string group_of(const std::string& name) {
  auto pos = name.rfind('.');
  return pos == std::string::npos ? name : name.substr(0, pos);
}

/// True when `name` equals `prefix` or lies below it on a dot boundary.
inline bool under_prefix(const std::string& name, const std::string& prefix) {
  if (prefix.empty()) return true;
  if (name.size() < prefix.size() || name.compare(0, prefix.size(), prefix) != 0) return false;
  return name.size() == prefix.size() || name[prefix.size()] == '.';
}

/// Set of frozen name prefixes (dot-boundary matching).
struct FreezeMask {
  std::vector<std::string> frozen_prefixes;

  bool frozen(const std::string& name) const {
    return std::any_of(frozen_prefixes.begin(), frozen_prefixes.end(),
                       [&](const auto& p) { return under_prefix(name, p); });
  }
};

/// Initialisation rule applied per declared parameter.
enum class Init { normal, zeros, ones, identity };

/// A parameter declared by name and shape, without storage.
struct ParamDecl {
  std::string name;
  ad::Shape shape;
  Init init = Init::normal;
};

using ParameterLayout = std::vector<ParamDecl>;

inline ParameterLayout prefixed(const ParameterLayout& layout, const std::string& prefix) {
  ParameterLayout out;
  for (const auto& d : layout) out.push_back({prefix + "." + d.name, d.shape, d.init});
  return out;
}

inline std::size_t count_parameters(const ParameterLayout& layout) {
  std::size_t n = 0;
  for (const auto& d : layout) n += ad::numel_of(d.shape);
  return n;
}

/// Exact count of scalars not covered by the freeze mask.
inline std::size_t count_trainable(const ParameterLayout& layout, const FreezeMask& mask) {
  std::size_t n = 0;
  for (const auto& d : layout)
    if (!mask.frozen(d.name)) n += ad::numel_of(d.shape);
  return n;
}

template <class T>
ad::Tensor<T> init_tensor(const ad::Shape& shape, Init init, double stddev, std::mt19937_64& rng) {
  auto t = ad::Tensor<T>::zeros(shape);
  auto v = t.mutable_values();
  switch (init) {
    case Init::normal: {
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& x : v) x = static_cast<T>(dist(rng));
      break;
    }
    case Init::ones:
      std::fill(v.begin(), v.end(), T(1));
      break;
    case Init::identity: {
      if (shape.size() != 2 || shape[0] != shape[1]) throw ConfigError("identity init needs a square matrix");
      for (std::size_t i = 0; i < shape[0]; ++i) v[i * shape[0] + i] = T(1);
      break;
    }
    case Init::zeros:
      break;
  }
  return t;
}

template <class T>
struct NamedParameter {
  std::string name;
  ad::Tensor<T> tensor;
};

/// Ordered, name-addressable set of leaf tensors.
template <class T>
class ParameterStore {
 public:
  ad::Tensor<T>& add(const std::string& name, ad::Tensor<T> tensor) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(tensor)});
    return entries_.back().tensor;
  }

  const ad::Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return entries_[it->second].tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<NamedParameter<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& e : entries_)
      if (under_prefix(e.name, prefix)) e.tensor.set_requires_grad(trainable);
  }

  void add_all(const ParameterLayout& layout, double stddev, std::mt19937_64& rng,
               bool requires_grad = true) {
    for (const auto& d : layout) {
      auto t = init_tensor<T>(d.shape, d.init, stddev, rng);
      t.set_requires_grad(requires_grad);
      add(d.name, std::move(t));
    }
  }

  ParameterLayout layout() const {
    ParameterLayout out;
    for (const auto& e : entries_) out.push_back({e.name, e.tensor.shape()});
    return out;
  }

 private:
  std::vector<NamedParameter<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Sum of element counts over entries with requires_grad set.
template <class T>
std::size_t count_requires_grad(const std::vector<NamedParameter<T>>& params) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (p.tensor.requires_grad()) n += p.tensor.numel();
  return n;
}

}  // namespace peft
