#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "m2/autodiff.hpp"
#include "m2/tensor.hpp"

namespace m2 {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

// Flat, ordered collection of named parameters. Layers refer to entries by
// ParamId, so a store (and the model holding it) can be copied or cast to
// another precision without invalidating references.
template <typename T>
class ParamStore {
 public:
  ParamId add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    ParamId id{params_.size()};
    index_.emplace(name, id.index);
    params_.push_back({std::move(name), std::move(value), trainable});
    return id;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](ParamId id) { return params_.at(id.index); }
  const Parameter<T>& operator[](ParamId id) const { return params_.at(id.index); }
  Parameter<T>& at(std::size_t i) { return params_.at(i); }
  const Parameter<T>& at(std::size_t i) const { return params_.at(i); }
  const Tensor<T>& value(ParamId id) const { return params_.at(id.index).value; }
  Tensor<T>& value(ParamId id) { return params_.at(id.index).value; }

  ParamId find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? ParamId{} : ParamId{it->second};
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  // Zero-filled gradient buffers, one per parameter.
  std::vector<Tensor<T>> zero_grads() const {
    std::vector<Tensor<T>> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.emplace_back(p.value.shape());
    return g;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>(), p.trainable);
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace m2
