#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vlab/tensor.hpp"

namespace vlab {

// Named handles to parameter tensors. Entries share storage with the model
// structs they were collected from; order is registration order and is part
// of the determinism contract (optimizer walks it in order).
template <typename T>
class ParamSetT {
 public:
  void add(const std::string& name, TensorT<T> t) {
    check(!has(name), "param set: duplicate name '" + name + "'");
    items_.emplace_back(name, std::move(t));
  }

  bool has(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return true;
    return false;
  }

  TensorT<T>& at(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return t;
    throw ContractError("param set: no parameter named '" + name + "'");
  }

  const TensorT<T>& at(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw ContractError("param set: no parameter named '" + name + "'");
  }

  std::vector<std::pair<std::string, TensorT<T>>>& items() { return items_; }
  const std::vector<std::pair<std::string, TensorT<T>>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  Index total_elements() const {
    Index n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void set_requires_grad(bool rg) {
    for (auto& [name, t] : items_) t.set_requires_grad(rg);
  }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  // Collector visitor for the module structs' visit() methods.
  auto collector() {
    return [this](const std::string& name, TensorT<T>& t) { this->add(name, t); };
  }

 private:
  std::vector<std::pair<std::string, TensorT<T>>> items_;
};

using ParamSet = ParamSetT<float>;

}  // namespace vlab
