/**
 * Copyright      2026  The llmfuse Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "llmfuse/errors.hpp"
#include "llmfuse/numcore/tensor.hpp"

namespace llmfuse {

// True when `path` lies under `prefix`, honoring '/' component boundaries:
// "lm/layer1" covers "lm/layer1/attn/wq" but not "lm/layer10/attn/wq".
inline bool path_has_prefix(std::string_view path, std::string_view prefix) {
  if (prefix.empty()) return true;
  if (path.size() < prefix.size() || path.substr(0, prefix.size()) != prefix) return false;
  return path.size() == prefix.size() || prefix.back() == '/' || path[prefix.size()] == '/';
}

// Named parameters keyed by '/'-separated path, plus the set of frozen path
// prefixes that optimizers must leave untouched. Iteration order is the
// lexicographic path order, so everything built on it is deterministic.
template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  Tensor<T>& add(const std::string& path, Tensor<T> tensor) {
    if (path.empty()) throw ArgumentError("parameter path must be non-empty");
    auto [it, inserted] = params_.emplace(path, std::move(tensor));
    if (!inserted) throw ArgumentError("duplicate parameter path: " + path);
    return it->second;
  }

  // Replaces an existing value or inserts a new one.
  Tensor<T>& set(const std::string& path, Tensor<T> tensor) {
    return params_.insert_or_assign(path, std::move(tensor)).first->second;
  }

  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  Tensor<T>& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw ArgumentError("unknown parameter: " + path);
    return it->second;
  }
  const Tensor<T>& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw ArgumentError("unknown parameter: " + path);
    return it->second;
  }

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::vector<std::string> paths(std::string_view prefix = {}) const {
    std::vector<std::string> out;
    for (const auto& [p, _] : params_) {
      if (path_has_prefix(p, prefix)) out.push_back(p);
    }
    return out;
  }

  void freeze(const std::string& prefix) { frozen_.insert(prefix); }
  void unfreeze_all() { frozen_.clear(); }
  const std::set<std::string>& frozen_prefixes() const { return frozen_; }

  // Freezes every parameter not covered by one of `trainable`.
  void set_trainable(const std::vector<std::string>& trainable) {
    frozen_.clear();
    for (const auto& [p, _] : params_) {
      bool keep = false;
      for (const auto& prefix : trainable) keep = keep || path_has_prefix(p, prefix);
      if (!keep) frozen_.insert(p);
    }
  }

  bool is_frozen(std::string_view path) const {
    for (const auto& prefix : frozen_) {
      if (path_has_prefix(path, prefix)) return true;
    }
    return false;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }
  void drop_grad() {
    for (auto& [_, t] : params_) t.drop_grad();
  }

  std::size_t parameter_count(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& [p, t] : params_) {
      if (!trainable_only || !is_frozen(p)) n += t.size();
    }
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [p, t] : params_) out.add(p, t.template cast<U>());
    for (const auto& f : frozen_) out.freeze(f);
    return out;
  }

  // Values only; frozen sets and gradients are not compared.
  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  Map params_;
  std::set<std::string> frozen_;
};

}  // namespace llmfuse
