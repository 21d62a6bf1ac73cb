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

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "llmfuse/errors.hpp"
#include "llmfuse/numcore/param_store.hpp"
#include "llmfuse/numcore/tensor.hpp"

namespace llmfuse {

template <class T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

// Reverse-mode recording of one forward computation. A tape is built for a
// single step and discarded; parameter gradients land in the ParamStore's
// grad slots when backward() runs. Frozen parameters are recorded as
// constants, so no gradient is ever produced for them.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // Leaf bound to a stored parameter (by reference, no copy). Recording the
  // same parameter twice returns the same node.
  Var<T> param(ParamStore<T>& store, const std::string& path) {
    Tensor<T>& t = store.at(path);
    auto it = param_ids_.find(&t);
    if (it != param_ids_.end()) return {this, it->second};
    Node n;
    n.ref = &t;
    n.requires_grad = grad_enabled_ && !store.is_frozen(path);
    if (n.requires_grad) n.param = &t;
    nodes_.push_back(std::move(n));
    param_ids_.emplace(&t, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  // Records an op result. `requires_grad` should be true iff some input requires grad.
  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer for node `id`, zero-initialized on first access.
  std::span<T> grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), T{0});
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  std::size_t size() const { return nodes_.size(); }

  // Propagates d(loss)/d(node) to every reachable node and accumulates
  // parameter gradients into their ParamStore tensors.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw ArgumentError("backward: variable belongs to another tape");
    if (value(loss.id).size() != 1) {
      throw ArgumentError("backward requires a scalar loss, got shape " + shape_string(value(loss.id).shape()));
    }
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.param && !n.grad.empty()) {
        auto g = n.param->grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T>* param = nullptr;
    bool requires_grad = false;
    std::vector<T> grad;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> param_ids_;
  bool grad_enabled_ = true;
};

// Scoped inference mode: ops recorded inside keep no backward closures.
template <class T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.grad_enabled()) { tape.set_grad_enabled(false); }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

}  // namespace llmfuse
