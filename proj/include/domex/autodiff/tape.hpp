#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "domex/autodiff/tensor.hpp"
#include "domex/error.hpp"

namespace domex {

/// A named trainable tensor together with its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0f); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid reverse topological order and backward()
/// visits every node exactly once.
class Tape {
 public:
  // Called with the tape and the id of the node whose output gradient is
  // complete; the rule adds into the gradients of its parents.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    const char* tag = "leaf";
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, "constant", {}, false); }

  Var variable(Tensor value) { return push(std::move(value), {}, "variable", {}, true); }

  /// Leaf bound to a Parameter. Registering the same parameter twice returns
  /// the same node; backward() accumulates into Parameter::grad.
  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
      return Var(this, it->second);
    }
    Var v = push(p.value, {}, "parameter", {}, true);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Records an operation result. The node requires a gradient iff any
  /// parent does; the backward rule is skipped otherwise.
  Var record(Tensor value, std::vector<Var> parents, const char* tag, BackwardFn fn) {
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    bool rg = false;
    for (const Var& p : parents) {
      if (&p.tape() != this) throw StateError(std::string(tag) + ": operand from another tape");
      ids.push_back(p.id());
      rg = rg || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), std::move(ids), tag, std::move(fn), rg);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Mutable gradient of node `id`; valid only during backward().
  Tensor& grad_mut(std::size_t id) { return nodes_[id].grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Propagates d(root)/d(node) to every node that requires a gradient and
  /// adds the result for parameter leaves into Parameter::grad. Node
  /// gradients are reset first, so calling twice on one tape without zeroing
  /// the parameters accumulates twice.
  void backward(Var root) {
    if (&root.tape() != this) throw StateError("backward: root from another tape");
    const Node& r = nodes_[root.id()];
    if (r.value.size() != 1) {
      throw InputError("backward: root must be scalar, got shape " + to_string(r.value.shape()));
    }
    for (std::size_t i = 0; i <= root.id(); ++i) {
      Node& n = nodes_[i];
      if (n.requires_grad) {
        if (n.grad.shape() != n.value.shape()) {
          n.grad = Tensor::zeros_like(n.value);
        } else {
          n.grad.fill(0.0f);
        }
      }
    }
    if (!r.requires_grad) return;
    nodes_[root.id()].grad[0] = 1.0f;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        auto g = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
      }
    }
  }

 private:
  Var push(Tensor value, std::vector<std::size_t> parents, const char* tag, BackwardFn fn,
           bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = std::move(fn);
    n.tag = tag;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // stable references while recording
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace domex
