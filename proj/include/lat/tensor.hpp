#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lat/error.hpp"

namespace lat {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  // Interior node whose graph has already been walked by backward().
  bool consumed = false;
  // Leaf holding a gradient that has not been reset since the last backward().
  bool grad_pending = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major float64 array. Copies share the underlying node, so a
/// Tensor behaves like a handle into the computation graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError("non-finite value in tensor construction");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return from(std::move(s), std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[axis];
  }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? node_->shape[1] : (rank() == 1 ? node_->shape[0] : 1); }

  std::span<const double> values() const& { return node_->value; }
  std::span<const double> values() const&& = delete;  // would dangle once the temporary dies
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  // Direct write access, only for leaves (parameters, buffers, test fixtures).
  std::span<double> mutable_values() {
    if (!node_->is_leaf) throw ContractError("cannot mutate values of a computed tensor");
    return node_->value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const {
    if (node_->grad.empty()) throw ContractError("tensor has no gradient (backward not run)");
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    node_->grad_pending = false;
  }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw ContractError("requires_grad can only be changed on leaves");
    node_->requires_grad = on;
  }

  // Fresh leaf holding a copy of the values, outside any graph.
  Tensor detach() const { return from(shape(), node_->value, false); }

  detail::Node* node() const { return node_.get(); }
  const detail::NodePtr& node_ptr() const { return node_; }

  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// Builds the output node of an op. The backward closure receives the output
// node; it reads out.grad and accumulates into parents that require grad.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward_fn) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_mode()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

inline bool wants_grad(const NodePtr& p) { return p->requires_grad; }

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Populates grad on every tensor the
/// loss depends on. The graph is released afterwards; a second call on the
/// same loss, or a sweep into leaves whose gradient was not reset, is an error.
inline void backward(const Tensor& loss) {
  using detail::Node;
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (root->consumed) throw ContractError("backward called twice on the same graph");
  if (!root->requires_grad) throw ContractError("loss does not depend on any tensor requiring grad");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->is_leaf && n->grad_pending) {
      throw ContractError("gradient of a leaf was not reset before a new backward pass");
    }
  }
  for (Node* n : order) {
    if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
    else if (!n->is_leaf) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->is_leaf) {
      n->grad_pending = true;
    } else {
      n->consumed = true;
      n->requires_grad = false;
      n->parents.clear();
      n->backward_fn = nullptr;
    }
  }
}

}  // namespace lat
