#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "crepair/errors.hpp"
#include "crepair/rng.hpp"

namespace crepair {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool released = false;  // true once backward() has consumed this graph
  std::vector<std::shared_ptr<Node>> parents;
  // Scatters this node's grad into its parents' grads. Unset on leaves.
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Thread-local switch: when off, ops skip graph recording entirely, which is
// the inference fast path.
inline int& grad_mode_depth() {
  thread_local int depth = 0;
  return depth;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_depth() == 0; }

struct NoGradGuard {
  NoGradGuard() { ++detail::grad_mode_depth(); }
  ~NoGradGuard() { --detail::grad_mode_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Row-major 64-bit float tensor with reverse-mode autograd. Value semantics
// on the handle; the storage node is shared, so copies alias.
class Tensor {
 public:
  Tensor() : node_(nullptr) {}

  static Tensor zeros(Shape shape) {
    return from_vector(std::move(shape), {});
  }

  static Tensor full(Shape shape, double v) {
    auto node = std::make_shared<detail::Node>();
    node->value.assign(static_cast<std::size_t>(shape_numel(shape)), v);
    node->shape = std::move(shape);
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from_vector(Shape shape, std::vector<double> data) {
    auto node = std::make_shared<detail::Node>();
    std::size_t n = static_cast<std::size_t>(shape_numel(shape));
    if (data.empty()) data.assign(n, 0.0);
    if (data.size() != n) {
      throw NumericError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    node->shape = std::move(shape);
    node->value = std::move(data);
    return Tensor(std::move(node));
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.node_->value) v = stddev * rng.next_gaussian();
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const {
    return static_cast<std::int64_t>(node_->value.size());
  }

  const double* data() const { return node_->value.data(); }
  double* data_mut() { return node_->value.data(); }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (size() != 1) {
      throw NumericError("item() on non-scalar tensor " + shape_str(shape()));
    }
    return node_->value[0];
  }

  double at(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
  double at(int i, int j) const {
    return node_->value[static_cast<std::size_t>(i) *
                            static_cast<std::size_t>(node_->shape[1]) +
                        static_cast<std::size_t>(j)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) {
      throw NumericError("gradient not populated for tensor " +
                         shape_str(shape()));
    }
    return node_->grad;
  }
  std::vector<double>& grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node)
      : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op output node. Graph edges are recorded only when grad mode is
// on and at least one input needs gradients.
inline Tensor make_op_output(Shape shape,
                             std::initializer_list<Tensor> inputs,
                             std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  node->shape = std::move(shape);
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor& t : inputs) needs = needs || t.node()->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->parents.push_back(t.node_ptr());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable requires_grad tensor (so per-batch accumulation is a plain loop
// of backward calls); the graph is released afterwards.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw NumericError("backward expects a scalar loss, got " +
                       shape_str(loss.shape()));
  }
  if (!std::isfinite(loss.item())) {
    throw NumericError("backward called on non-finite loss");
  }
  detail::Node* root = loss.node();
  if (root->released) {
    throw NumericError("backward called twice on the same graph");
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS; parents land before children in `order`.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backprop) {
      for (auto& parent : node->parents) {
        if (parent->requires_grad) parent->ensure_grad();
      }
      node->backprop(*node);
    }
  }
  // Release the graph so intermediate storage can be reclaimed.
  for (detail::Node* node : order) {
    if (node->backprop) {
      node->backprop = nullptr;
      node->parents.clear();
      node->released = true;
    }
  }
}

}  // namespace crepair
