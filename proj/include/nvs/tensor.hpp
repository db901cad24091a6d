#pragma once

// Reverse-mode automatic differentiation over dense double-precision arrays.
//
// Tensors are shared handles to graph nodes. Every operation that consumes a
// tensor requiring gradients records its inputs and a backward rule on the
// result node; the resulting DAG, ordered by creation sequence, is the tape.
// Data of a node that has been consumed is never mutated, only its gradient.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nvs/errors.hpp"

namespace nvs {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

namespace detail {

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (nvs::numel(shape) != data.size())
      throw ShapeError(detail::cat("tensor shape ", to_string(shape), " holds ", nvs::numel(shape),
                                   " elements but ", data.size(), " values were given"));
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = nvs::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = nvs::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  template <typename Rng>
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(nvs::numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const double> data() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError(detail::cat("item() on tensor of shape ", to_string(shape())));
    return node_->data[0];
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && node_->requires_grad; }
  std::span<const double> grad() const { return node_->grad; }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  // Writable view of a leaf's values; used by optimizers between steps.
  std::span<double> leaf_data() {
    if (!node_->is_leaf())
      throw std::logic_error(detail::cat("in-place write to non-leaf tensor produced by ", node_->op));
    return node_->data;
  }

  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

// Builds the result node of an operation. The backward rule and inputs are
// only retained when recording is enabled and some input requires grad.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->seq = next_seq();
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (grad_mode() && any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of input i, or nullptr when that input takes no gradient.
inline double* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

}  // namespace detail

// Topologically ordered record of the operations reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{&root.node()};
    seen.insert(stack.back());
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      tape.nodes_.push_back(n);
      for (auto& in : n->inputs) {
        if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
      }
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const Node* a, const Node* b) { return a->seq < b->seq; });
    return tape;
  }

  std::span<Node* const> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  // Leaves accumulate across calls; interior gradients are recomputed.
  void backward(const Tensor& loss) const {
    if (loss.numel() != 1)
      throw ShapeError(detail::cat("backward() needs a scalar loss, got shape ", to_string(loss.shape())));
    if (!std::isfinite(loss.item())) throw NumericalError("backward() on non-finite loss");
    if (nodes_.empty()) return;
    for (Node* n : nodes_)
      if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    Node& root = loss.node();
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = *it;
      if (n->backward) n->backward(*n);
    }
  }

 private:
  std::vector<Node*> nodes_;
};

inline void backward(const Tensor& loss) { Tape::record(loss).backward(loss); }

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace nvs
