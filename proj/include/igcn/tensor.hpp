#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace igcn {

using Shape = std::vector<std::size_t>;

/// Raised whenever operand shapes are incompatible. The message always carries
/// the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad.data();
  }
};

/// Dense row-major array with reverse-mode gradient tracking.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values
/// produced by operations are treated as immutable, the only in-place writers
/// are parameter initialisation and the optimizer.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                       " elements but " + std::to_string(values.size()) + " values were given");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T{0}, requires_grad); }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return checked().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) throw ShapeError("tensor: axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return shape()[i];
  }
  std::size_t numel() const { return checked().value.size(); }

  std::span<const T> values() const { return checked().value; }
  std::span<T> mutable_values() { return checked().value; }
  const T* data() const { return checked().value.data(); }

  T item() const {
    if (numel() != 1) throw ShapeError("tensor: item() on non-scalar " + shape_str(shape()));
    return checked().value[0];
  }

  bool requires_grad() const { return checked().requires_grad; }
  void set_requires_grad(bool flag) {
    if (checked().backward_fn) throw std::logic_error("tensor: requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = flag;
  }

  bool has_grad() const { return !checked().grad.empty(); }
  std::span<const T> grad() const { return checked().grad; }
  std::span<T> mutable_grad() { return std::span<T>(checked().grad_buffer(), numel()); }
  void zero_grad() { checked().grad.clear(); }

  /// New leaf with a copy of the values and no history.
  Tensor detach() const { return Tensor(shape(), checked().value, false); }

  /// Backpropagates from a single-element tensor. The recorded graph is
  /// released as it is consumed, so a graph supports one backward pass.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward: expected a scalar, got " + shape_str(shape()));
    if (!requires_grad()) throw std::logic_error("backward: tensor does not require grad");

    // Holding owning pointers keeps every node alive while parents are released.
    std::vector<NodePtr> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->parents.size()) {
        NodePtr p = top.first->parents[top.second++];
        if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
      } else {
        order.push_back(std::move(top.first));
        stack.pop_back();
      }
    }

    node_->grad_buffer()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = it->get();
      if (!n->backward_fn) continue;
      if (!n->grad.empty()) n->backward_fn(*n);
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }

  const NodePtr& node() const { return node_; }

  /// Builds an operation result. History is recorded only when grad mode is
  /// on and at least one input requires grad.
  static Tensor make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor> inputs,
                            std::function<void(Node<T>&)> backward_fn) {
    Tensor out(std::move(shape), std::move(values), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  Node<T>& checked() const {
    if (!node_) throw std::logic_error("tensor: use of an undefined tensor");
    return *node_;
  }

  NodePtr node_;
};

/// Grad buffer of the i-th parent, or nullptr when that parent is not tracked.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = self.parents.at(i);
  return p->requires_grad ? p->grad_buffer() : nullptr;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad = false) {
  std::vector<To> v(t.values().begin(), t.values().end());
  return Tensor<To>(t.shape(), std::move(v), requires_grad);
}

}  // namespace igcn
