#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace adr {

/// Raised when tensor shapes do not satisfy an operation's contract. The
/// message names the offending dimension or input index.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for numerical faults caught in checked mode (division by zero,
/// non-positive pow base, NaN gradients, non-finite losses).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed files, missing data and I/O failures.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
inline bool& checked_flag() {
  static thread_local bool flag = true;
  return flag;
}
inline bool& grad_flag() {
  static thread_local bool flag = true;
  return flag;
}
}  // namespace detail

/// Checked mode adds NaN and domain assertions to ops and the optimizer.
inline bool checked_mode() { return detail::checked_flag(); }
inline void set_checked_mode(bool on) { detail::checked_flag() = on; }

inline bool grad_enabled() { return detail::grad_flag(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_flag()) { detail::grad_flag() = false; }
  ~NoGradGuard() { detail::grad_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class CheckedModeGuard {
 public:
  explicit CheckedModeGuard(bool on) : previous_(detail::checked_flag()) {
    detail::checked_flag() = on;
  }
  ~CheckedModeGuard() { detail::checked_flag() = previous_; }
  CheckedModeGuard(const CheckedModeGuard&) = delete;
  CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

 private:
  bool previous_;
};

/// One recorded value in the computation graph. Leaves have no parents and
/// no backward function; interior nodes release both once backward() has
/// consumed them.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  bool is_leaf() const { return parents.empty() && !backward; }
};

/// Dense row-major N-dimensional array with optional gradient tape linkage.
/// Copies are shallow: two Tensor handles may refer to the same node, which
/// is how parameters are shared between modules and the optimizer.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->value.assign(adr::numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    if (values.size() != adr::numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + adr::to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) {
      throw ShapeError("dimension index " + std::to_string(i) + " out of range for shape " +
                       adr::to_string(shape()));
    }
    return node_->shape[i];
  }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Mutable view of the values. Only leaves should be written through this.
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() requires a single-element tensor, got " + adr::to_string(shape()));
    }
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  /// Value at a 4-D (n, c, y, x) position of an NCHW tensor.
  T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    const auto& s = node_->shape;
    return node_->value[((n * s[1] + c) * s[2] + y) * s[3] + x];
  }

  /// A new leaf holding a copy of the values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), values()); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    std::transform(node_->value.begin(), node_->value.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out));
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Builds the output of an op. The graph link is recorded only when grad
/// mode is on and some input requires a gradient.
template <class T, class Backward>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs, Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  node.parents.reserve(inputs.size());
  for (auto& in : inputs) node.parents.push_back(in.defined() ? in.node() : nullptr);
  node.backward = std::forward<Backward>(backward);
  return out;
}

template <class T>
inline bool wants_grad(const std::shared_ptr<Node<T>>& p) {
  return p && p->requires_grad;
}

}  // namespace detail

/// Reverse sweep from a scalar loss. Every grad-flagged leaf reachable from
/// the loss accumulates its gradient; interior nodes are released. Calling
/// backward twice on the same graph throws.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  auto root = loss.node();
  if (root->consumed) {
    throw std::logic_error("backward() called twice on the same graph without rebuilding it");
  }
  if (!root->requires_grad) {
    throw std::logic_error("backward() on a loss that does not depend on any grad-flagged tensor");
  }

  // Iterative post-order DFS; the reversed order is a valid topological
  // order. `consumed` doubles as the visit mark and is reset afterwards.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
  std::vector<Node<T>*> marked;
  auto mark = [&](Node<T>* n) {
    n->consumed = true;
    marked.push_back(n);
  };
  mark(root.get());
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      std::shared_ptr<Node<T>> p = top.first->parents[top.second++];
      if (p && p->requires_grad && !p->consumed) {
        mark(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }
  for (auto* n : marked) n->consumed = false;

  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = it->get();
    if (!n->backward) continue;
    n->ensure_grad();
    for (auto& p : n->parents) {
      if (p && p->requires_grad) p->ensure_grad();
    }
    n->backward(*n);
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
  if (!root->is_leaf()) root->consumed = true;
}

}  // namespace adr
