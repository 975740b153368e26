#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pudnet/errors.hpp"

namespace pudnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
class GradTape;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;
  bool leaf = true;
  std::atomic<int> tape_refs{0};
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

}  // namespace detail

/// Dense row-major array with optional participation in a GradTape.
///
/// A Tensor is a cheap handle: copies share storage. Values are immutable
/// once created except through mutable_data() on a leaf that no live tape
/// references, which is how optimizers update parameters.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return checked().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return checked().value.size(); }

  std::span<const T> data() const { return checked().value; }
  T at(std::size_t flat) const;
  T item() const;

  /// Writable view for leaves. Throws ContractError while a tape holds the node.
  std::span<T> mutable_data();

  bool requires_grad() const { return checked().requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return checked().leaf; }

  bool has_grad() const { return !checked().grad.empty(); }
  /// Accumulated gradient; zeros when none has been accumulated.
  std::vector<T> grad() const;
  void zero_grad() { checked().grad.clear(); }

  /// Leaf copy of the current values, outside any tape.
  Tensor detach() const;

  /// Shape-preserving conversion to another precision (always a detached leaf).
  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  // Internal: used by ops and the tape.
  const detail::NodePtr<T>& node() const { return node_; }
  explicit Tensor(detail::NodePtr<T> node) : node_(std::move(node)) {}

 private:
  detail::Node<T>& checked() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
  }

  detail::NodePtr<T> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Ordered record of differentiable ops executed while the tape is active.
///
/// Ops record themselves only when some input requires a gradient and a tape
/// is active on the calling thread. backward() replays the record in reverse,
/// accumulates into every reachable requires_grad leaf and then clears.
template <class T>
class GradTape {
 public:
  // Receives the op's output node (value and accumulated gradient).
  using BackwardFn = std::function<void(const detail::Node<T>& out)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  ~GradTape() { clear(); }

  std::size_t size() const { return entries_.size(); }
  void clear();
  void backward(const Tensor<T>& loss);

  void record(const detail::NodePtr<T>& out,
              std::vector<detail::NodePtr<T>> inputs, BackwardFn fn);

  static GradTape* active() { return active_; }
  /// Number of ops recorded on any tape of this precision since start-up.
  static std::uint64_t total_recorded() { return total_recorded_.load(); }

 private:
  template <class>
  friend class TapeScope;
  template <class>
  friend class NoGradScope;

  struct Entry {
    detail::NodePtr<T> out;
    std::vector<detail::NodePtr<T>> inputs;
    BackwardFn fn;
  };

  std::vector<Entry> entries_;
  static inline thread_local GradTape* active_ = nullptr;
  static inline std::atomic<std::uint64_t> total_recorded_{0};
};

/// Makes a tape the active one for the current thread for its lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape) : prev_(GradTape<T>::active_) {
    GradTape<T>::active_ = &tape;
  }
  ~TapeScope() { GradTape<T>::active_ = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* prev_;
};

/// Suspends recording on the current thread.
template <class T>
class NoGradScope {
 public:
  NoGradScope() : prev_(GradTape<T>::active_) { GradTape<T>::active_ = nullptr; }
  ~NoGradScope() { GradTape<T>::active_ = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<T>* prev_;
};

/// Backpropagates a scalar loss through the active tape.
template <class T>
void backward(const Tensor<T>& loss) {
  auto* tape = GradTape<T>::active();
  if (!tape) throw ContractError("backward() called without an active GradTape");
  tape->backward(loss);
}

namespace detail {

template <class T>
std::vector<T>& grad_buffer(Node<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

template <class T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

/// Wraps a freshly computed value as an op output and records it if needed.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<NodePtr<T>> inputs,
                      typename GradTape<T>::BackwardFn fn, const char* op) {
  check_finite<T>(value, op);
  auto out = std::make_shared<Node<T>>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  auto* tape = GradTape<T>::active();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (tape && needs) {
    out->requires_grad = true;
    out->leaf = false;
    tape->record(out, std::move(inputs), std::move(fn));
  }
  return Tensor<T>(std::move(out));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor implementation

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  detail::check_finite<T>(values, "tensor construction");
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
  return shape()[axis];
}

template <class T>
T Tensor<T>::at(std::size_t flat) const {
  auto d = data();
  if (flat >= d.size()) throw IndexError("flat index out of range");
  return d[flat];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  auto& n = checked();
  if (!n.leaf) throw ContractError("in-place mutation of a non-leaf tensor");
  if (n.tape_refs.load() != 0) {
    throw ContractError("in-place mutation of a tensor referenced by an active tape");
  }
  return n.value;
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  auto& n = checked();
  if (!n.leaf) throw ContractError("requires_grad can only be set on leaves");
  n.requires_grad = flag;
  return *this;
}

template <class T>
std::vector<T> Tensor<T>::grad() const {
  const auto& n = checked();
  if (n.grad.empty()) return std::vector<T>(n.value.size(), T(0));
  return n.grad;
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), std::vector<T>(data().begin(), data().end()));
}

// ---------------------------------------------------------------------------
// GradTape implementation

template <class T>
void GradTape<T>::record(const detail::NodePtr<T>& out,
                         std::vector<detail::NodePtr<T>> inputs, BackwardFn fn) {
  out->tape_refs.fetch_add(1);
  for (const auto& in : inputs) in->tape_refs.fetch_add(1);
  entries_.push_back(Entry{out, std::move(inputs), std::move(fn)});
  total_recorded_.fetch_add(1);
}

template <class T>
void GradTape<T>::clear() {
  for (auto& e : entries_) {
    e.out->tape_refs.fetch_sub(1);
    for (auto& in : e.inputs) in->tape_refs.fetch_sub(1);
  }
  entries_.clear();
}

template <class T>
void GradTape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw ContractError("backward() on undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto& root = *loss.node();
  if (!root.requires_grad) {
    clear();
    return;
  }
  detail::grad_buffer(root)[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& out = *it->out;
    if (out.grad.empty()) continue;
    it->fn(out);
    if (!out.leaf) std::vector<T>().swap(out.grad);
  }
  clear();
}

}  // namespace pudnet
