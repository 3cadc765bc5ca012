#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace uformer {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the dynamic graph. Non-leaf nodes own a closure that reads
// their accumulated `grad` and adds the adjoint into each input.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool needs_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
  bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

/// Dense row-major tensor with an optional gradient slot. Copies are cheap
/// handles onto the same storage; values produced by an operation are never
/// mutated afterwards.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t dim(std::size_t axis) const;
  std::int64_t numel() const;

  std::span<const T> data() const;
  /// Writable view of a leaf's storage (parameters, inputs). Throws on
  /// operation outputs.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool needs_grad() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Gradients accumulate into every
  /// requires_grad leaf; the caller zeroes them between steps.
  void backward() const;

  /// Leaf copy of the current value, disconnected from the graph.
  Tensor detach() const;
  const char* op() const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node<T>> node);

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Topologically ordered list of the operations reachable from a root.
template <typename T>
class ComputationRecord {
 public:
  static ComputationRecord trace(const Tensor<T>& root);

  const std::vector<detail::Node<T>*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

  /// Runs each recorded adjoint once, outputs before inputs.
  void replay_adjoints() const;

 private:
  std::vector<detail::Node<T>*> order_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Diagnostic mode: every operation verifies its output is finite and throws
/// NumericError naming the operation otherwise.
bool finite_check_enabled();
void set_finite_check(bool on);

namespace detail {

// Wraps a freshly computed value into a tensor, recording the adjoint when
// any input participates in differentiation.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward_fn);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class ComputationRecord<float>;
extern template class ComputationRecord<double>;

}  // namespace uformer
