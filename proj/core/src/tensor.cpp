#include "uformer/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "uformer/error.hpp"

namespace uformer {

namespace {
thread_local bool g_grad_enabled = true;
bool g_finite_check = false;
}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

bool finite_check_enabled() { return g_finite_check; }
void set_finite_check(bool on) { g_finite_check = on; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (uformer::numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                         std::to_string(data.size()) + " scalars");
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
  node_->needs_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(uformer::numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->shape;
}

template <typename T>
std::int64_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::int64_t Tensor<T>::numel() const {
  return static_cast<std::int64_t>(node_ ? node_->value.size() : 0);
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->value;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_) throw UsageError("use of an undefined tensor");
  if (!node_->is_leaf()) {
    throw UsageError(std::string("output of '") + node_->op + "' is immutable");
  }
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() requires a single-element tensor, got " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!node_) throw UsageError("use of an undefined tensor");
  if (!node_->is_leaf()) throw UsageError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
  node_->needs_grad = on;
}

template <typename T>
bool Tensor<T>::needs_grad() const {
  return node_ && node_->needs_grad;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (!node_) throw UsageError("backward on an undefined tensor");
  if (node_->value.size() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_str(node_->shape));
  }
  if (!node_->needs_grad) return;
  auto record = ComputationRecord<T>::trace(*this);
  node_->grad_buffer()[0] += T(1);
  record.replay_adjoints();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->value, false);
}

template <typename T>
const char* Tensor<T>::op() const {
  return node_ ? node_->op : "undefined";
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<detail::Node<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
ComputationRecord<T> ComputationRecord<T>::trace(const Tensor<T>& root) {
  ComputationRecord rec;
  if (!root.defined() || !root.needs_grad()) return rec;
  // Iterative post-order DFS over nodes that carry gradient.
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child->needs_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      rec.order_.push_back(node);
      stack.pop_back();
    }
  }
  return rec;
}

template <typename T>
void ComputationRecord<T>::replay_adjoints() const {
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto* node = *it;
    if (node->is_leaf() || node->grad.empty() || !node->backward_fn) continue;
    node->backward_fn(*node);
    // Intermediate adjoints are consumed; only leaves accumulate.
    std::vector<T>().swap(node->grad);
  }
}

namespace detail {

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  if (g_finite_check) {
    for (const T v : value) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by '") + op + "'");
    }
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->needs_grad;
  }
  if (needs) {
    node->needs_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>::from_node(std::move(node));
}

template Tensor<float> make_result(const char*, Shape, std::vector<float>,
                                   std::vector<std::shared_ptr<Node<float>>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    std::vector<std::shared_ptr<Node<double>>>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class ComputationRecord<float>;
template class ComputationRecord<double>;

}  // namespace uformer
