#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "uformer/tensor.hpp"

namespace uformer {

// Differentiable primitives. Every function records its adjoint when any
// operand needs a gradient. Feature maps are channel-first [C, H, W]; token
// matrices are channel-last [..., C].

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);

/// x + b where b's shape is a trailing suffix of x's shape (bias rows,
/// per-window tables).
template <typename T> Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& b);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// a: [..., m, k]. b: [k, n] shared across the batch, or [..., k, n] with the
/// same leading extents as a.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Max-subtracted softmax along `axis`.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// Normalizes over the last axis, then applies gamma/beta of that extent.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5);

struct Activation {
  enum class Kind { gelu, leaky_relu };
  Kind kind = Kind::gelu;
  double slope = 0.2;

  static Activation gelu() { return {Kind::gelu, 0.0}; }
  static Activation leaky_relu(double slope = 0.2) { return {Kind::leaky_relu, slope}; }
};

/// Exact (erf-based) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.2);
template <typename T> Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);

struct Conv2dOptions {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
};

/// Cross-correlation. x: [Cin, H, W], weight: [Cout, Cin/groups, kh, kw],
/// bias: [Cout] or undefined. Zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opts = {});

/// Adjoint of the matching strided conv2d. x: [Cin, H, W],
/// weight: [Cin, Cout, kh, kw]. Output extents (H-1)*stride + kh.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::int64_t stride = 2);

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

/// out.flat[i] = x.flat[index[i]]. Indices may repeat; the adjoint
/// scatter-adds. Backs padding, rolls, window partitioning and bias lookup.
template <typename T> Tensor<T> take(const Tensor<T>& x, const IndexMap& index, Shape out_shape);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

}  // namespace uformer
