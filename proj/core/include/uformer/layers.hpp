#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uformer/ops.hpp"
#include "uformer/random.hpp"
#include "uformer/tensor.hpp"

namespace uformer {

/// Registry entry for one learnable tensor.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // false for biases, norm affines, modulators, bias tables
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNormParams make(std::int64_t dim);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Token-wise affine map; weight is [in, out], bias [out] or undefined.
template <typename T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;

  static LinearParams make(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
  std::int64_t in_features() const { return weight.dim(0); }
  std::int64_t out_features() const { return weight.dim(1); }
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
  Conv2dOptions options;

  /// weight [out, in/groups, k, k] (or [in, out, k, k] when transposed).
  static ConvParams make(std::int64_t in, std::int64_t out, std::int64_t kernel, Conv2dOptions options, Rng& rng,
                         bool transposed = false);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Truncated-normal (std 0.02) tensor used for every weight initialization.
template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double stddev = 0.02);

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p);

/// [C, H, W] <-> [H*W, C]
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& x);
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::int64_t height, std::int64_t width);

}  // namespace uformer
