#include "uformer/layers.hpp"

#include "uformer/error.hpp"

namespace uformer {

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double stddev) {
  std::vector<T> data(static_cast<std::size_t>(numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.truncated_normal(stddev));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::make(std::int64_t dim) {
  return {Tensor<T>::full({dim}, T(1), true), Tensor<T>::zeros({dim}, true)};
}

template <typename T>
void LayerNormParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

template <typename T>
LinearParams<T> LinearParams<T>::make(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng) {
  LinearParams p;
  p.weight = trunc_normal<T>({in, out}, rng);
  if (with_bias) p.bias = Tensor<T>::zeros({out}, true);
  return p;
}

template <typename T>
void LinearParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, false});
}

template <typename T>
ConvParams<T> ConvParams<T>::make(std::int64_t in, std::int64_t out, std::int64_t kernel, Conv2dOptions options,
                                  Rng& rng, bool transposed) {
  if (in % options.groups != 0 || out % options.groups != 0) {
    throw ConfigError("convolution channels not divisible by groups");
  }
  ConvParams p;
  p.options = options;
  p.weight = transposed ? trunc_normal<T>({in, out, kernel, kernel}, rng)
                        : trunc_normal<T>({out, in / options.groups, kernel, kernel}, rng);
  p.bias = Tensor<T>::zeros({out}, true);
  return p;
}

template <typename T>
void ConvParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, false});
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  auto y = matmul(x, p.weight);
  return p.bias.defined() ? add_broadcast(y, p.bias) : y;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gamma, p.beta, 1e-5);
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("expected a [C,H,W] map, got " + shape_str(x.shape()));
  return reshape(permute(x, {1, 2, 0}), Shape{x.dim(1) * x.dim(2), x.dim(0)});
}

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::int64_t height, std::int64_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width) {
    throw DimensionError("token matrix " + shape_str(tokens.shape()) + " does not cover a " + std::to_string(height) +
                         "x" + std::to_string(width) + " map");
  }
  return permute(reshape(tokens, Shape{height, width, tokens.dim(1)}), {2, 0, 1});
}

#define UFORMER_INSTANTIATE_LAYERS(T)                                                  \
  template struct LayerNormParams<T>;                                                  \
  template struct LinearParams<T>;                                                     \
  template struct ConvParams<T>;                                                       \
  template Tensor<T> trunc_normal(Shape, Rng&, double);                                \
  template Tensor<T> linear(const Tensor<T>&, const LinearParams<T>&);                 \
  template Tensor<T> layer_norm(const Tensor<T>&, const LayerNormParams<T>&);          \
  template Tensor<T> map_to_tokens(const Tensor<T>&);                                  \
  template Tensor<T> tokens_to_map(const Tensor<T>&, std::int64_t, std::int64_t);

UFORMER_INSTANTIATE_LAYERS(float)
UFORMER_INSTANTIATE_LAYERS(double)

}  // namespace uformer
