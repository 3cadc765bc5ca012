#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uformer/layers.hpp"
#include "uformer/lewin.hpp"

namespace uformer {

enum class SkipMode { concat, cross, concat_cross };

std::string to_string(SkipMode mode);
SkipMode parse_skip_mode(const std::string& text);

struct UformerConfig {
  std::int64_t base_channels = 16;
  std::int64_t stages = 4;
  std::vector<std::int64_t> encoder_depths{2, 2, 2, 2};
  std::int64_t bottleneck_depth = 2;
  std::int64_t window = 8;
  std::int64_t head_dim = 0;  // 0 means base_channels
  std::int64_t ffn_expansion = 4;
  bool use_modulator = true;
  bool use_shift = true;
  bool modulator_before_shift = false;
  // Blocks whose 0-based index has this parity are shifted.
  std::int64_t shift_parity = 1;
  SkipMode skip_mode = SkipMode::concat;
  std::int64_t in_channels = 3;
  double leaky_slope = 0.2;

  static UformerConfig tiny();
  static UformerConfig uformer_t();
  static UformerConfig uformer_s();
  static UformerConfig uformer_b();

  std::int64_t effective_head_dim() const { return head_dim > 0 ? head_dim : base_channels; }
  /// Decoder stage l has the depth of encoder stage l.
  std::vector<std::int64_t> decoder_depths() const { return encoder_depths; }
  /// Smallest admissible input extent: the bottleneck must be at least 1x1.
  std::int64_t min_extent() const { return std::int64_t{1} << stages; }
  std::int64_t stage_channels(std::int64_t l) const { return base_channels << l; }
  /// Width of the decoder blocks at stage l.
  std::int64_t decoder_channels(std::int64_t l) const;
  bool block_shifted(std::int64_t index) const { return use_shift && index % 2 == shift_parity; }

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;
  bool operator==(const UformerConfig&) const = default;
};

template <typename T>
struct UformerParams {
  UformerConfig config;
  ConvParams<T> input_proj;
  std::vector<std::vector<LeWinBlockParams<T>>> encoder;  // [stage][block]
  std::vector<ConvParams<T>> downsample;                  // [stage]
  std::vector<LeWinBlockParams<T>> bottleneck;
  std::vector<ConvParams<T>> upsample;                    // [stage]: into decoder stage l
  std::vector<std::vector<LeWinBlockParams<T>>> decoder;  // [stage][block]
  ConvParams<T> output_proj;

  /// Exhaustive registry in a fixed order; names are unique.
  ParamList<T> parameters() const;
  std::int64_t parameter_count() const;
};

struct BuildOptions {
  bool zero_output_proj = false;
};

template <typename T>
UformerParams<T> build(const UformerConfig& config, std::uint64_t seed, BuildOptions options = {});

/// Shape of one named activation, recorded by an instrumented forward.
struct StageShape {
  std::string name;
  Shape shape;
};

/// I' = I + R for an input [in_channels, H, W] with H, W >= 2^K.
template <typename T>
Tensor<T> forward(const Tensor<T>& input, const UformerParams<T>& p, std::vector<StageShape>* trace = nullptr);

/// 4x4 stride-2 convolution, channels c -> 2c, extents halved. Needs even extents.
template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ConvParams<T>& conv);

/// 2x2 stride-2 transposed convolution, extents doubled.
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ConvParams<T>& conv);

/// Joins encoder features into the decoder. concat returns [dec, enc] stacked
/// on channels; the attention modes run the stage's first block with the
/// encoder features as its skip input.
template <typename T>
Tensor<T> skip_join(const Tensor<T>& enc, const Tensor<T>& dec, SkipMode mode,
                    const LeWinBlockParams<T>* first_block = nullptr);

}  // namespace uformer
