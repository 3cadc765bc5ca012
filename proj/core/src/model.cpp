#include "uformer/model.hpp"

#include <cmath>

#include "uformer/error.hpp"
#include "uformer/windowing.hpp"

namespace uformer {

std::string to_string(SkipMode mode) {
  switch (mode) {
    case SkipMode::concat: return "concat";
    case SkipMode::cross: return "cross";
    case SkipMode::concat_cross: return "concat_cross";
  }
  return "concat";
}

SkipMode parse_skip_mode(const std::string& text) {
  if (text == "concat") return SkipMode::concat;
  if (text == "cross") return SkipMode::cross;
  if (text == "concat_cross") return SkipMode::concat_cross;
  throw ConfigError("unknown skip mode '" + text + "' (expected concat, cross or concat_cross)");
}

UformerConfig UformerConfig::tiny() {
  UformerConfig c;
  c.base_channels = 8;
  c.stages = 2;
  c.encoder_depths = {1, 1};
  c.bottleneck_depth = 2;
  c.window = 4;
  return c;
}

UformerConfig UformerConfig::uformer_t() { return UformerConfig{}; }

UformerConfig UformerConfig::uformer_s() {
  UformerConfig c;
  c.base_channels = 32;
  return c;
}

UformerConfig UformerConfig::uformer_b() {
  UformerConfig c;
  c.base_channels = 32;
  c.encoder_depths = {1, 2, 8, 8};
  return c;
}

std::int64_t UformerConfig::decoder_channels(std::int64_t l) const {
  return skip_mode == SkipMode::concat ? 2 * stage_channels(l) : stage_channels(l);
}

void UformerConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (base_channels < 1) fail("model.c must be positive");
  if (stages < 1 || stages > 16) fail("model.stages must lie in [1, 16]");
  if (static_cast<std::int64_t>(encoder_depths.size()) != stages) {
    fail("model.depths has " + std::to_string(encoder_depths.size()) + " entries for " + std::to_string(stages) +
         " stages");
  }
  for (auto d : encoder_depths)
    if (d < 1) fail("every stage depth must be positive");
  if (bottleneck_depth < 1) fail("model.bottleneck_depth must be positive");
  if (window < 1) fail("model.window must be positive");
  if (head_dim < 0) fail("model.head_dim must be non-negative");
  if (base_channels % effective_head_dim() != 0) {
    fail("stage width " + std::to_string(base_channels) + " is not divisible by head_dim " +
         std::to_string(effective_head_dim()));
  }
  if (ffn_expansion < 1) fail("model.ffn_expansion must be positive");
  if (shift_parity != 0 && shift_parity != 1) fail("model.shift_parity must be 0 or 1");
  if (in_channels < 1) fail("model.in_channels must be positive");
  if (!std::isfinite(leaky_slope)) fail("model.leaky_slope must be finite");
}

template <typename T>
ParamList<T> UformerParams<T>::parameters() const {
  ParamList<T> out;
  input_proj.collect("input_proj", out);
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    for (std::size_t b = 0; b < encoder[l].size(); ++b)
      encoder[l][b].collect("encoder." + std::to_string(l) + "." + std::to_string(b), out);
    downsample[l].collect("downsample." + std::to_string(l), out);
  }
  for (std::size_t b = 0; b < bottleneck.size(); ++b) bottleneck[b].collect("bottleneck." + std::to_string(b), out);
  for (std::size_t i = decoder.size(); i-- > 0;) {
    upsample[i].collect("upsample." + std::to_string(i), out);
    for (std::size_t b = 0; b < decoder[i].size(); ++b)
      decoder[i][b].collect("decoder." + std::to_string(i) + "." + std::to_string(b), out);
  }
  output_proj.collect("output_proj", out);
  return out;
}

template <typename T>
std::int64_t UformerParams<T>::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : parameters()) total += p.tensor.numel();
  return total;
}

template <typename T>
UformerParams<T> build(const UformerConfig& config, std::uint64_t seed, BuildOptions options) {
  config.validate();
  Rng rng(seed);
  const auto k = config.stages;
  const auto dk = config.effective_head_dim();
  UformerParams<T> p;
  p.config = config;

  auto spec_for = [&](std::int64_t dim, std::int64_t index) {
    LeWinBlockSpec s;
    s.dim = dim;
    s.heads = dim / dk;
    s.window = config.window;
    s.ffn_expansion = config.ffn_expansion;
    s.shifted = config.block_shifted(index);
    s.modulator_before_shift = config.modulator_before_shift;
    return s;
  };

  p.input_proj = ConvParams<T>::make(config.in_channels, config.base_channels, 3, Conv2dOptions{1, 1, 1}, rng);
  p.encoder.resize(static_cast<std::size_t>(k));
  for (std::int64_t l = 0; l < k; ++l) {
    const auto width = config.stage_channels(l);
    for (std::int64_t b = 0; b < config.encoder_depths[static_cast<std::size_t>(l)]; ++b)
      p.encoder[static_cast<std::size_t>(l)].push_back(make_lewin_block<T>(spec_for(width, b), rng));
    p.downsample.push_back(ConvParams<T>::make(width, 2 * width, 4, Conv2dOptions{2, 1, 1}, rng));
  }
  for (std::int64_t b = 0; b < config.bottleneck_depth; ++b)
    p.bottleneck.push_back(make_lewin_block<T>(spec_for(config.stage_channels(k), b), rng));

  p.upsample.resize(static_cast<std::size_t>(k));
  p.decoder.resize(static_cast<std::size_t>(k));
  for (std::int64_t l = k - 1; l >= 0; --l) {
    const auto in = l == k - 1 ? config.stage_channels(k) : config.decoder_channels(l + 1);
    p.upsample[static_cast<std::size_t>(l)] =
        ConvParams<T>::make(in, config.stage_channels(l), 2, Conv2dOptions{2, 0, 1}, rng, true);
    const auto width = config.decoder_channels(l);
    for (std::int64_t b = 0; b < config.decoder_depths()[static_cast<std::size_t>(l)]; ++b) {
      auto s = spec_for(width, b);
      s.modulator = config.use_modulator;
      if (b == 0 && config.skip_mode != SkipMode::concat) {
        s.skip = config.skip_mode == SkipMode::cross ? SkipAttention::cross : SkipAttention::concat_cross;
        s.skip_channels = config.stage_channels(l);
      }
      p.decoder[static_cast<std::size_t>(l)].push_back(make_lewin_block<T>(s, rng));
    }
  }
  p.output_proj =
      ConvParams<T>::make(config.decoder_channels(0), config.in_channels, 3, Conv2dOptions{1, 1, 1}, rng);
  if (options.zero_output_proj) {
    for (auto& v : p.output_proj.weight.mutable_data()) v = T(0);
    for (auto& v : p.output_proj.bias.mutable_data()) v = T(0);
  }
  return p;
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ConvParams<T>& conv) {
  if (x.rank() != 3) throw DimensionError("downsample expects [C,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw UsageError("downsample needs even extents, got " + shape_str(x.shape()));
  }
  return conv2d(x, conv.weight, conv.bias, conv.options);
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ConvParams<T>& conv) {
  if (x.rank() != 3) throw DimensionError("upsample expects [C,H,W], got " + shape_str(x.shape()));
  return conv_transpose2d(x, conv.weight, conv.bias, conv.options.stride);
}

template <typename T>
Tensor<T> skip_join(const Tensor<T>& enc, const Tensor<T>& dec, SkipMode mode, const LeWinBlockParams<T>* first_block) {
  if (enc.rank() != 3 || dec.rank() != 3 || enc.dim(1) != dec.dim(1) || enc.dim(2) != dec.dim(2)) {
    throw DimensionError("skip_join: encoder " + shape_str(enc.shape()) + " vs decoder " + shape_str(dec.shape()));
  }
  if (mode == SkipMode::concat) return concat(std::vector<Tensor<T>>{dec, enc}, 0);
  if (!first_block) throw UsageError("skip_join: attention skip modes need the stage's first block");
  return lewin_block_forward(dec, *first_block, &enc);
}

template <typename T>
Tensor<T> forward(const Tensor<T>& input, const UformerParams<T>& p, std::vector<StageShape>* trace) {
  const auto& c = p.config;
  if (input.rank() != 3 || input.dim(0) != c.in_channels) {
    throw DimensionError("model expects [" + std::to_string(c.in_channels) + ",H,W], got " +
                         shape_str(input.shape()));
  }
  if (input.dim(1) < c.min_extent() || input.dim(2) < c.min_extent()) {
    throw ConfigError("input " + shape_str(input.shape()) + " is smaller than the model minimum of " +
                      std::to_string(c.min_extent()) + "x" + std::to_string(c.min_extent()));
  }
  auto record = [&](std::string name, const Tensor<T>& t) {
    if (trace) trace->push_back({std::move(name), t.shape()});
  };

  const auto& ip = p.input_proj;
  auto y = activation(conv2d(input, ip.weight, ip.bias, ip.options), Activation::leaky_relu(c.leaky_slope));
  record("input_proj", y);

  std::vector<Tensor<T>> skips;
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    for (const auto& blk : p.encoder[l]) y = lewin_block_forward(y, blk);
    record("encoder." + std::to_string(l), y);
    skips.push_back(y);
    // Odd extents are reflect-padded by one so stage l+1 has ceil(h/2) rows.
    if (y.dim(1) % 2 != 0 || y.dim(2) % 2 != 0) y = reflect_pad(y, y.dim(1) % 2, y.dim(2) % 2);
    y = downsample(y, p.downsample[l]);
  }
  for (const auto& blk : p.bottleneck) y = lewin_block_forward(y, blk);
  record("bottleneck", y);

  for (std::size_t i = p.decoder.size(); i-- > 0;) {
    const auto& enc = skips[i];
    y = upsample(y, p.upsample[i]);
    if (y.dim(1) != enc.dim(1) || y.dim(2) != enc.dim(2)) y = crop(y, enc.dim(1), enc.dim(2));
    record("upsample." + std::to_string(i), y);
    const auto& blocks = p.decoder[i];
    std::size_t first = 0;
    if (c.skip_mode == SkipMode::concat) {
      y = skip_join(enc, y, SkipMode::concat);
    } else {
      y = skip_join(enc, y, c.skip_mode, &blocks[0]);
      first = 1;
    }
    for (std::size_t b = first; b < blocks.size(); ++b) y = lewin_block_forward(y, blocks[b]);
    record("decoder." + std::to_string(i), y);
  }
  const auto& op = p.output_proj;
  auto residual = conv2d(y, op.weight, op.bias, op.options);
  record("output_proj", residual);
  return add(input, residual);
}

#define UFORMER_INSTANTIATE_MODEL(T)                                                                       \
  template struct UformerParams<T>;                                                                        \
  template UformerParams<T> build(const UformerConfig&, std::uint64_t, BuildOptions);                      \
  template Tensor<T> forward(const Tensor<T>&, const UformerParams<T>&, std::vector<StageShape>*);         \
  template Tensor<T> downsample(const Tensor<T>&, const ConvParams<T>&);                                   \
  template Tensor<T> upsample(const Tensor<T>&, const ConvParams<T>&);                                     \
  template Tensor<T> skip_join(const Tensor<T>&, const Tensor<T>&, SkipMode, const LeWinBlockParams<T>*);

UFORMER_INSTANTIATE_MODEL(float)
UFORMER_INSTANTIATE_MODEL(double)

}  // namespace uformer
