#include "uformer/lewin.hpp"

#include <cmath>

#include "uformer/error.hpp"

namespace uformer {

template <typename T>
WMSAParams<T> WMSAParams<T>::make(std::int64_t dim, std::int64_t heads, std::int64_t window, Rng& rng,
                                  std::int64_t kv_dim) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("attention width " + std::to_string(dim) + " not divisible into " + std::to_string(heads) +
                      " heads");
  }
  if (kv_dim == 0) kv_dim = dim;
  WMSAParams p;
  p.heads = heads;
  p.wq = trunc_normal<T>({dim, dim}, rng);
  p.wk = trunc_normal<T>({kv_dim, dim}, rng);
  p.wv = trunc_normal<T>({kv_dim, dim}, rng);
  p.proj = LinearParams<T>::make(dim, dim, true, rng);
  const std::int64_t span = 2 * window - 1;
  p.bias_table = trunc_normal<T>({heads, span * span}, rng);
  return p;
}

template <typename T>
void WMSAParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.push_back({prefix + ".wq", wq, true});
  out.push_back({prefix + ".wk", wk, true});
  out.push_back({prefix + ".wv", wv, true});
  proj.collect(prefix + ".proj", out);
  out.push_back({prefix + ".bias_table", bias_table, false});
}

template <typename T>
LeFFParams<T> LeFFParams<T>::make(std::int64_t dim, std::int64_t expansion, Rng& rng) {
  if (expansion < 1) throw ConfigError("LeFF expansion factor must be positive");
  const std::int64_t hidden = dim * expansion;
  LeFFParams p;
  p.lin1 = LinearParams<T>::make(dim, hidden, true, rng);
  p.dwconv = ConvParams<T>::make(hidden, hidden, 3, Conv2dOptions{1, 1, hidden}, rng);
  p.lin2 = LinearParams<T>::make(hidden, dim, true, rng);
  return p;
}

template <typename T>
void LeFFParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  lin1.collect(prefix + ".lin1", out);
  dwconv.collect(prefix + ".dwconv", out);
  lin2.collect(prefix + ".lin2", out);
}

template <typename T>
Modulator<T> Modulator<T>::zeros(std::int64_t window, std::int64_t dim) {
  return {Tensor<T>::zeros({window, window, dim}, true)};
}

template <typename T>
void LeWinBlockParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  norm1.collect(prefix + ".norm1", out);
  if (norm_kv) norm_kv->collect(prefix + ".norm_kv", out);
  attn.collect(prefix + ".attn", out);
  if (cross) {
    cross->norm_query.collect(prefix + ".cross.norm_query", out);
    cross->norm_kv.collect(prefix + ".cross.norm_kv", out);
    cross->attn.collect(prefix + ".cross.attn", out);
  }
  norm2.collect(prefix + ".norm2", out);
  leff.collect(prefix + ".leff", out);
  if (modulator) out.push_back({prefix + ".modulator", modulator->bias, false});
}

template <typename T>
LeWinBlockParams<T> make_lewin_block(const LeWinBlockSpec& spec, Rng& rng) {
  if (spec.dim < 1) throw ConfigError("block width must be positive");
  if (spec.skip != SkipAttention::none && spec.skip_channels < 1) {
    throw ConfigError("skip attention needs the encoder channel count");
  }
  LeWinBlockParams<T> p;
  p.window = spec.window;
  p.shifted = spec.shifted;
  p.modulator_before_shift = spec.modulator_before_shift;
  p.skip = spec.skip;
  p.norm1 = LayerNormParams<T>::make(spec.dim);
  const std::int64_t kv_dim = spec.skip == SkipAttention::concat_cross ? spec.dim + spec.skip_channels : spec.dim;
  if (spec.skip == SkipAttention::concat_cross) p.norm_kv = LayerNormParams<T>::make(kv_dim);
  p.attn = WMSAParams<T>::make(spec.dim, spec.heads, spec.window, rng, kv_dim);
  if (spec.skip == SkipAttention::cross) {
    p.cross = CrossAttentionParams<T>{LayerNormParams<T>::make(spec.dim), LayerNormParams<T>::make(spec.skip_channels),
                                      WMSAParams<T>::make(spec.dim, spec.heads, spec.window, rng, spec.skip_channels)};
  }
  p.norm2 = LayerNormParams<T>::make(spec.dim);
  p.leff = LeFFParams<T>::make(spec.dim, spec.ffn_expansion, rng);
  if (spec.modulator) p.modulator = Modulator<T>::zeros(spec.window, spec.dim);
  return p;
}

template <typename T>
Tensor<T> apply_modulator(const Tensor<T>& windows, const Modulator<T>& m) {
  const auto& ms = m.bias.shape();
  if (windows.rank() != 3 || ms.size() != 3 || ms[0] * ms[1] != windows.dim(1) || ms[2] != windows.dim(2)) {
    throw DimensionError("modulator " + shape_str(ms) + " does not match windows " + shape_str(windows.shape()));
  }
  return add_broadcast(windows, reshape(m.bias, Shape{ms[0] * ms[1], ms[2]}));
}

template <typename T>
Tensor<T> window_attention(const Tensor<T>& q_windows, const Tensor<T>& kv_windows, const WMSAParams<T>& p,
                           const RelPosIndex& rel, const ShiftMask* mask, Tensor<T>* weights_out) {
  if (q_windows.rank() != 3 || kv_windows.rank() != 3 || q_windows.dim(0) != kv_windows.dim(0) ||
      q_windows.dim(1) != kv_windows.dim(1)) {
    throw DimensionError("window_attention: query windows " + shape_str(q_windows.shape()) + " vs key/value windows " +
                         shape_str(kv_windows.shape()));
  }
  const std::int64_t n = q_windows.dim(0);
  const std::int64_t t = q_windows.dim(1);
  const std::int64_t c = p.dim();
  const std::int64_t heads = p.heads;
  const std::int64_t dk = c / heads;
  if (rel.window * rel.window != t) throw DimensionError("window_attention: relative index does not match window");

  auto q = permute(reshape(matmul(q_windows, p.wq), Shape{n, t, heads, dk}), {0, 2, 1, 3});
  auto k = permute(reshape(matmul(kv_windows, p.wk), Shape{n, t, heads, dk}), {0, 2, 3, 1});
  auto v = permute(reshape(matmul(kv_windows, p.wv), Shape{n, t, heads, dk}), {0, 2, 1, 3});

  auto logits = scale(matmul(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));

  const std::int64_t buckets = rel.buckets();
  auto bias_index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(heads * t * t));
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t i = 0; i < t * t; ++i)
      (*bias_index)[static_cast<std::size_t>(h * t * t + i)] = h * buckets + (*rel.index)[static_cast<std::size_t>(i)];
  logits = add_broadcast(logits, take(p.bias_table, IndexMap(bias_index), Shape{heads, t, t}));

  if (mask && !mask->empty()) {
    if (mask->windows != n || mask->window * mask->window != t) {
      throw DimensionError("window_attention: shift mask does not match the window grid");
    }
    std::vector<T> expanded(static_cast<std::size_t>(n * heads * t * t));
    for (std::int64_t w = 0; w < n; ++w)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < t * t; ++i)
          expanded[static_cast<std::size_t>((w * heads + h) * t * t + i)] =
              static_cast<T>(mask->values[static_cast<std::size_t>(w * t * t + i)]);
    logits = add(logits, Tensor<T>(Shape{n, heads, t, t}, std::move(expanded)));
  }

  auto weights = softmax(logits, 3);
  if (weights_out) *weights_out = weights;
  auto out = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), Shape{n, t, c});
  return linear(out, p.proj);
}

namespace {

// Shared body of self- and cross-attention on [C, H, W] maps.
template <typename T>
Tensor<T> attention_branch(const Tensor<T>& x_query, const Tensor<T>* x_kv, const LayerNormParams<T>* norm_query,
                           const LayerNormParams<T>* norm_kv, const WMSAParams<T>& p, std::int64_t window,
                           std::int64_t shift, const Modulator<T>* modulator, bool modulator_before_shift,
                           Tensor<T>* weights_out) {
  if (x_query.rank() != 3) throw DimensionError("attention expects [C,H,W], got " + shape_str(x_query.shape()));
  const std::int64_t h = x_query.dim(1);
  const std::int64_t w = x_query.dim(2);
  if (x_query.dim(0) != p.wq.dim(0)) {
    throw DimensionError("attention: input has " + std::to_string(x_query.dim(0)) + " channels, projection expects " +
                         std::to_string(p.wq.dim(0)));
  }
  if (x_kv && (x_kv->rank() != 3 || x_kv->dim(1) != h || x_kv->dim(2) != w)) {
    throw DimensionError("attention: key/value map " + shape_str(x_kv->shape()) + " vs query map " +
                         shape_str(x_query.shape()));
  }
  const auto grid = make_window_grid(h, w, window);
  const std::int64_t hp = grid.padded_height();
  const std::int64_t wp = grid.padded_width();
  const auto padded_grid = make_window_grid(hp, wp, window);

  auto to_windows = [&](const Tensor<T>& map) {
    auto padded = cyclic_shift(reflect_pad(map, grid.pad_h, grid.pad_w), shift);
    return window_partition(padded, window).first;
  };

  auto q = to_windows(x_query);
  if (norm_query) q = layer_norm(q, *norm_query);
  if (modulator) {
    if (modulator_before_shift && shift != 0) {
      // Token (ty, tx) of a shifted window sat at ((ty+s) mod M, (tx+s) mod M)
      // of its unshifted window.
      const std::int64_t c = q.dim(2);
      const std::int64_t t = window * window;
      auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(t * c));
      for (std::int64_t k = 0; k < t; ++k) {
        const std::int64_t src = ((k / window + shift) % window) * window + (k % window + shift) % window;
        for (std::int64_t ch = 0; ch < c; ++ch) (*idx)[static_cast<std::size_t>(k * c + ch)] = src * c + ch;
      }
      q = add_broadcast(q, take(modulator->bias, IndexMap(idx), Shape{t, c}));
    } else {
      q = apply_modulator(q, *modulator);
    }
  }
  Tensor<T> kv = q;
  if (x_kv) {
    kv = to_windows(*x_kv);
    if (norm_kv) kv = layer_norm(kv, *norm_kv);
  }

  std::optional<ShiftMask> mask;
  if (shift != 0) mask = shift_mask(hp, wp, window, shift);
  auto out = window_attention(q, kv, p, rel_pos_index(window), mask ? &*mask : nullptr, weights_out);
  auto map = cyclic_unshift(window_reverse(out, padded_grid), shift);
  return crop(map, h, w);
}

template <typename T>
Tensor<T> leff_tokens(const Tensor<T>& tokens, std::int64_t h, std::int64_t w, const LeFFParams<T>& p) {
  auto hidden = gelu(linear(tokens, p.lin1));
  auto local = gelu(conv2d(tokens_to_map(hidden, h, w), p.dwconv.weight, p.dwconv.bias, p.dwconv.options));
  return linear(map_to_tokens(local), p.lin2);
}

}  // namespace

template <typename T>
Tensor<T> wmsa_forward(const Tensor<T>& x, const WMSAParams<T>& p, std::int64_t window, WMSAOptions options,
                       const Modulator<T>* modulator, Tensor<T>* weights_out) {
  const std::int64_t shift = options.shifted ? default_shift(window) : 0;
  return attention_branch<T>(x, nullptr, nullptr, nullptr, p, window, shift, modulator,
                             options.modulator_before_shift, weights_out);
}

template <typename T>
Tensor<T> leff_forward(const Tensor<T>& x, const LeFFParams<T>& p) {
  if (x.rank() != 3) throw DimensionError("leff_forward expects [C,H,W], got " + shape_str(x.shape()));
  const auto h = x.dim(1), w = x.dim(2);
  return tokens_to_map(leff_tokens(map_to_tokens(x), h, w, p), h, w);
}

template <typename T>
Tensor<T> lewin_block_forward(const Tensor<T>& x, const LeWinBlockParams<T>& p, const Tensor<T>* skip) {
  if (x.rank() != 3) throw DimensionError("lewin block expects [C,H,W], got " + shape_str(x.shape()));
  if (p.skip != SkipAttention::none && !skip) throw UsageError("block with skip attention called without encoder features");
  const auto h = x.dim(1), w = x.dim(2);
  const auto shift = p.shift();
  const Modulator<T>* mod = p.modulator ? &*p.modulator : nullptr;

  Tensor<T> attn;
  if (p.skip == SkipAttention::concat_cross) {
    const auto kv_source = concat(std::vector<Tensor<T>>{*skip, x}, 0);
    attn = attention_branch<T>(x, &kv_source, &p.norm1, &*p.norm_kv, p.attn, p.window, shift, mod,
                               p.modulator_before_shift, nullptr);
  } else {
    attn = attention_branch<T>(x, nullptr, &p.norm1, nullptr, p.attn, p.window, shift, mod, p.modulator_before_shift,
                               nullptr);
  }
  auto x1 = add(x, attn);
  if (p.skip == SkipAttention::cross) {
    const auto& c = *p.cross;
    x1 = add(x1, attention_branch<T>(x1, skip, &c.norm_query, &c.norm_kv, c.attn, p.window, shift, nullptr, false,
                                     nullptr));
  }
  auto normed = layer_norm(map_to_tokens(x1), p.norm2);
  return add(x1, tokens_to_map(leff_tokens(normed, h, w, p.leff), h, w));
}

#define UFORMER_INSTANTIATE_LEWIN(T)                                                                            \
  template struct WMSAParams<T>;                                                                                \
  template struct LeFFParams<T>;                                                                                \
  template struct Modulator<T>;                                                                                 \
  template struct LeWinBlockParams<T>;                                                                          \
  template LeWinBlockParams<T> make_lewin_block(const LeWinBlockSpec&, Rng&);                                   \
  template Tensor<T> apply_modulator(const Tensor<T>&, const Modulator<T>&);                                    \
  template Tensor<T> window_attention(const Tensor<T>&, const Tensor<T>&, const WMSAParams<T>&,                 \
                                      const RelPosIndex&, const ShiftMask*, Tensor<T>*);                        \
  template Tensor<T> wmsa_forward(const Tensor<T>&, const WMSAParams<T>&, std::int64_t, WMSAOptions,            \
                                  const Modulator<T>*, Tensor<T>*);                                             \
  template Tensor<T> leff_forward(const Tensor<T>&, const LeFFParams<T>&);                                      \
  template Tensor<T> lewin_block_forward(const Tensor<T>&, const LeWinBlockParams<T>&, const Tensor<T>*);

UFORMER_INSTANTIATE_LEWIN(float)
UFORMER_INSTANTIATE_LEWIN(double)

}  // namespace uformer
