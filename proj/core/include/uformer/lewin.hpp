#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "uformer/layers.hpp"
#include "uformer/windowing.hpp"

namespace uformer {

/// Window attention weights. Queries project from `query_dim` channels,
/// keys/values from `kv_dim` channels (they differ only for the
/// concatenated cross-attention skip).
template <typename T>
struct WMSAParams {
  std::int64_t heads = 1;
  Tensor<T> wq;  // [query_dim, C]
  Tensor<T> wk;  // [kv_dim, C]
  Tensor<T> wv;  // [kv_dim, C]
  LinearParams<T> proj;  // C -> C, biased
  Tensor<T> bias_table;  // [heads, (2M-1)^2]

  static WMSAParams make(std::int64_t dim, std::int64_t heads, std::int64_t window, Rng& rng,
                         std::int64_t kv_dim = 0);
  std::int64_t dim() const { return wq.dim(1); }
  std::int64_t head_dim() const { return dim() / heads; }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Locally-enhanced feed-forward: token expansion, 3x3 depth-wise conv on
/// the 2D layout, token contraction, GELU after the first two.
template <typename T>
struct LeFFParams {
  LinearParams<T> lin1;
  ConvParams<T> dwconv;
  LinearParams<T> lin2;

  static LeFFParams make(std::int64_t dim, std::int64_t expansion, Rng& rng);
  std::int64_t hidden() const { return lin1.out_features(); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Learnable M x M x C bias shared by every window of one block.
template <typename T>
struct Modulator {
  Tensor<T> bias;  // [M, M, C]

  static Modulator zeros(std::int64_t window, std::int64_t dim);
};

/// How the first decoder block of a stage consumes the encoder features.
enum class SkipAttention { none, cross, concat_cross };

template <typename T>
struct CrossAttentionParams {
  LayerNormParams<T> norm_query;
  LayerNormParams<T> norm_kv;
  WMSAParams<T> attn;
};

template <typename T>
struct LeWinBlockParams {
  std::int64_t window = 8;
  LayerNormParams<T> norm1;
  LayerNormParams<T> norm2;
  WMSAParams<T> attn;
  LeFFParams<T> leff;
  std::optional<Modulator<T>> modulator;
  bool shifted = false;
  bool modulator_before_shift = false;
  SkipAttention skip = SkipAttention::none;
  // concat_cross: keys/values from LN over [enc, x]; the main attention has
  // kv_dim = enc + dim.
  std::optional<LayerNormParams<T>> norm_kv;
  // cross: an extra attention sub-layer after self-attention.
  std::optional<CrossAttentionParams<T>> cross;

  std::int64_t dim() const { return attn.dim(); }
  std::int64_t shift() const { return shifted ? default_shift(window) : 0; }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

struct LeWinBlockSpec {
  std::int64_t dim = 0;
  std::int64_t heads = 1;
  std::int64_t window = 8;
  std::int64_t ffn_expansion = 4;
  bool shifted = false;
  bool modulator = false;
  bool modulator_before_shift = false;
  SkipAttention skip = SkipAttention::none;
  std::int64_t skip_channels = 0;  // encoder channels feeding the skip attention
};

template <typename T>
LeWinBlockParams<T> make_lewin_block(const LeWinBlockSpec& spec, Rng& rng);

/// windows [N, M^2, C] plus the flattened modulator on every window.
template <typename T>
Tensor<T> apply_modulator(const Tensor<T>& windows, const Modulator<T>& m);

/// Multi-head attention inside each window:
/// SoftMax(Q K^T / sqrt(d_k) + B (+ mask)) V, heads concatenated and
/// projected. q_windows [N, t, Cq], kv_windows [N, t, Ckv] -> [N, t, C].
/// `mask` is [N, t, t] or null. When `weights_out` is non-null it receives
/// the post-softmax weights [N, heads, t, t].
template <typename T>
Tensor<T> window_attention(const Tensor<T>& q_windows, const Tensor<T>& kv_windows, const WMSAParams<T>& p,
                           const RelPosIndex& rel, const ShiftMask* mask = nullptr,
                           Tensor<T>* weights_out = nullptr);

struct WMSAOptions {
  bool shifted = false;
  bool modulator_before_shift = false;
};

/// Windowed attention on a [C, H, W] map: pad, optional cyclic shift,
/// partition, modulator, attention, reverse, unshift, crop. No layer norm.
template <typename T>
Tensor<T> wmsa_forward(const Tensor<T>& x, const WMSAParams<T>& p, std::int64_t window, WMSAOptions options = {},
                       const Modulator<T>* modulator = nullptr, Tensor<T>* weights_out = nullptr);

/// LeFF on a [C, H, W] map (no layer norm); extents are preserved.
template <typename T>
Tensor<T> leff_forward(const Tensor<T>& x, const LeFFParams<T>& p);

/// X' = W-MSA(LN(X)) + X ; X'' = LeFF(LN(X')) + X'. `skip` carries the
/// encoder features for blocks built with a skip-attention mode.
template <typename T>
Tensor<T> lewin_block_forward(const Tensor<T>& x, const LeWinBlockParams<T>& p, const Tensor<T>* skip = nullptr);

}  // namespace uformer
