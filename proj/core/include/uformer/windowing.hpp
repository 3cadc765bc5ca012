#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "uformer/ops.hpp"
#include "uformer/tensor.hpp"

namespace uformer {

/// Tiling of an H x W map into M x M windows, after padding the bottom and
/// right edges up to multiples of M.
struct WindowGrid {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t window = 0;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;
  std::int64_t count = 0;

  std::int64_t padded_height() const { return height + pad_h; }
  std::int64_t padded_width() const { return width + pad_w; }
  std::int64_t rows() const { return padded_height() / window; }
  std::int64_t cols() const { return padded_width() / window; }
  std::int64_t tokens() const { return window * window; }
};

WindowGrid make_window_grid(std::int64_t height, std::int64_t width, std::int64_t window);

/// Window shift used by shifted blocks: floor(M / 2).
constexpr std::int64_t default_shift(std::int64_t window) { return window / 2; }

/// Additive logit value for masked attention pairs.
constexpr double kMaskValue = -1e9;

/// Relative-position lookup: entry (i, j) selects one of (2M-1)^2 bias
/// buckets from the 2D offset between tokens i and j of a window.
struct RelPosIndex {
  std::int64_t window = 0;
  IndexMap index;  // M^2 x M^2, row-major

  std::int64_t buckets() const { return (2 * window - 1) * (2 * window - 1); }
  std::int64_t at(std::int64_t i, std::int64_t j) const {
    return (*index)[static_cast<std::size_t>(i * window * window + j)];
  }
};

RelPosIndex rel_pos_index(std::int64_t window);

/// Per-window additive mask for attention over a cyclically shifted map.
/// Tokens that came from different sides of the wrap never attend to each
/// other.
struct ShiftMask {
  std::int64_t window = 0;
  std::int64_t shift = 0;
  std::int64_t windows = 0;
  std::vector<double> values;  // windows x M^2 x M^2

  double at(std::int64_t n, std::int64_t i, std::int64_t j) const {
    const auto t = window * window;
    return values[static_cast<std::size_t>((n * t + i) * t + j)];
  }
  bool empty() const { return shift == 0; }
};

/// Mask for a map whose extents are already multiples of M.
ShiftMask shift_mask(std::int64_t padded_height, std::int64_t padded_width, std::int64_t window,
                     std::int64_t shift);

// Index maps over flat [C, H, W] buffers. They compose with `take`.
namespace index_maps {
/// Mirror index without edge repetition, periodic so any pad amount works.
std::int64_t reflect(std::int64_t i, std::int64_t n);
IndexMap reflect_pad(std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t pad_h, std::int64_t pad_w);
IndexMap crop(std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t out_h, std::int64_t out_w);
/// out[c, y, x] = in[c, (y + dy) mod h, (x + dx) mod w]
IndexMap roll(std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t dy, std::int64_t dx);
/// [N, M^2, C] windows gathered from an unpadded [C, H, W] map, padding by
/// reflection as the grid requires.
IndexMap partition(std::int64_t channels, const WindowGrid& grid);
/// [C, H, W] gathered back from [N, M^2, C] windows, dropping the padding.
IndexMap reverse(std::int64_t channels, const WindowGrid& grid);
}  // namespace index_maps

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, std::int64_t pad_h, std::int64_t pad_w);
template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::int64_t height, std::int64_t width);

/// Splits [C, H, W] into [N, M^2, C] channel-last windows.
template <typename T>
std::pair<Tensor<T>, WindowGrid> window_partition(const Tensor<T>& x, std::int64_t window);

/// Inverse of window_partition, including the padding crop.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, const WindowGrid& grid);

/// Torus roll by (-shift, -shift); cyclic_unshift rolls back.
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, std::int64_t shift);
template <typename T>
Tensor<T> cyclic_unshift(const Tensor<T>& x, std::int64_t shift);

}  // namespace uformer
