#include "uformer/windowing.hpp"

#include <string>

#include "uformer/error.hpp"

namespace uformer {

namespace {
std::int64_t wrap(std::int64_t i, std::int64_t n) { return ((i % n) + n) % n; }

void require_map(const Tensor<auto>& x, const char* op) {
  if (x.rank() != 3) throw DimensionError(std::string(op) + ": expected [C,H,W], got " + shape_str(x.shape()));
}
}  // namespace

WindowGrid make_window_grid(std::int64_t height, std::int64_t width, std::int64_t window) {
  if (window < 1) throw ConfigError("window size must be at least 1, got " + std::to_string(window));
  if (height < 1 || width < 1) {
    throw ConfigError("cannot window a " + std::to_string(height) + "x" + std::to_string(width) + " map");
  }
  WindowGrid g;
  g.height = height;
  g.width = width;
  g.window = window;
  g.pad_h = (window - height % window) % window;
  g.pad_w = (window - width % window) % window;
  g.count = g.rows() * g.cols();
  return g;
}

RelPosIndex rel_pos_index(std::int64_t window) {
  if (window < 1) throw ConfigError("window size must be at least 1");
  const std::int64_t t = window * window;
  const std::int64_t span = 2 * window - 1;
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(t * t));
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t j = 0; j < t; ++j) {
      const std::int64_t drow = i / window - j / window;
      const std::int64_t dcol = i % window - j % window;
      (*index)[static_cast<std::size_t>(i * t + j)] = (drow + window - 1) * span + (dcol + window - 1);
    }
  }
  return RelPosIndex{window, std::move(index)};
}

ShiftMask shift_mask(std::int64_t padded_height, std::int64_t padded_width, std::int64_t window,
                     std::int64_t shift) {
  if (window < 1 || padded_height % window != 0 || padded_width % window != 0) {
    throw ConfigError("shift mask needs extents divisible by the window size");
  }
  if (shift < 0 || shift >= window) throw ConfigError("window shift must lie in [0, M)");
  ShiftMask m;
  m.window = window;
  m.shift = shift;
  const std::int64_t rows = padded_height / window;
  const std::int64_t cols = padded_width / window;
  const std::int64_t t = window * window;
  m.windows = rows * cols;
  m.values.assign(static_cast<std::size_t>(m.windows * t * t), 0.0);
  if (shift == 0) return m;
  // Region label of a coordinate on the shifted map: the bulk, the strip
  // that stays on this side, and the strip that wrapped around.
  auto region = [&](std::int64_t v, std::int64_t extent) -> std::int64_t {
    if (v < extent - window) return 0;
    if (v < extent - shift) return 1;
    return 2;
  };
  std::vector<std::int64_t> label(static_cast<std::size_t>(t));
  for (std::int64_t wy = 0; wy < rows; ++wy) {
    for (std::int64_t wx = 0; wx < cols; ++wx) {
      for (std::int64_t k = 0; k < t; ++k) {
        const std::int64_t y = wy * window + k / window;
        const std::int64_t x = wx * window + k % window;
        label[static_cast<std::size_t>(k)] = region(y, padded_height) * 3 + region(x, padded_width);
      }
      double* dst = m.values.data() + (wy * cols + wx) * t * t;
      for (std::int64_t i = 0; i < t; ++i)
        for (std::int64_t j = 0; j < t; ++j)
          dst[i * t + j] = label[static_cast<std::size_t>(i)] == label[static_cast<std::size_t>(j)] ? 0.0 : kMaskValue;
    }
  }
  return m;
}

namespace index_maps {

std::int64_t reflect(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  const std::int64_t k = wrap(i, period);
  return k < n ? k : period - k;
}

IndexMap reflect_pad(std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t pad_h, std::int64_t pad_w) {
  const std::int64_t ho = h + pad_h, wo = w + pad_w;
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(channels * ho * wo));
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t y = 0; y < ho; ++y)
      for (std::int64_t x = 0; x < wo; ++x) idx->push_back((c * h + reflect(y, h)) * w + reflect(x, w));
  return idx;
}

IndexMap crop(std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t out_h, std::int64_t out_w) {
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(channels * out_h * out_w));
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t y = 0; y < out_h; ++y)
      for (std::int64_t x = 0; x < out_w; ++x) idx->push_back((c * h + y) * w + x);
  return idx;
}

IndexMap roll(std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t dy, std::int64_t dx) {
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(channels * h * w));
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) idx->push_back((c * h + wrap(y + dy, h)) * w + wrap(x + dx, w));
  return idx;
}

IndexMap partition(std::int64_t channels, const WindowGrid& g) {
  const std::int64_t m = g.window;
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(g.count * g.tokens() * channels));
  for (std::int64_t wy = 0; wy < g.rows(); ++wy)
    for (std::int64_t wx = 0; wx < g.cols(); ++wx)
      for (std::int64_t t = 0; t < m * m; ++t) {
        const std::int64_t y = reflect(wy * m + t / m, g.height);
        const std::int64_t x = reflect(wx * m + t % m, g.width);
        for (std::int64_t c = 0; c < channels; ++c) idx->push_back((c * g.height + y) * g.width + x);
      }
  return idx;
}

IndexMap reverse(std::int64_t channels, const WindowGrid& g) {
  const std::int64_t m = g.window;
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(channels * g.height * g.width));
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t y = 0; y < g.height; ++y)
      for (std::int64_t x = 0; x < g.width; ++x) {
        const std::int64_t n = (y / m) * g.cols() + x / m;
        const std::int64_t t = (y % m) * m + x % m;
        idx->push_back((n * m * m + t) * channels + c);
      }
  return idx;
}

}  // namespace index_maps

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, std::int64_t pad_h, std::int64_t pad_w) {
  require_map(x, "reflect_pad");
  if (pad_h < 0 || pad_w < 0) throw ConfigError("reflect_pad: negative padding");
  if (pad_h == 0 && pad_w == 0) return x;
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  return take(x, index_maps::reflect_pad(c, h, w, pad_h, pad_w), Shape{c, h + pad_h, w + pad_w});
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::int64_t height, std::int64_t width) {
  require_map(x, "crop");
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (height > h || width > w || height < 1 || width < 1) {
    throw DimensionError("crop: cannot crop " + shape_str(x.shape()) + " to " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  if (height == h && width == w) return x;
  return take(x, index_maps::crop(c, h, w, height, width), Shape{c, height, width});
}

template <typename T>
std::pair<Tensor<T>, WindowGrid> window_partition(const Tensor<T>& x, std::int64_t window) {
  require_map(x, "window_partition");
  const auto grid = make_window_grid(x.dim(1), x.dim(2), window);
  const auto c = x.dim(0);
  auto windows = take(x, index_maps::partition(c, grid), Shape{grid.count, grid.tokens(), c});
  return {std::move(windows), grid};
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, const WindowGrid& grid) {
  if (windows.rank() != 3 || windows.dim(0) != grid.count || windows.dim(1) != grid.tokens()) {
    throw DimensionError("window_reverse: windows " + shape_str(windows.shape()) + " inconsistent with " +
                         std::to_string(grid.count) + " windows of " + std::to_string(grid.window) + "x" +
                         std::to_string(grid.window));
  }
  const auto c = windows.dim(2);
  return take(windows, index_maps::reverse(c, grid), Shape{c, grid.height, grid.width});
}

template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, std::int64_t shift) {
  require_map(x, "cyclic_shift");
  if (shift == 0) return x;
  return take(x, index_maps::roll(x.dim(0), x.dim(1), x.dim(2), shift, shift), x.shape());
}

template <typename T>
Tensor<T> cyclic_unshift(const Tensor<T>& x, std::int64_t shift) {
  require_map(x, "cyclic_unshift");
  if (shift == 0) return x;
  return take(x, index_maps::roll(x.dim(0), x.dim(1), x.dim(2), -shift, -shift), x.shape());
}

#define UFORMER_INSTANTIATE_WINDOWING(T)                                                        \
  template Tensor<T> reflect_pad(const Tensor<T>&, std::int64_t, std::int64_t);                \
  template Tensor<T> crop(const Tensor<T>&, std::int64_t, std::int64_t);                       \
  template std::pair<Tensor<T>, WindowGrid> window_partition(const Tensor<T>&, std::int64_t); \
  template Tensor<T> window_reverse(const Tensor<T>&, const WindowGrid&);                      \
  template Tensor<T> cyclic_shift(const Tensor<T>&, std::int64_t);                             \
  template Tensor<T> cyclic_unshift(const Tensor<T>&, std::int64_t);

UFORMER_INSTANTIATE_WINDOWING(float)
UFORMER_INSTANTIATE_WINDOWING(double)

}  // namespace uformer
