#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "uformer/tensor.hpp"

namespace uformer {

/// Channel-first image with values clamped to [0, 1]. Held at f64 so metrics
/// do not depend on the model's precision.
struct Image {
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::int64_t channels, std::int64_t height, std::int64_t width, std::vector<double> values);
  static Image filled(std::int64_t channels, std::int64_t height, std::int64_t width, double value);

  bool empty() const { return data.empty(); }
  std::size_t offset(std::int64_t c, std::int64_t y, std::int64_t x) const {
    return static_cast<std::size_t>((c * height + y) * width + x);
  }
  double at(std::int64_t c, std::int64_t y, std::int64_t x) const { return data[offset(c, y, x)]; }
  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  Image crop(std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) const;

  template <typename T>
  Tensor<T> to_tensor() const;
  /// Clamps into [0, 1].
  template <typename T>
  static Image from_tensor(const Tensor<T>& t);

  bool operator==(const Image&) const = default;
};

/// 8-bit PNG. Gray, palette and alpha inputs are expanded/stripped to 1 or 3
/// channels; 16-bit inputs are reduced to 8 bits.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

/// The value an 8-bit round trip produces: round(v * 255) / 255.
Image quantize8(const Image& img);

}  // namespace uformer
