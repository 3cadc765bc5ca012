#pragma once

#include <cstdint>
#include <functional>
#include <limits>

#include "uformer/image.hpp"
#include "uformer/model.hpp"

namespace uformer {

/// Returned by psnr for identical images.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / MSE).
double psnr(const Image& a, const Image& b, double peak = 1.0);

inline constexpr std::int64_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, averaged over channels.
double ssim(const Image& a, const Image& b, double peak = 1.0);

/// Full-range BT.601 luma: 0.299 R + 0.587 G + 0.114 B.
Image rgb_to_y(const Image& img);

using Restorer = std::function<Image(const Image&)>;

/// Wraps a model as a gradient-free image-to-image function.
template <typename T>
Restorer make_restorer(const UformerParams<T>& model);

struct TileStats {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t count() const { return rows * cols; }
};

/// Tile origins along one axis: stride tile - overlap, last tile flush with
/// the far edge.
std::vector<std::int64_t> tile_starts(std::int64_t extent, std::int64_t tile, std::int64_t overlap);

/// Restores overlapping tiles independently and blends them with linear
/// ramps across each interior overlap. Images no larger than one tile go
/// through a single call. `min_extent` is the smallest input the model takes.
Image tiled_inference(const Restorer& model, const Image& img, std::int64_t tile, std::int64_t overlap,
                      std::int64_t min_extent = 1, TileStats* stats = nullptr);

}  // namespace uformer
