#include "uformer/metrics.hpp"

#include <cmath>

#include "uformer/error.hpp"

namespace uformer {

double psnr(const Image& a, const Image& b, double peak) {
  if (!a.same_shape(b)) throw DimensionError("psnr: images differ in shape");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse == 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(peak * peak / mse);
}

namespace {

std::vector<double> gaussian_taps() {
  std::vector<double> g(static_cast<std::size_t>(kSsimWindow));
  const auto half = kSsimWindow / 2;
  double total = 0.0;
  for (std::int64_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i - half);
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Valid-region separable filtering of one h x w plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::int64_t h, std::int64_t w,
                                 const std::vector<double>& g) {
  const auto k = kSsimWindow;
  const auto ho = h - k + 1, wo = w - k + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * wo));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < k; ++t) acc += g[static_cast<std::size_t>(t)] * plane[static_cast<std::size_t>(y * w + x + t)];
      rows[static_cast<std::size_t>(y * wo + x)] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(ho * wo));
  for (std::int64_t y = 0; y < ho; ++y)
    for (std::int64_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < k; ++t) acc += g[static_cast<std::size_t>(t)] * rows[static_cast<std::size_t>((y + t) * wo + x)];
      out[static_cast<std::size_t>(y * wo + x)] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b, double peak) {
  if (!a.same_shape(b)) throw DimensionError("ssim: images differ in shape");
  if (a.height < kSsimWindow || a.width < kSsimWindow) {
    throw ConfigError("ssim needs images of at least 11x11, got " + std::to_string(a.height) + "x" +
                      std::to_string(a.width));
  }
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const auto g = gaussian_taps();
  const auto h = a.height, w = a.width;
  const auto plane = static_cast<std::size_t>(h * w);
  double total = 0.0;
  for (std::int64_t c = 0; c < a.channels; ++c) {
    std::vector<double> pa(a.data.begin() + c * h * w, a.data.begin() + (c + 1) * h * w);
    std::vector<double> pb(b.data.begin() + c * h * w, b.data.begin() + (c + 1) * h * w);
    std::vector<double> aa(plane), bb(plane), ab(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto mu_a = filter_valid(pa, h, w, g);
    const auto mu_b = filter_valid(pb, h, w, g);
    const auto e_aa = filter_valid(aa, h, w, g);
    const auto e_bb = filter_valid(bb, h, w, g);
    const auto e_ab = filter_valid(ab, h, w, g);
    double sum = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
      const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
      const double cov = e_ab[i] - mu_a[i] * mu_b[i];
      const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
      const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2);
      sum += num / den;
    }
    total += sum / static_cast<double>(mu_a.size());
  }
  return total / static_cast<double>(a.channels);
}

Image rgb_to_y(const Image& img) {
  if (img.channels != 3) throw DimensionError("rgb_to_y needs 3 channels, got " + std::to_string(img.channels));
  const auto n = static_cast<std::size_t>(img.height * img.width);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i)
    // Grouped so white maps to exactly 1 and the primaries to their weights.
    y[i] = 0.587 * img.data[n + i] + (0.299 * img.data[i] + 0.114 * img.data[2 * n + i]);
  return Image(1, img.height, img.width, std::move(y));
}

template <typename T>
Restorer make_restorer(const UformerParams<T>& model) {
  return [&model](const Image& img) {
    NoGradGuard guard;
    return Image::from_tensor(forward(img.to_tensor<T>(), model));
  };
}

template Restorer make_restorer(const UformerParams<float>&);
template Restorer make_restorer(const UformerParams<double>&);

std::vector<std::int64_t> tile_starts(std::int64_t extent, std::int64_t tile, std::int64_t overlap) {
  if (extent <= tile) return {0};
  std::vector<std::int64_t> starts;
  const auto stride = tile - overlap;
  for (std::int64_t s = 0; s + tile < extent; s += stride) starts.push_back(s);
  starts.push_back(extent - tile);
  return starts;
}

namespace {

// Weight of offset i inside a tile of length n starting at s on an axis of
// length extent. Ramps only where a neighbouring tile overlaps.
double ramp(std::int64_t i, std::int64_t n, std::int64_t s, std::int64_t extent, std::int64_t overlap) {
  double w = 1.0;
  if (overlap > 0 && s > 0 && i < overlap) w = std::min(w, static_cast<double>(i + 1) / static_cast<double>(overlap + 1));
  if (overlap > 0 && s + n < extent && i >= n - overlap) {
    w = std::min(w, static_cast<double>(n - i) / static_cast<double>(overlap + 1));
  }
  return w;
}

}  // namespace

Image tiled_inference(const Restorer& model, const Image& img, std::int64_t tile, std::int64_t overlap,
                      std::int64_t min_extent, TileStats* stats) {
  if (overlap < 0 || tile <= overlap) {
    throw ConfigError("tile (" + std::to_string(tile) + ") must exceed overlap (" + std::to_string(overlap) + ")");
  }
  if (tile < min_extent) {
    throw ConfigError("tile " + std::to_string(tile) + " is below the model minimum of " + std::to_string(min_extent));
  }
  if (img.height <= tile && img.width <= tile) {
    if (stats) *stats = {1, 1};
    return model(img);
  }
  const auto ys = tile_starts(img.height, tile, overlap);
  const auto xs = tile_starts(img.width, tile, overlap);
  if (stats) *stats = {static_cast<std::int64_t>(ys.size()), static_cast<std::int64_t>(xs.size())};

  std::vector<double> acc(img.data.size(), 0.0);
  std::vector<double> acc_w(static_cast<std::size_t>(img.height * img.width), 0.0);
  for (auto y0 : ys) {
    const auto th = std::min(tile, img.height);
    for (auto x0 : xs) {
      const auto tw = std::min(tile, img.width);
      const Image out = model(img.crop(y0, x0, th, tw));
      if (out.channels != img.channels || out.height != th || out.width != tw) {
        throw DimensionError("tiled_inference: model changed the tile shape");
      }
      for (std::int64_t y = 0; y < th; ++y) {
        const double wy = ramp(y, th, y0, img.height, overlap);
        for (std::int64_t x = 0; x < tw; ++x) {
          const double wgt = wy * ramp(x, tw, x0, img.width, overlap);
          auto& aw = acc_w[static_cast<std::size_t>((y0 + y) * img.width + x0 + x)];
          aw += wgt;
          const double f = wgt / aw;
          for (std::int64_t c = 0; c < img.channels; ++c) {
            auto& a = acc[img.offset(c, y0 + y, x0 + x)];
            a += f * (out.at(c, y, x) - a);
          }
        }
      }
    }
  }
  return Image(img.channels, img.height, img.width, std::move(acc));
}

}  // namespace uformer
