#include "uformer/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

#include "uformer/error.hpp"

namespace uformer {

namespace {

double clamp01(double v) {
  if (std::isnan(v)) throw NumericError("image value is NaN");
  return std::clamp(v, 0.0, 1.0);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(clamp01(v) * 255.0)); }

}  // namespace

Image::Image(std::int64_t c, std::int64_t h, std::int64_t w, std::vector<double> values)
    : channels(c), height(h), width(w), data(std::move(values)) {
  if (c < 1 || h < 1 || w < 1 || static_cast<std::int64_t>(data.size()) != c * h * w) {
    throw DimensionError("image " + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w) +
                         " cannot hold " + std::to_string(data.size()) + " values");
  }
  for (auto& v : data) v = clamp01(v);
}

Image Image::filled(std::int64_t c, std::int64_t h, std::int64_t w, double value) {
  return Image(c, h, w, std::vector<double>(static_cast<std::size_t>(c * h * w), value));
}

Image Image::crop(std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) const {
  if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > height || x0 + w > width) {
    throw DimensionError("crop outside the image");
  }
  std::vector<double> out(static_cast<std::size_t>(channels * h * w));
  auto it = out.begin();
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t y = 0; y < h; ++y) {
      const auto* row = data.data() + offset(c, y0 + y, x0);
      it = std::copy(row, row + w, it);
    }
  return Image(channels, h, w, std::move(out));
}

template <typename T>
Tensor<T> Image::to_tensor() const {
  std::vector<T> v(data.size());
  std::transform(data.begin(), data.end(), v.begin(), [](double x) { return static_cast<T>(x); });
  return Tensor<T>(Shape{channels, height, width}, std::move(v));
}

template <typename T>
Image Image::from_tensor(const Tensor<T>& t) {
  if (t.rank() != 3) throw DimensionError("image tensor must be [C,H,W], got " + shape_str(t.shape()));
  const auto d = t.data();
  return Image(t.dim(0), t.dim(1), t.dim(2), std::vector<double>(d.begin(), d.end()));
}

template Tensor<float> Image::to_tensor<float>() const;
template Tensor<double> Image::to_tensor<double>() const;
template Image Image::from_tensor<float>(const Tensor<float>&);
template Image Image::from_tensor<double>(const Tensor<double>&);

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = to_byte(v) / 255.0;
  return out;
}

Image read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw FormatError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError("libpng initialization failed");
  }
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt PNG data in " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const auto w = static_cast<std::int64_t>(png_get_image_width(png, info));
  const auto h = static_cast<std::int64_t>(png_get_image_height(png, info));
  const auto c = static_cast<std::int64_t>(png_get_channels(png, info));
  const auto stride = png_get_rowbytes(png, info);
  pixels.resize(stride * static_cast<std::size_t>(h));
  rows.resize(static_cast<std::size_t>(h));
  for (std::int64_t y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (c != 1 && c != 3) throw FormatError(path.string() + ": unsupported channel count " + std::to_string(c));
  std::vector<double> values(static_cast<std::size_t>(c * h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < c; ++ch)
        values[static_cast<std::size_t>((ch * h + y) * w + x)] = rows[static_cast<std::size_t>(y)][x * c + ch] / 255.0;
  return Image(c, h, w, std::move(values));
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw DimensionError("PNG output needs 1 or 3 channels");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw FormatError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("libpng initialization failed");
  }
  const auto c = img.channels, h = img.height, w = img.width;
  std::vector<png_byte> pixels(static_cast<std::size_t>(c * h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < c; ++ch)
        pixels[static_cast<std::size_t>((y * w + x) * c + ch)] = to_byte(img.at(ch, y, x));
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (std::int64_t y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = pixels.data() + y * w * c;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace uformer
