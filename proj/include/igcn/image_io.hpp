#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "igcn/tensor.hpp"

namespace igcn {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit planar RGB image.
struct ImageU8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> planes;  // [3, H, W]
};

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

template <typename T>
ImageU8 quantize(const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("quantize: expected [3,H,W], got " + shape_str(image.shape()));
  ImageU8 out{image.dim(1), image.dim(2), std::vector<std::uint8_t>(image.numel())};
  for (std::size_t i = 0; i < image.numel(); ++i) out.planes[i] = quantize_unit(image.values()[i]);
  return out;
}

template <typename T>
Tensor<T> dequantize(const ImageU8& image) {
  std::vector<T> v(image.planes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(image.planes[i]) / T{255};
  return Tensor<T>(Shape{3, image.height, image.width}, std::move(v));
}

inline void write_png(const std::filesystem::path& path, const ImageU8& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto hw = image.height * image.width;
  std::vector<std::uint8_t> interleaved(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) interleaved[3 * i + c] = image.planes[c * hw + i];
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, interleaved.data(), 0, nullptr))
    throw ImageIoError("cannot write " + path.string() + ": " + img.message);
}

inline ImageU8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw ImageIoError("cannot read " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> interleaved(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, interleaved.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ImageIoError("cannot decode " + path.string() + ": " + img.message);
  }
  ImageU8 out{img.height, img.width, std::vector<std::uint8_t>(interleaved.size())};
  const auto hw = out.height * out.width;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.planes[c * hw + i] = interleaved[3 * i + c];
  return out;
}

}  // namespace igcn
