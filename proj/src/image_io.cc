#include "misdd/image_io.h"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "misdd/tensor_io.h"

namespace misdd {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::array<double, 3> jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ramp = [v](double center) { return std::clamp(1.5 - std::abs(4.0 * v - center), 0.0, 1.0); };
  return {ramp(3.0), ramp(2.0), ramp(1.0)};
}

}  // namespace

void write_png(const std::filesystem::path& path, int height, int width, int channels,
               const std::vector<std::uint8_t>& pixels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (pixels.size() != static_cast<std::size_t>(height) * width * channels) {
    throw std::invalid_argument("write_png: pixel buffer size mismatch");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw std::runtime_error("cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_score_png(const std::filesystem::path& path, const ScoreMap& map) {
  std::vector<std::uint8_t> px(map.values.size());
  std::transform(map.values.begin(), map.values.end(), px.begin(), to_byte);
  write_png(path, map.height, map.width, 1, px);
}

void write_overlay_png(const std::filesystem::path& path, const Image& base, const ScoreMap& map, double alpha) {
  if (base.height != map.height || base.width != map.width) {
    throw std::invalid_argument("write_overlay_png: base image and map differ in size");
  }
  std::vector<std::uint8_t> px(static_cast<std::size_t>(map.height) * map.width * 3);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const auto heat = jet(map.at(y, x));
      for (int c = 0; c < 3; ++c) {
        const double b = base.at(y, x, base.channels == 1 ? 0 : c);
        px[(static_cast<std::size_t>(y) * map.width + x) * 3 + c] = to_byte((1 - alpha) * b + alpha * heat[c]);
      }
    }
  }
  write_png(path, map.height, map.width, 3, px);
}

void write_score_tensor(const std::filesystem::path& path, const ScoreMap& map) {
  const std::array<std::uint32_t, 2> dims{static_cast<std::uint32_t>(map.height),
                                          static_cast<std::uint32_t>(map.width)};
  write_tensor_file(path, DType::kFloat64, dims, std::as_bytes(std::span<const double>(map.values)));
}

}  // namespace misdd
