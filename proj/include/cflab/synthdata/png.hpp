#ifndef CFLAB_SYNTHDATA_PNG_HPP
#define CFLAB_SYNTHDATA_PNG_HPP

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "cflab/diffcore/error.hpp"

namespace cflab::synthdata {

/// 8-bit image, grayscale (channels = 1) or RGB (channels = 3), row-major.
struct Image8 {
  std::size_t width = 0, height = 0, channels = 1;
  std::vector<std::uint8_t> pixels;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
}

inline void write_png(const std::string& path, const Image8& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw MissingArtifact("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw Error("libpng initialisation failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // no timestamps: identical inputs give identical files
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Grayscale image from values in [0, 1] (clipped).
template <typename Range>
Image8 gray_image(const Range& values, std::size_t width, std::size_t height) {
  Image8 img{width, height, 1, std::vector<std::uint8_t>(width * height)};
  for (std::size_t i = 0; i < width * height; ++i) img.pixels[i] = to_byte(values[i]);
  return img;
}

/// Signed values rendered blue (negative) / white (zero) / red (positive),
/// saturating at |v| = limit.
template <typename Range>
Image8 diverging_image(const Range& values, std::size_t width, std::size_t height, double limit) {
  Image8 img{width, height, 3, std::vector<std::uint8_t>(width * height * 3)};
  for (std::size_t i = 0; i < width * height; ++i) {
    const double a = std::min(1.0, std::abs(static_cast<double>(values[i])) / limit);
    const std::uint8_t fade = to_byte(1.0 - a);
    const bool pos = values[i] > 0;
    img.pixels[3 * i + 0] = pos ? 255 : fade;
    img.pixels[3 * i + 1] = fade;
    img.pixels[3 * i + 2] = pos ? fade : 255;
  }
  return img;
}

/// Side-by-side tiles of equal height with a 1-pixel separator; grayscale
/// tiles are promoted to RGB.
inline Image8 hstack(const std::vector<Image8>& tiles) {
  if (tiles.empty()) return {};
  const std::size_t h = tiles.front().height;
  std::size_t w = 0;
  for (const auto& t : tiles) w += t.width + 1;
  w -= 1;
  Image8 out{w, h, 3, std::vector<std::uint8_t>(w * h * 3, 255)};
  std::size_t x0 = 0;
  for (const auto& t : tiles) {
    for (std::size_t y = 0; y < std::min(h, t.height); ++y)
      for (std::size_t x = 0; x < t.width; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          out.pixels[(y * w + x0 + x) * 3 + c] =
              t.pixels[(y * t.width + x) * t.channels + (t.channels == 3 ? c : 0)];
    x0 += t.width + 1;
  }
  return out;
}

/// Vertical stack of equally wide RGB rows.
inline Image8 vstack(const std::vector<Image8>& rows) {
  if (rows.empty()) return {};
  Image8 out{rows.front().width, 0, 3, {}};
  for (const auto& r : rows) {
    if (r.width != out.width || r.channels != 3) throw InvalidArgument("vstack: row mismatch");
    out.pixels.insert(out.pixels.end(), r.pixels.begin(), r.pixels.end());
    out.height += r.height;
  }
  return out;
}

/// Nearest-neighbour upscaling for viewing small images.
inline Image8 upscale(const Image8& img, std::size_t factor) {
  Image8 out{img.width * factor, img.height * factor, img.channels, {}};
  out.pixels.resize(out.width * out.height * out.channels);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        out.pixels[(y * out.width + x) * img.channels + c] =
            img.pixels[((y / factor) * img.width + x / factor) * img.channels + c];
  return out;
}

}  // namespace cflab::synthdata

#endif  // CFLAB_SYNTHDATA_PNG_HPP
