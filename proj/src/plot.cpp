#include "t2ldm/plot.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace t2ldm::plot {

Image::Image(int w, int h, std::uint8_t fill) : width(w), height(h) {
  if (w < 1 || h < 1) throw std::invalid_argument("Image: size must be positive");
  rgb.assign(static_cast<std::size_t>(w) * h * 3, fill);
}

void Image::set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  auto* p = rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng error writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace {

// Piecewise-linear approximation of a perceptual blue-green-yellow ramp.
std::array<std::uint8_t, 3> ramp(double v) {
  static constexpr double stops[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  v = std::clamp(v, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(v));
  const double f = v - i;
  std::array<std::uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k) {
    c[k] = static_cast<std::uint8_t>(std::lround(stops[i][k] + f * (stops[i + 1][k] - stops[i][k])));
  }
  return c;
}

}  // namespace

Image range_image_plot(const rangemap::RangeImage& img, int scale) {
  if (scale < 1) throw std::invalid_argument("range_image_plot: scale must be >= 1");
  const auto& c = img.config;
  Image out(c.width * scale, c.height * scale);
  const double lmax = std::log2(c.depth_max + 1.0);
  for (int r = 0; r < c.height; ++r) {
    for (int col = 0; col < c.width; ++col) {
      const auto i = img.index(r, col);
      if (!img.valid[i]) continue;
      const auto rgb = ramp(std::log2(img.depth[i] + 1.0) / lmax);
      for (int dy = 0; dy < scale; ++dy) {
        for (int dx = 0; dx < scale; ++dx) {
          out.set(col * scale + dx, r * scale + dy, rgb[0], rgb[1], rgb[2]);
        }
      }
    }
  }
  return out;
}

Image bev_plot(const rangemap::PointCloud& cloud, double radius, int size) {
  if (!(radius > 0) || size < 2) throw std::invalid_argument("bev_plot: bad extent");
  Image out(size, size, 16);
  for (const auto& p : cloud.points) {
    // x forward is up, y left is left.
    const int px = static_cast<int>(std::floor((radius - p.y) / (2 * radius) * size));
    const int py = static_cast<int>(std::floor((radius - p.x) / (2 * radius) * size));
    const auto rgb = ramp((p.z + 2.0) / 6.0);
    out.set(px, py, rgb[0], rgb[1], rgb[2]);
  }
  const int c = size / 2;
  for (int d = -2; d <= 2; ++d) {
    out.set(c + d, c, 255, 64, 64);
    out.set(c, c + d, 255, 64, 64);
  }
  return out;
}

}  // namespace t2ldm::plot
