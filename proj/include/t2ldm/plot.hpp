#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "t2ldm/rangemap.hpp"

namespace t2ldm::plot {

/// 8-bit RGB image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image(int w, int h, std::uint8_t fill = 0);
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

void write_png(const std::filesystem::path& path, const Image& img);

/// Depth plane as a colormapped image, `scale` pixels per cell; invalid pixels black.
Image range_image_plot(const rangemap::RangeImage& img, int scale = 2);

/// Top-down scatter of the cloud within `radius` metres, coloured by height.
Image bev_plot(const rangemap::PointCloud& cloud, double radius = 50.0, int size = 512);

}  // namespace t2ldm::plot
