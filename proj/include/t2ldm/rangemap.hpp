#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace t2ldm::rangemap {

/// Beam layout of a spinning LiDAR. Angles are in degrees, depths in meters.
struct SensorConfig {
  int height = 32;
  int width = 1024;
  double fov_up = 3.0;
  double fov_down = -25.0;
  double depth_min = 0.01;
  double depth_max = 50.0;

  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;

  double fov_up_rad() const;
  double fov_down_rad() const;
  double fov_rad() const { return fov_up_rad() - fov_down_rad(); }

  /// Same FoV and depth range, different grid resolution.
  SensorConfig resized(int h, int w) const;

  bool operator==(const SensorConfig&) const = default;
};

struct Point {
  float x = 0.f;
  float y = 0.f;
  float z = 0.f;
  float intensity = 0.f;
};

struct PointCloud {
  std::vector<Point> points;
  /// Optional per-point class label; empty or same length as points.
  std::vector<int> labels;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_labels() const { return !labels.empty(); }
};

struct RangeImage {
  SensorConfig config;
  std::vector<float> depth;      // row-major H x W, 0 where invalid
  std::vector<float> intensity;  // row-major H x W
  std::vector<std::uint8_t> valid;

  explicit RangeImage(const SensorConfig& cfg = {});

  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * config.width + col;
  }
  std::size_t valid_count() const;
};

/// Diffusion-domain image: channel-major [depth plane, intensity plane], values in [-1, 1].
struct NormalizedImage {
  SensorConfig config;
  std::vector<float> values;  // 2 * H * W

  explicit NormalizedImage(const SensorConfig& cfg = {});

  float* depth_plane() { return values.data(); }
  float* intensity_plane() { return values.data() + plane_size(); }
  const float* depth_plane() const { return values.data(); }
  const float* intensity_plane() const { return values.data() + plane_size(); }
  std::size_t plane_size() const {
    return static_cast<std::size_t>(config.height) * config.width;
  }
};

struct PixelCoord {
  int row = 0;
  int col = 0;
};

/// Pixel a point falls into, or nullopt when outside the FoV or depth range.
/// Throws std::invalid_argument for non-finite coordinates.
std::optional<PixelCoord> pixel_of(const Point& p, const SensorConfig& config);

/// Azimuth (radians) of the centre of column `col`.
double column_azimuth(int col, const SensorConfig& config);
/// Elevation (radians) of the centre of row `row`.
double row_elevation(int row, const SensorConfig& config);

struct ProjectResult {
  RangeImage image;
  /// For every pixel, index of the winning point in the input cloud (-1 when empty).
  std::vector<int> source_index;
  std::size_t dropped = 0;
};

/// Spherical projection. Nearest return wins a pixel; ties keep the first point.
RangeImage project(const PointCloud& cloud, const SensorConfig& config);
ProjectResult project_indexed(const PointCloud& cloud, const SensorConfig& config);

/// Inverse projection through pixel-centre angles. Invalid pixels emit nothing.
PointCloud unproject(const RangeImage& img);

struct NormalizeStats {
  std::size_t clamped = 0;
};

NormalizedImage normalize(const RangeImage& img, NormalizeStats* stats = nullptr);
RangeImage denormalize(const NormalizedImage& norm, const SensorConfig& config);

double normalize_depth(double depth, double depth_max);
double denormalize_depth(double value, double depth_max);

// KITTI-style point files: N records of 4 little-endian float32 (x, y, z, intensity).
void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_point_cloud(const std::filesystem::path& path);

// Range image files: "RMG1", H, W, channel count (2) as uint32 LE, then the
// row-major float32 depth plane followed by the intensity plane.
void write_range_image(const std::filesystem::path& path, const RangeImage& img);
RangeImage read_range_image(const std::filesystem::path& path, const SensorConfig& config);

}  // namespace t2ldm::rangemap
