#include "t2ldm/rangemap.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

namespace t2ldm::rangemap {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

}  // namespace

void SensorConfig::validate() const {
  if (height < 1 || width < 1) {
    throw std::invalid_argument("SensorConfig: height and width must be >= 1");
  }
  if (!(fov_up > fov_down)) {
    throw std::invalid_argument("SensorConfig: fov_up must exceed fov_down");
  }
  if (!(depth_min > 0.0) || !(depth_min < depth_max)) {
    throw std::invalid_argument("SensorConfig: need 0 < depth_min < depth_max");
  }
}

double SensorConfig::fov_up_rad() const { return fov_up * kDegToRad; }
double SensorConfig::fov_down_rad() const { return fov_down * kDegToRad; }

SensorConfig SensorConfig::resized(int h, int w) const {
  SensorConfig c = *this;
  c.height = h;
  c.width = w;
  return c;
}

RangeImage::RangeImage(const SensorConfig& cfg) : config(cfg) {
  const auto n = static_cast<std::size_t>(cfg.height) * cfg.width;
  depth.assign(n, 0.f);
  intensity.assign(n, 0.f);
  valid.assign(n, 0);
}

std::size_t RangeImage::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), 1));
}

NormalizedImage::NormalizedImage(const SensorConfig& cfg) : config(cfg) {
  values.assign(2 * static_cast<std::size_t>(cfg.height) * cfg.width, -1.f);
}

double column_azimuth(int col, const SensorConfig& config) {
  return std::numbers::pi * (1.0 - 2.0 * (col + 0.5) / config.width);
}

double row_elevation(int row, const SensorConfig& config) {
  return config.fov_up_rad() - config.fov_rad() * (row + 0.5) / config.height;
}

std::optional<PixelCoord> pixel_of(const Point& p, const SensorConfig& config) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
    throw std::invalid_argument("project: non-finite point coordinate");
  }
  const double x = p.x, y = p.y, z = p.z;
  const double r = std::sqrt(x * x + y * y + z * z);
  if (r < config.depth_min || r > config.depth_max) return std::nullopt;

  const double pitch = std::asin(std::clamp(z / r, -1.0, 1.0));
  const double up = config.fov_up_rad();
  const double down = config.fov_down_rad();
  if (pitch > up || pitch < down) return std::nullopt;

  const double yaw = std::atan2(y, x);
  const double u = 0.5 * (1.0 - yaw / std::numbers::pi) * config.width;
  const double v = (1.0 - (pitch - down) / (up - down)) * config.height;

  PixelCoord px;
  px.col = std::clamp(static_cast<int>(std::floor(u)), 0, config.width - 1);
  px.row = std::clamp(static_cast<int>(std::floor(v)), 0, config.height - 1);
  return px;
}

ProjectResult project_indexed(const PointCloud& cloud, const SensorConfig& config) {
  config.validate();
  ProjectResult out{RangeImage(config), {}, 0};
  out.source_index.assign(out.image.depth.size(), -1);

  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Point& p = cloud.points[i];
    const auto px = pixel_of(p, config);
    if (!px) {
      ++out.dropped;
      continue;
    }
    const float r = static_cast<float>(
        std::sqrt(double(p.x) * p.x + double(p.y) * p.y + double(p.z) * p.z));
    const std::size_t idx = out.image.index(px->row, px->col);
    if (out.image.valid[idx] && !(r < out.image.depth[idx])) continue;
    out.image.valid[idx] = 1;
    out.image.depth[idx] = r;
    out.image.intensity[idx] = std::clamp(p.intensity, 0.f, 1.f);
    out.source_index[idx] = static_cast<int>(i);
  }
  return out;
}

RangeImage project(const PointCloud& cloud, const SensorConfig& config) {
  return project_indexed(cloud, config).image;
}

PointCloud unproject(const RangeImage& img) {
  const SensorConfig& cfg = img.config;
  PointCloud cloud;
  cloud.points.reserve(img.valid_count());
  for (int h = 0; h < cfg.height; ++h) {
    const double phi = row_elevation(h, cfg);
    const double cp = std::cos(phi), sp = std::sin(phi);
    for (int w = 0; w < cfg.width; ++w) {
      const std::size_t idx = img.index(h, w);
      if (!img.valid[idx]) continue;
      const double psi = column_azimuth(w, cfg);
      const double r = img.depth[idx];
      cloud.points.push_back({static_cast<float>(r * cp * std::cos(psi)),
                              static_cast<float>(r * cp * std::sin(psi)),
                              static_cast<float>(r * sp), img.intensity[idx]});
    }
  }
  return cloud;
}

double normalize_depth(double depth, double depth_max) {
  return 2.0 * std::log2(depth + 1.0) / std::log2(depth_max + 1.0) - 1.0;
}

double denormalize_depth(double value, double depth_max) {
  return std::exp2((value + 1.0) * 0.5 * std::log2(depth_max + 1.0)) - 1.0;
}

NormalizedImage normalize(const RangeImage& img, NormalizeStats* stats) {
  const SensorConfig& cfg = img.config;
  NormalizedImage out(cfg);
  float* dplane = out.depth_plane();
  float* iplane = out.intensity_plane();
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < img.depth.size(); ++i) {
    if (!img.valid[i]) continue;  // both channels stay at -1
    double d = img.depth[i];
    if (d > cfg.depth_max) {
      d = cfg.depth_max;
      ++clamped;
    }
    dplane[i] = static_cast<float>(std::clamp(normalize_depth(d, cfg.depth_max), -1.0, 1.0));
    iplane[i] = static_cast<float>(2.0 * std::clamp<double>(img.intensity[i], 0.0, 1.0) - 1.0);
  }
  if (stats) stats->clamped = clamped;
  return out;
}

RangeImage denormalize(const NormalizedImage& norm, const SensorConfig& config) {
  config.validate();
  RangeImage out(config);
  const std::size_t n = out.depth.size();
  if (norm.values.size() != 2 * n) {
    throw std::invalid_argument("denormalize: value count does not match config");
  }
  const float* dplane = norm.values.data();
  const float* iplane = norm.values.data() + n;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::clamp<double>(dplane[i], -1.0, 1.0);
    const double d = denormalize_depth(v, config.depth_max);
    if (d < config.depth_min) continue;
    out.valid[i] = 1;
    out.depth[i] = static_cast<float>(std::min(d, config.depth_max));
    out.intensity[i] = static_cast<float>(std::clamp((iplane[i] + 1.0) * 0.5, 0.0, 1.0));
  }
  return out;
}

void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  static_assert(sizeof(Point) == 16);
  os.write(reinterpret_cast<const char*>(cloud.points.data()),
           static_cast<std::streamsize>(cloud.points.size() * sizeof(Point)));
}

PointCloud read_point_cloud(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes % sizeof(Point) != 0) {
    throw std::runtime_error(path.string() + ": size is not a multiple of 16 bytes");
  }
  is.seekg(0);
  PointCloud cloud;
  cloud.points.resize(bytes / sizeof(Point));
  is.read(reinterpret_cast<char*>(cloud.points.data()), static_cast<std::streamsize>(bytes));
  for (const auto& p : cloud.points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw std::runtime_error(path.string() + ": non-finite coordinate");
    }
  }
  return cloud;
}

void write_range_image(const std::filesystem::path& path, const RangeImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::uint32_t header[4] = {0, static_cast<std::uint32_t>(img.config.height),
                                   static_cast<std::uint32_t>(img.config.width), 2};
  os.write("RMG1", 4);
  os.write(reinterpret_cast<const char*>(header + 1), 12);
  os.write(reinterpret_cast<const char*>(img.depth.data()),
           static_cast<std::streamsize>(img.depth.size() * sizeof(float)));
  os.write(reinterpret_cast<const char*>(img.intensity.data()),
           static_cast<std::streamsize>(img.intensity.size() * sizeof(float)));
}

RangeImage read_range_image(const std::filesystem::path& path, const SensorConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  std::uint32_t dims[3];
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(dims), 12);
  if (!is || std::memcmp(magic, "RMG1", 4) != 0) {
    throw std::runtime_error(path.string() + ": not an RMG1 range image");
  }
  SensorConfig cfg = config.resized(static_cast<int>(dims[0]), static_cast<int>(dims[1]));
  RangeImage img(cfg);
  is.read(reinterpret_cast<char*>(img.depth.data()),
          static_cast<std::streamsize>(img.depth.size() * sizeof(float)));
  is.read(reinterpret_cast<char*>(img.intensity.data()),
          static_cast<std::streamsize>(img.intensity.size() * sizeof(float)));
  if (!is) throw std::runtime_error(path.string() + ": truncated payload");
  for (std::size_t i = 0; i < img.depth.size(); ++i) img.valid[i] = img.depth[i] > 0.f;
  return img;
}

}  // namespace t2ldm::rangemap
