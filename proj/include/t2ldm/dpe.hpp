#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>
#include <vector>

#include "t2ldm/rangemap.hpp"

namespace t2ldm::dpe {

/// Per-pixel-centre azimuth theta in (0, 2pi] and elevation phi, both row-major H x W radians.
struct AngleGrid {
  int height = 0;
  int width = 0;
  std::vector<double> theta;
  std::vector<double> phi;
};

AngleGrid pixel_angle_grid(const rangemap::SensorConfig& config);

/// Fourier features, channel-major [4K, H, W]. Term k contributes the four channels
/// sin(2^k theta), cos(2^k theta), sin(2^k phi), cos(2^k phi).
struct FeatureGrid {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  float at(int c, int h, int w) const {
    return values[(static_cast<std::size_t>(c) * height + h) * width + w];
  }
};

FeatureGrid dpe_features(const AngleGrid& grid, int terms);

/// Maps a [4K, H, W] grid to the channel count of x.
using Projection = std::function<FeatureGrid(const FeatureGrid&)>;

/// x + alpha * projection(dpe). Throws std::invalid_argument on channel or size mismatch.
FeatureGrid apply_dpe(const FeatureGrid& x, const FeatureGrid& dpe, double alpha,
                      const Projection& projection);

/// Memoizes dpe_features by (H, W, FoV, K). Thread-safe.
class DpeCache {
 public:
  std::shared_ptr<const FeatureGrid> get(const rangemap::SensorConfig& config, int terms);
  std::size_t size() const;

 private:
  using Key = std::tuple<int, int, double, double, int>;
  mutable std::mutex mu_;
  std::map<Key, std::shared_ptr<const FeatureGrid>> cache_;
};

}  // namespace t2ldm::dpe
