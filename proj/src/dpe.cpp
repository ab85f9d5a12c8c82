#include "t2ldm/dpe.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace t2ldm::dpe {

AngleGrid pixel_angle_grid(const rangemap::SensorConfig& config) {
  config.validate();
  AngleGrid g;
  g.height = config.height;
  g.width = config.width;
  const auto n = static_cast<std::size_t>(config.height) * config.width;
  g.theta.resize(n);
  g.phi.resize(n);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (int h = 0; h < config.height; ++h) {
    const double phi = config.fov_up_rad() - config.fov_rad() * (h + 0.5) / config.height;
    for (int w = 0; w < config.width; ++w) {
      const std::size_t i = static_cast<std::size_t>(h) * config.width + w;
      g.theta[i] = two_pi - two_pi * (w + 0.5) / config.width;
      g.phi[i] = phi;
    }
  }
  return g;
}

FeatureGrid dpe_features(const AngleGrid& grid, int terms) {
  if (terms < 1) throw std::invalid_argument("dpe_features: K must be >= 1");
  FeatureGrid f;
  f.channels = 4 * terms;
  f.height = grid.height;
  f.width = grid.width;
  const std::size_t plane = static_cast<std::size_t>(grid.height) * grid.width;
  f.values.resize(plane * f.channels);
  for (int k = 0; k < terms; ++k) {
    const double scale = std::ldexp(1.0, k);
    float* st = f.values.data() + (4 * k + 0) * plane;
    float* ct = f.values.data() + (4 * k + 1) * plane;
    float* sp = f.values.data() + (4 * k + 2) * plane;
    float* cp = f.values.data() + (4 * k + 3) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      st[i] = static_cast<float>(std::sin(scale * grid.theta[i]));
      ct[i] = static_cast<float>(std::cos(scale * grid.theta[i]));
      sp[i] = static_cast<float>(std::sin(scale * grid.phi[i]));
      cp[i] = static_cast<float>(std::cos(scale * grid.phi[i]));
    }
  }
  return f;
}

FeatureGrid apply_dpe(const FeatureGrid& x, const FeatureGrid& dpe, double alpha,
                      const Projection& projection) {
  const FeatureGrid p = projection(dpe);
  if (p.channels != x.channels || p.height != x.height || p.width != x.width ||
      p.values.size() != x.values.size()) {
    throw std::invalid_argument("apply_dpe: projected DPE does not match feature shape");
  }
  FeatureGrid out = x;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = static_cast<float>(x.values[i] + alpha * p.values[i]);
  }
  return out;
}

std::shared_ptr<const FeatureGrid> DpeCache::get(const rangemap::SensorConfig& config,
                                                 int terms) {
  const Key key{config.height, config.width, config.fov_up, config.fov_down, terms};
  std::lock_guard lock(mu_);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  auto grid = std::make_shared<const FeatureGrid>(dpe_features(pixel_angle_grid(config), terms));
  cache_.emplace(key, grid);
  return grid;
}

std::size_t DpeCache::size() const {
  std::lock_guard lock(mu_);
  return cache_.size();
}

}  // namespace t2ldm::dpe
