#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <algorithm>
#include <random>

#include "t2ldm/rangemap.hpp"

using namespace t2ldm::rangemap;

namespace {

SensorConfig sensor(int h = 32, int w = 1024) { return SensorConfig{}.resized(h, w); }

Point at_angles(double r, double azimuth, double elevation) {
  return {static_cast<float>(r * std::cos(elevation) * std::cos(azimuth)),
          static_cast<float>(r * std::cos(elevation) * std::sin(azimuth)),
          static_cast<float>(r * std::sin(elevation)), 0.5f};
}

}  // namespace

TEST_CASE("pixel_of maps the forward axis to the centre column") {
  const auto px = pixel_of({10, 0, 0, 0}, sensor());
  REQUIRE(px);
  CHECK(px->col == 512);
}

TEST_CASE("pixel_of maps the rear axis to column 0 from the positive side") {
  const auto px = pixel_of({-10, 1e-6f, 0, 0}, sensor());
  REQUIRE(px);
  CHECK(px->col == 0);
}

TEST_CASE("pixel_of rejects out-of-range points and non-finite input") {
  const auto cfg = sensor();
  CHECK_FALSE(pixel_of({0, 0, 0.001f, 0}, cfg));
  CHECK_FALSE(pixel_of({60, 0, 0, 0}, cfg));
  CHECK_FALSE(pixel_of({10, 0, 5, 0}, cfg));    // ~26.6 deg up
  CHECK_FALSE(pixel_of({10, 0, -6, 0}, cfg));   // ~31 deg down
  CHECK_THROWS_AS(pixel_of({NAN, 0, 0, 0}, cfg), std::invalid_argument);
}

TEST_CASE("nearest return wins a pixel") {
  PointCloud c;
  c.points = {{8, 0, 0, 0.1f}, {5, 0, 0, 0.9f}};
  const auto img = project(c, sensor());
  const auto px = pixel_of({5, 0, 0, 0}, sensor());
  CHECK(img.depth[img.index(px->row, px->col)] == doctest::Approx(5.0));
  CHECK(img.valid_count() == 1);
}

TEST_CASE("unproject of an on-axis pixel gives the on-axis point") {
  SensorConfig cfg;
  cfg.height = 1;
  cfg.width = 3;
  cfg.fov_up = 0.5;
  cfg.fov_down = -0.5;
  RangeImage img(cfg);
  img.depth[1] = 7.f;
  img.valid[1] = 1;
  const auto cloud = unproject(img);
  REQUIRE(cloud.size() == 1);
  CHECK(std::abs(cloud.points[0].x - 7.0) <= 1e-5);
  CHECK(std::abs(cloud.points[0].y) <= 1e-5);
  CHECK(std::abs(cloud.points[0].z) <= 1e-5);
  CHECK(unproject(RangeImage(cfg)).empty());
}

TEST_CASE("round trip at pixel-centre angles is exact to 1e-4 m") {
  const auto cfg = sensor();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> depth(1.0, 49.0);
  PointCloud c;
  for (int r = 0; r < cfg.height; ++r) {
    for (int w = 0; w < cfg.width; ++w) {
      c.points.push_back(at_angles(depth(rng), column_azimuth(w, cfg), row_elevation(r, cfg)));
    }
  }
  const auto back = unproject(project(c, cfg));
  REQUIRE(back.size() == c.size());
  double worst = 0;
  // unproject walks pixels in row-major order, the same order the cloud was built in.
  for (std::size_t i = 0; i < c.size(); ++i) {
    worst = std::max<double>({worst, std::abs(back.points[i].x - c.points[i].x),
                      std::abs(back.points[i].y - c.points[i].y),
                      std::abs(back.points[i].z - c.points[i].z)});
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("normalize endpoints and the log mapping") {
  CHECK(normalize_depth(3.0, 80.0) == doctest::Approx(2 * std::log2(4.0) / std::log2(81.0) - 1).epsilon(1e-12));
  CHECK(normalize_depth(3.0, 80.0) == doctest::Approx(-0.3691).epsilon(1e-3));
  auto cfg = sensor(2, 4);
  RangeImage img(cfg);
  img.depth[0] = static_cast<float>(cfg.depth_max);
  img.valid[0] = 1;
  const auto n = normalize(img);
  CHECK(n.depth_plane()[0] == doctest::Approx(1.0));
  CHECK(n.depth_plane()[1] == -1.f);
  CHECK(n.intensity_plane()[1] == -1.f);
}

TEST_CASE("denormalize inverts normalize on valid pixels") {
  const auto cfg = sensor(4, 64);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(0.5, 49.5), u(0, 1);
  RangeImage img(cfg);
  for (std::size_t i = 0; i < img.depth.size(); i += 3) {
    img.depth[i] = static_cast<float>(d(rng));
    img.intensity[i] = static_cast<float>(u(rng));
    img.valid[i] = 1;
  }
  const auto back = denormalize(normalize(img), cfg);
  for (std::size_t i = 0; i < img.depth.size(); ++i) {
    CHECK(back.valid[i] == img.valid[i]);
    if (img.valid[i]) CHECK(std::abs(back.depth[i] - img.depth[i]) <= 1e-5 * std::max(1.f, img.depth[i]));
  }
}

TEST_CASE("denormalize endpoints") {
  const auto cfg = sensor(2, 4);
  NormalizedImage n(cfg);
  CHECK(denormalize(n, cfg).valid_count() == 0);
  std::fill(n.values.begin(), n.values.begin() + 8, 1.f);
  const auto img = denormalize(n, cfg);
  for (float v : img.depth) CHECK(v == doctest::Approx(cfg.depth_max));
}

TEST_CASE("binary formats round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "t2ldm_rangemap_io";
  std::filesystem::create_directories(dir);
  PointCloud c;
  c.points = {{1, 2, 3, 0.5f}, {-4, 5, -0.5f, 0.25f}};
  write_point_cloud(dir / "c.bin", c);
  CHECK(std::filesystem::file_size(dir / "c.bin") == 32);
  const auto back = read_point_cloud(dir / "c.bin");
  REQUIRE(back.size() == 2);
  CHECK(back.points[1].y == 5.f);

  const auto img = project(c, sensor(8, 64));
  write_range_image(dir / "r.rmg", img);
  CHECK(std::filesystem::file_size(dir / "r.rmg") == 16 + 2 * 8 * 64 * 4);
  const auto rimg = read_range_image(dir / "r.rmg", SensorConfig{});
  CHECK(rimg.config.height == 8);
  CHECK(rimg.depth == img.depth);
  CHECK(rimg.valid == img.valid);
}

TEST_CASE("sensor validation") {
  SensorConfig c;
  c.fov_up = -30;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS_AS(project(PointCloud{}, SensorConfig{}.resized(0, 4)), std::invalid_argument);
}
