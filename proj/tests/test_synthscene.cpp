#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "t2ldm/synthscene.hpp"

using namespace t2ldm;
using namespace t2ldm::synthscene;

namespace {

Primitive cuboid(double x, double y, double l, double w, double h, double z0, double yaw = 0) {
  return {PrimitiveKind::cuboid, "car", {x, y, z0 + h / 2}, {l, w, h}, yaw};
}

Primitive ground(double z) { return {PrimitiveKind::ground, "ground", {0, 0, z}, {0, 0, 0}, 0}; }

SceneSpec small_spec() {
  SceneSpec s;
  s.sensor = rangemap::SensorConfig{}.resized(16, 256);
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("raycast primitives") {
  Geometry g;
  g.primitives = {cuboid(14, 0, 4, 2, 2, -1)};
  const auto hit = raycast({0, 0, 0}, {1, 0, 0}, g, 80);
  REQUIRE(hit);
  CHECK(hit->depth == doctest::Approx(12.0).epsilon(1e-12));
  CHECK(hit->surface == 0);

  // Rotated by 90 degrees the near face is at x = 13.
  g.primitives = {cuboid(14, 0, 4, 2, 2, -1, M_PI / 2)};
  CHECK(raycast({0, 0, 0}, {1, 0, 0}, g, 80)->depth == doctest::Approx(13.0).epsilon(1e-9));

  g.primitives = {ground(-1.8)};
  for (double phi_deg : {-2.0, -10.0, -24.9}) {
    const double phi = phi_deg * M_PI / 180;
    const auto h = raycast({0, 0, 0}, {std::cos(phi), 0, std::sin(phi)}, g, 1e9);
    REQUIRE(h);
    CHECK(h->depth == doctest::Approx(1.8 / std::sin(-phi)).epsilon(1e-12));
  }
  const double up = 0.1;
  CHECK_FALSE(raycast({0, 0, 0}, {std::cos(up), 0, std::sin(up)}, g, 80));
  // Beyond the maximum depth counts as a miss.
  CHECK_FALSE(raycast({0, 0, 0}, {std::cos(0.01), 0, -std::sin(0.01)}, g, 80));

  g.primitives.push_back({PrimitiveKind::cylinder, "pedestrian", {6, 0, -0.9}, {0.3, 0.3, 1.8}, 0});
  const auto c = raycast({0, 0, 0}, {1, 0, 0}, g, 80);
  REQUIRE(c);
  CHECK(c->depth == doctest::Approx(5.7).epsilon(1e-9));
  CHECK(c->surface == 1);

  CHECK_THROWS_AS(raycast({0, 0, 0}, {1, 1, 0}, g, 80), std::invalid_argument);
  CHECK_THROWS_AS(raycast({0, 0, 0}, {0, 0, 0}, g, 80), std::invalid_argument);
}

TEST_CASE("generated scenes are consistent") {
  auto spec = small_spec();
  spec.objects = {{"car", 12, 0, 0.3, {4.2, 1.8, 1.5}}, {"pedestrian", 8, 4, 0, {0.6, 0.6, 1.7}}};
  spec.random_cars = 2;
  spec.seed = 3;
  const auto rec = generate_scene(spec);
  const auto& cfg = spec.sensor;
  CHECK(rec.cloud.size() <= static_cast<std::size_t>(cfg.height * cfg.width));
  CHECK(rec.cloud.labels.size() == rec.cloud.size());
  CHECK(rec.boxes.size() == 4u);
  CHECK(rec.prompt == annotate::annotate_scene(rec.boxes, rec.meta, {}, spec.prompt_template));

  // Every point lies on the surface that produced it.
  double worst = 0;
  for (std::size_t i = 0; i < rec.cloud.size(); ++i) {
    const auto& p = rec.cloud.points[i];
    worst = std::max(worst, surface_distance({p.x, p.y, p.z}, rec.geometry.primitives[rec.surfaces[i]]));
  }
  CHECK(worst <= 1e-4);

  // One ray per pixel: projecting back loses nothing.
  const auto img = rangemap::project(rec.cloud, cfg);
  CHECK(static_cast<std::size_t>(std::count(img.valid.begin(), img.valid.end(), 1)) == rec.cloud.size());

  // The unoccluded car at 12 m gets returns.
  const auto& car = rec.boxes.front();
  int inside = 0;
  for (const auto& p : rec.cloud.points) {
    const double dx = p.x - car.cx, dy = p.y - car.cy;
    const double u = dx * std::cos(car.yaw) + dy * std::sin(car.yaw);
    const double v = -dx * std::sin(car.yaw) + dy * std::cos(car.yaw);
    inside += std::abs(u) <= car.length / 2 + 1e-3 && std::abs(v) <= car.width / 2 + 1e-3;
  }
  CHECK(inside > 0);

  const auto again = generate_scene(spec);
  CHECK(again.cloud.points.size() == rec.cloud.points.size());
  CHECK(std::equal(again.cloud.points.begin(), again.cloud.points.end(), rec.cloud.points.begin(),
                   [](const auto& a, const auto& b) {
                     return a.x == b.x && a.y == b.y && a.z == b.z && a.intensity == b.intensity;
                   }));
}

TEST_CASE("every car box within range receives returns") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto spec = random_scene_spec(small_spec(), seed);
    const auto rec = generate_scene(spec);
    for (const auto& b : rec.boxes) {
      CHECK(std::hypot(b.cx, b.cy) <= 0.75 * spec.sensor.depth_max);
    }
    // Footprints never overlap.
    for (std::size_t i = 0; i < rec.boxes.size(); ++i) {
      for (std::size_t j = i + 1; j < rec.boxes.size(); ++j) {
        const auto& a = rec.boxes[i];
        const auto& b = rec.boxes[j];
        const double ra = 0.5 * std::hypot(a.length, a.width), rb = 0.5 * std::hypot(b.length, b.width);
        CHECK(std::hypot(a.cx - b.cx, a.cy - b.cy) > 0.5 * (ra + rb));
      }
    }
  }
}

TEST_CASE("weather and time effects") {
  auto spec = small_spec();
  spec.objects = {{"car", 10, 0, 0, {4.2, 1.8, 1.5}}};
  spec.seed = 11;
  const auto clear = generate_scene(spec);
  spec.meta.weather = annotate::Weather::rainy;
  const auto rain = generate_scene(spec);
  const double kept = double(rain.cloud.size()) / clear.cloud.size();
  CHECK(kept == doctest::Approx(0.85).epsilon(0.03));

  spec.meta = {annotate::Weather::sunny, annotate::TimeOfDay::night};
  const auto night = generate_scene(spec);
  REQUIRE(night.cloud.size() == clear.cloud.size());
  for (std::size_t i = 0; i < night.cloud.size(); ++i) {
    CHECK(night.cloud.points[i].intensity == doctest::Approx(0.7 * clear.cloud.points[i].intensity).epsilon(1e-5));
  }
  for (std::size_t i = 0; i < clear.cloud.size(); ++i) {
    if (clear.cloud.labels[i] == kLabelGround) CHECK(std::abs(clear.cloud.points[i].intensity - 0.2) <= 0.05 + 1e-6);
    if (clear.cloud.labels[i] == kLabelCar) CHECK(std::abs(clear.cloud.points[i].intensity - 0.6) <= 0.05 + 1e-6);
  }
}

TEST_CASE("scene files are byte-identical for a fixed seed") {
  const auto dir = std::filesystem::temp_directory_path() / "t2ldm_synth_test";
  std::filesystem::remove_all(dir);
  auto spec = random_scene_spec(small_spec(), 42);
  auto rec = generate_scene(spec);
  rec.id = "scene_00000";
  write_scene(dir / "a", rec.id, rec);
  auto again = generate_scene(spec);
  again.id = rec.id;
  write_scene(dir / "b", again.id, again);
  for (const char* ext : {".bin", ".label", ".jsonl"}) {
    CHECK(slurp(dir / "a" / ("scene_00000" + std::string(ext))) ==
          slurp(dir / "b" / ("scene_00000" + std::string(ext))));
  }
  CHECK(rangemap::read_point_cloud(dir / "a" / "scene_00000.bin").size() == rec.cloud.size());
}
