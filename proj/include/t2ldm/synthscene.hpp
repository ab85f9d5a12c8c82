#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "t2ldm/annotate.hpp"
#include "t2ldm/rangemap.hpp"

namespace t2ldm::synthscene {

// Per-point semantic labels written alongside generated clouds.
enum Label : int {
  kLabelGround = 0,
  kLabelWall = 1,
  kLabelCar = 2,
  kLabelPedestrian = 3,
  kLabelBarrier = 4,
  kLabelTruck = 5,
};
inline constexpr int kLabelCount = 6;

int label_for_class(const std::string& cls);

using Vec3 = std::array<double, 3>;

enum class PrimitiveKind { ground, wall, cuboid, cylinder };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::ground;
  std::string cls;  // object class for cuboids/cylinders, "ground"/"wall" otherwise
  // ground: center[2] is the plane height. wall: center[1] is the plane offset,
  // size[2] the top height. cuboid: oriented box. cylinder: size[0] radius, size[2] height.
  Vec3 center{0, 0, 0};
  Vec3 size{0, 0, 0};
  double yaw = 0;
};

struct Geometry {
  std::vector<Primitive> primitives;
};

struct Hit {
  double depth = 0;
  int surface = -1;
};

/// Nearest positive intersection within max_depth. Throws std::invalid_argument
/// unless |direction| == 1 within 1e-9.
std::optional<Hit> raycast(const Vec3& origin, const Vec3& direction, const Geometry& geometry,
                           double max_depth);

/// Unsigned distance from a point to the surface of one primitive.
double surface_distance(const Vec3& p, const Primitive& prim);

struct ObjectPlacement {
  std::string cls;
  double x = 0, y = 0;
  double yaw = 0;
  Vec3 size{0, 0, 0};  // l, w, h (cylinders: diameter, diameter, h)
};

struct IntensityModel {
  double ground = 0.2;
  double car = 0.6;
  double pedestrian = 0.4;
  double wall = 0.3;
  double barrier = 0.5;
  double truck = 0.55;
  double noise = 0.05;
  double rain_dropout = 0.15;
  double rain_depth_sigma = 0.03;
  double night_scale = 0.7;

  double base(const std::string& cls) const;
};

struct SceneSpec {
  rangemap::SensorConfig sensor;
  double sensor_height = 1.8;
  double street_width = 14.0;
  double wall_height = 4.0;
  bool walls = true;
  /// Explicitly placed objects.
  std::vector<ObjectPlacement> objects;
  /// Additional randomly placed objects per class.
  int random_cars = 0;
  int random_pedestrians = 0;
  int random_barriers = 0;
  int random_trucks = 0;
  double min_range = 4.0;
  /// Placement radius; clipped to 0.75 * depth_max.
  double max_range = 30.0;
  annotate::SceneMeta meta;
  std::string prompt_template = "quantity";
  IntensityModel intensity;
  std::uint64_t seed = 0;
};

struct SceneRecord {
  std::string id;
  rangemap::PointCloud cloud;  // labels filled
  std::vector<int> surfaces;   // primitive index per point
  std::vector<annotate::Box3D> boxes;
  annotate::SceneMeta meta;
  std::string prompt;
  annotate::Annotation annotation;
  Geometry geometry;
};

/// Places objects (non-overlapping footprints) and builds the primitive list.
Geometry build_geometry(const SceneSpec& spec, std::vector<annotate::Box3D>* boxes);

SceneRecord generate_scene(const SceneSpec& spec);

/// Random object counts and meta for dataset synthesis; deterministic in `seed`.
SceneSpec random_scene_spec(const SceneSpec& base, std::uint64_t seed);

/// Writes <stem>.bin, <stem>.label and the one-line <stem>.jsonl sidecar.
void write_scene(const std::filesystem::path& dir, const std::string& stem, const SceneRecord& rec);

nlohmann::json sidecar_json(const SceneRecord& rec);

}  // namespace t2ldm::synthscene
