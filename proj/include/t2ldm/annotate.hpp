#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace t2ldm::annotate {

/// Oriented 3D box in the sensor frame. Yaw is normalized to (-pi, pi] on construction.
struct Box3D {
  Box3D() = default;
  Box3D(double cx, double cy, double cz, double l, double w, double h, double yaw,
        std::string cls);

  double cx = 0, cy = 0, cz = 0;
  double length = 1, width = 1, height = 1;
  double yaw = 0;
  std::string cls = "car";

  bool operator==(const Box3D&) const = default;
};

double normalize_yaw(double yaw);

enum class Weather { sunny, rainy };
enum class TimeOfDay { day, night };

struct SceneMeta {
  Weather weather = Weather::sunny;
  TimeOfDay time = TimeOfDay::day;
  bool operator==(const SceneMeta&) const = default;
};

struct AnnotationRules {
  double distance_threshold = 2.0;
  int quantity_pivot = 5;
  std::array<double, 4> orientation_edges{45.0, 135.0, 225.0, 315.0};
  std::string target_class = "car";
};

enum class Orientation { forward, left, backward, right };
enum class Longitudinal { ahead, behind, aligned };
enum class Lateral { left, right, center };

std::string_view to_string(Orientation o);
std::string_view to_string(Longitudinal p);
std::string_view to_string(Lateral p);
std::string_view to_string(Weather w);
std::string_view to_string(TimeOfDay t);
Weather parse_weather(std::string_view s);
TimeOfDay parse_time(std::string_view s);

/// Bin for an angle already in degrees; normalized into [0, 360) first.
Orientation orientation_bin_deg(double deg, const AnnotationRules& rules = {});
Orientation orientation_bin(double yaw_rad, const AnnotationRules& rules = {});

/// Relative placement of `target` with respect to `other` using the distance threshold.
std::pair<Longitudinal, Lateral> relation_text(const Box3D& target, const Box3D& other,
                                               const AnnotationRules& rules = {});

/// Template keys: quantity, location, orientation, layout, weather, time.
/// Aliases expand to lists, e.g. "wea_loc" -> weather, location.
std::vector<std::string> parse_template(std::string_view spec);
const std::vector<std::string>& template_keys();

struct Annotation {
  std::string prompt;
  std::map<std::string, std::string> parts;
};

/// Emits the coarse prompt clauses for the given template keys joined by single spaces.
/// Throws std::invalid_argument for unknown keys.
Annotation annotate_scene(const std::vector<Box3D>& boxes, const SceneMeta& meta,
                          const AnnotationRules& rules, const std::vector<std::string>& keys);
std::string annotate_scene(const std::vector<Box3D>& boxes, const SceneMeta& meta,
                           const AnnotationRules& rules, std::string_view template_spec);

/// Individual clause builders (empty string when a part has nothing to say).
std::string quantity_clause(const std::vector<Box3D>& boxes, const AnnotationRules& rules);
std::string location_clause(const std::vector<Box3D>& boxes, const AnnotationRules& rules);
std::string orientation_clause(const std::vector<Box3D>& boxes, const AnnotationRules& rules);
std::string layout_clause(const std::vector<Box3D>& boxes, const AnnotationRules& rules);

/// "One", "Two", ... capitalized number words; falls back to digits above twenty.
std::string number_word(int n);

/// Fixed ordering for co-occurrence clauses: pedestrian, barrier, truck, then alphabetical.
std::vector<std::string> ordered_classes(std::vector<std::string> classes);

// JSON (de)serialization for scene records and boxes.
nlohmann::json to_json(const Box3D& b);
Box3D box_from_json(const nlohmann::json& j);

struct SceneAnnotationInput {
  std::string id;
  std::vector<Box3D> boxes;
  SceneMeta meta;
};

SceneAnnotationInput scene_from_json(const nlohmann::json& j);
nlohmann::json scene_to_json(const SceneAnnotationInput& s);
nlohmann::json annotation_to_json(const std::string& id, const Annotation& a);

std::vector<SceneAnnotationInput> read_scenes_jsonl(const std::filesystem::path& path);

}  // namespace t2ldm::annotate
