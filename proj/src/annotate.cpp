#include "t2ldm/annotate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

namespace t2ldm::annotate {

double normalize_yaw(double yaw) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double y = std::fmod(yaw, two_pi);
  if (y <= -std::numbers::pi) y += two_pi;
  if (y > std::numbers::pi) y -= two_pi;
  return y;
}

Box3D::Box3D(double cx_, double cy_, double cz_, double l, double w, double h, double yaw_,
             std::string cls_)
    : cx(cx_), cy(cy_), cz(cz_), length(l), width(w), height(h), yaw(normalize_yaw(yaw_)),
      cls(std::move(cls_)) {
  if (!(l > 0) || !(w > 0) || !(h > 0)) throw std::invalid_argument("Box3D: sizes must be > 0");
}

std::string_view to_string(Orientation o) {
  switch (o) {
    case Orientation::forward: return "forward";
    case Orientation::left: return "left";
    case Orientation::backward: return "backward";
    case Orientation::right: return "right";
  }
  return "?";
}

std::string_view to_string(Longitudinal p) {
  switch (p) {
    case Longitudinal::ahead: return "ahead";
    case Longitudinal::behind: return "behind";
    case Longitudinal::aligned: return "aligned";
  }
  return "?";
}

std::string_view to_string(Lateral p) {
  switch (p) {
    case Lateral::left: return "left";
    case Lateral::right: return "right";
    case Lateral::center: return "center";
  }
  return "?";
}

std::string_view to_string(Weather w) { return w == Weather::rainy ? "rainy" : "sunny"; }
std::string_view to_string(TimeOfDay t) { return t == TimeOfDay::night ? "night" : "day"; }

Weather parse_weather(std::string_view s) {
  if (s == "sunny") return Weather::sunny;
  if (s == "rainy") return Weather::rainy;
  throw std::invalid_argument("unknown weather '" + std::string(s) + "'");
}

TimeOfDay parse_time(std::string_view s) {
  if (s == "day") return TimeOfDay::day;
  if (s == "night") return TimeOfDay::night;
  throw std::invalid_argument("unknown time of day '" + std::string(s) + "'");
}

Orientation orientation_bin_deg(double deg, const AnnotationRules& rules) {
  double d = std::fmod(deg, 360.0);
  if (d < 0) d += 360.0;
  // Absorb radian/degree round-off so exact edges land on their inclusive side.
  d = std::round(d * 1e9) / 1e9;
  if (d >= 360.0) d -= 360.0;
  const auto& e = rules.orientation_edges;
  if (d >= e[3] || d < e[0]) return Orientation::forward;
  if (d < e[1]) return Orientation::left;
  if (d < e[2]) return Orientation::backward;
  return Orientation::right;
}

Orientation orientation_bin(double yaw_rad, const AnnotationRules& rules) {
  return orientation_bin_deg(yaw_rad * 180.0 / std::numbers::pi, rules);
}

std::pair<Longitudinal, Lateral> relation_text(const Box3D& target, const Box3D& other,
                                               const AnnotationRules& rules) {
  const double dx = target.cx - other.cx;
  const double dy = target.cy - other.cy;
  const double th = rules.distance_threshold;
  const Longitudinal p1 =
      dx > th ? Longitudinal::ahead : (dx < -th ? Longitudinal::behind : Longitudinal::aligned);
  const Lateral p2 = dy > th ? Lateral::left : (dy < -th ? Lateral::right : Lateral::center);
  return {p1, p2};
}

std::string number_word(int n) {
  static const char* words[] = {"Zero",    "One",     "Two",      "Three",    "Four",
                                "Five",    "Six",     "Seven",    "Eight",    "Nine",
                                "Ten",     "Eleven",  "Twelve",   "Thirteen", "Fourteen",
                                "Fifteen", "Sixteen", "Seventeen", "Eighteen", "Nineteen",
                                "Twenty"};
  if (n >= 0 && n <= 20) return words[n];
  return std::to_string(n);
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string none_clause(const AnnotationRules& rules) { return "No " + rules.target_class + "."; }

std::vector<const Box3D*> targets(const std::vector<Box3D>& boxes, const AnnotationRules& rules) {
  std::vector<const Box3D*> out;
  for (const auto& b : boxes) {
    if (b.cls == rules.target_class) out.push_back(&b);
  }
  return out;
}

}  // namespace

std::vector<std::string> ordered_classes(std::vector<std::string> classes) {
  static const std::vector<std::string> canonical = {"pedestrian", "barrier", "truck"};
  auto rank = [](const std::string& c) {
    auto it = std::find(canonical.begin(), canonical.end(), c);
    return static_cast<int>(it - canonical.begin());
  };
  std::sort(classes.begin(), classes.end(), [&](const std::string& a, const std::string& b) {
    const int ra = rank(a), rb = rank(b);
    if (ra != rb) return ra < rb;
    return a < b;
  });
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  return classes;
}

std::string quantity_clause(const std::vector<Box3D>& boxes, const AnnotationRules& rules) {
  const auto n = static_cast<int>(targets(boxes, rules).size());
  if (n == 0) return none_clause(rules);
  if (n > rules.quantity_pivot) {
    return "More than " + lower(number_word(rules.quantity_pivot)) + " " + rules.target_class + "s.";
  }
  if (n == 1) return "One " + rules.target_class + ".";
  return number_word(n) + " " + rules.target_class + "s.";
}

std::string location_clause(const std::vector<Box3D>& boxes, const AnnotationRules& rules) {
  if (targets(boxes, rules).empty()) return none_clause(rules);
  std::vector<std::string> others;
  for (const auto& b : boxes) {
    if (b.cls != rules.target_class) others.push_back(b.cls);
  }
  std::string out;
  for (const auto& c : ordered_classes(others)) {
    if (!out.empty()) out += ' ';
    out += "One " + rules.target_class + " is around one " + c + ".";
  }
  return out;
}

std::string orientation_clause(const std::vector<Box3D>& boxes, const AnnotationRules& rules) {
  const auto t = targets(boxes, rules);
  if (t.empty()) return none_clause(rules);
  std::set<Orientation> bins;
  for (const auto* b : t) bins.insert(orientation_bin(b->yaw, rules));
  std::string out;
  for (Orientation o : bins) {
    if (!out.empty()) out += ' ';
    out += "One " + rules.target_class + " is facing " + std::string(to_string(o)) + ".";
  }
  return out;
}

std::string layout_clause(const std::vector<Box3D>& boxes, const AnnotationRules& rules) {
  const auto t = targets(boxes, rules);
  if (t.empty()) return none_clause(rules);
  for (const auto& b : boxes) {
    if (b.cls == rules.target_class) continue;
    const auto [p1, p2] = relation_text(*t.front(), b, rules);
    return "One " + rules.target_class + " is " + std::string(to_string(p1)) + " to the " +
           std::string(to_string(p2)) + " of one " + b.cls + ".";
  }
  return {};
}

const std::vector<std::string>& template_keys() {
  static const std::vector<std::string> keys = {"quantity", "location", "orientation",
                                                "layout",   "weather",  "time"};
  return keys;
}

std::vector<std::string> parse_template(std::string_view spec) {
  static const std::map<std::string, std::vector<std::string>, std::less<>> aliases = {
      {"wea_loc", {"weather", "location"}},  {"wea_qua", {"weather", "quantity"}},
      {"wea_ori", {"weather", "orientation"}}, {"time_loc", {"time", "location"}},
      {"wea_qua_loc", {"weather", "quantity", "location"}},
      {"scene", {"weather", "time"}}};
  std::vector<std::string> keys;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const auto end = std::min(spec.find_first_of(",+ ", pos), spec.size());
    const auto tok = spec.substr(pos, end - pos);
    if (!tok.empty()) {
      if (auto it = aliases.find(tok); it != aliases.end()) {
        keys.insert(keys.end(), it->second.begin(), it->second.end());
      } else if (std::find(template_keys().begin(), template_keys().end(), tok) !=
                 template_keys().end()) {
        keys.emplace_back(tok);
      } else {
        throw std::invalid_argument("unknown template key '" + std::string(tok) + "'");
      }
    }
    pos = end + 1;
  }
  if (keys.empty()) throw std::invalid_argument("empty annotation template");
  return keys;
}

Annotation annotate_scene(const std::vector<Box3D>& boxes, const SceneMeta& meta,
                          const AnnotationRules& rules, const std::vector<std::string>& keys) {
  Annotation a;
  for (const auto& key : keys) {
    std::string part;
    if (key == "quantity") {
      part = quantity_clause(boxes, rules);
    } else if (key == "location") {
      part = location_clause(boxes, rules);
    } else if (key == "orientation") {
      part = orientation_clause(boxes, rules);
    } else if (key == "layout") {
      part = layout_clause(boxes, rules);
    } else if (key == "weather") {
      part = meta.weather == Weather::rainy ? "Rainy." : "Sunny.";
    } else if (key == "time") {
      part = meta.time == TimeOfDay::night ? "Night." : "Day.";
    } else {
      throw std::invalid_argument("unknown template key '" + key + "'");
    }
    a.parts[key] = part;
    if (part.empty()) continue;
    if (!a.prompt.empty()) a.prompt += ' ';
    a.prompt += part;
  }
  return a;
}

std::string annotate_scene(const std::vector<Box3D>& boxes, const SceneMeta& meta,
                           const AnnotationRules& rules, std::string_view template_spec) {
  return annotate_scene(boxes, meta, rules, parse_template(template_spec)).prompt;
}

nlohmann::json to_json(const Box3D& b) {
  return {{"center", {b.cx, b.cy, b.cz}},
          {"size", {b.length, b.width, b.height}},
          {"yaw", b.yaw},
          {"class", b.cls}};
}

Box3D box_from_json(const nlohmann::json& j) {
  const auto& c = j.at("center");
  const auto& s = j.at("size");
  return Box3D(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>(),
               s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>(),
               j.value("yaw", 0.0), j.at("class").get<std::string>());
}

SceneAnnotationInput scene_from_json(const nlohmann::json& j) {
  SceneAnnotationInput s;
  s.id = j.value("id", std::string{});
  for (const auto& b : j.at("boxes")) s.boxes.push_back(box_from_json(b));
  s.meta.weather = parse_weather(j.value("weather", std::string("sunny")));
  s.meta.time = parse_time(j.value("time", std::string("day")));
  return s;
}

nlohmann::json scene_to_json(const SceneAnnotationInput& s) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : s.boxes) boxes.push_back(to_json(b));
  return {{"id", s.id},
          {"boxes", boxes},
          {"weather", std::string(to_string(s.meta.weather))},
          {"time", std::string(to_string(s.meta.time))}};
}

nlohmann::json annotation_to_json(const std::string& id, const Annotation& a) {
  return {{"id", id}, {"prompt", a.prompt}, {"parts", a.parts}};
}

std::vector<SceneAnnotationInput> read_scenes_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<SceneAnnotationInput> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(scene_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace t2ldm::annotate
