#pragma once

// Second, deliberately naive transcriptions of the annotation and TBR rules. They share no
// code with the library and are used by the unit tests and the acceptance runner.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "t2ldm/annotate.hpp"
#include "t2ldm/evalmetrics.hpp"

namespace oracle {

using t2ldm::annotate::Box3D;

// Whole microdegrees in [0, 360e6); exact edges given in degrees stay exact.
inline long long micro_degrees(double yaw_rad) {
  long long v = std::llround(yaw_rad * 180.0 / 3.14159265358979323846 * 1e6);
  v %= 360000000LL;
  if (v < 0) v += 360000000LL;
  return v;
}

inline std::string facing(double yaw_rad) {
  const long long d = micro_degrees(yaw_rad);
  if (d >= 45000000LL && d < 135000000LL) return "left";
  if (d >= 135000000LL && d < 225000000LL) return "backward";
  if (d >= 225000000LL && d < 315000000LL) return "right";
  return "forward";
}

inline std::string word(int n) {
  const char* w[] = {"No", "One", "Two", "Three", "Four", "Five"};
  return w[n];
}

inline int car_count(const std::vector<Box3D>& boxes) {
  int n = 0;
  for (const auto& b : boxes) n += b.cls == "car";
  return n;
}

inline std::string quantity(const std::vector<Box3D>& boxes) {
  const int n = car_count(boxes);
  if (n == 0) return "No car.";
  if (n == 1) return "One car.";
  if (n <= 5) return word(n) + " cars.";
  return "More than five cars.";
}

inline std::string location(const std::vector<Box3D>& boxes) {
  if (car_count(boxes) == 0) return "No car.";
  std::string out;
  const std::vector<std::string> order = {"pedestrian", "barrier", "truck"};
  for (const auto& cls : order) {
    bool present = false;
    for (const auto& b : boxes) present = present || b.cls == cls;
    if (!present) continue;
    if (!out.empty()) out += " ";
    out += "One car is around one " + cls + ".";
  }
  return out;
}

inline std::string orientation(const std::vector<Box3D>& boxes) {
  if (car_count(boxes) == 0) return "No car.";
  std::string out;
  for (const std::string bin : {"forward", "left", "backward", "right"}) {
    bool present = false;
    for (const auto& b : boxes) present = present || (b.cls == "car" && facing(b.yaw) == bin);
    if (!present) continue;
    if (!out.empty()) out += " ";
    out += "One car is facing " + bin + ".";
  }
  return out;
}

inline std::string relation(double dx, double dy) {
  const std::string p1 = dx > 2.0 ? "ahead" : dx < -2.0 ? "behind" : "aligned";
  const std::string p2 = dy > 2.0 ? "left" : dy < -2.0 ? "right" : "center";
  return p1 + " to the " + p2;
}

inline std::string layout(const std::vector<Box3D>& boxes) {
  const Box3D* car = nullptr;
  const Box3D* other = nullptr;
  for (const auto& b : boxes) {
    if (b.cls == "car" && !car) car = &b;
    if (b.cls != "car" && !other) other = &b;
  }
  if (!car) return "No car.";
  if (!other) return "";
  return "One car is " + relation(car->cx - other->cx, car->cy - other->cy) + " of one " +
         other->cls + ".";
}

inline std::string clause(const std::string& key, const std::vector<Box3D>& boxes,
                          const t2ldm::annotate::SceneMeta& meta) {
  if (key == "quantity") return quantity(boxes);
  if (key == "location") return location(boxes);
  if (key == "orientation") return orientation(boxes);
  if (key == "layout") return layout(boxes);
  if (key == "weather") return meta.weather == t2ldm::annotate::Weather::rainy ? "Rainy." : "Sunny.";
  return meta.time == t2ldm::annotate::TimeOfDay::night ? "Night." : "Day.";
}

// Random box set; coordinates on a 0.5 m lattice so relation edges at exactly 2.0 m occur.
inline std::vector<Box3D> random_boxes(std::mt19937_64& rng) {
  static const char* classes[] = {"car", "car", "pedestrian", "barrier", "truck"};
  std::uniform_int_distribution<int> count(0, 8), cls(0, 4), lattice(-40, 40), edge(0, 7);
  std::uniform_real_distribution<double> yaw(-3.2, 3.2);
  std::bernoulli_distribution pick_edge(0.3);
  std::vector<Box3D> out;
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    double y = yaw(rng);
    if (pick_edge(rng)) y = (45.0 + 90.0 * (edge(rng) % 4)) * 3.14159265358979323846 / 180.0;
    out.emplace_back(0.5 * lattice(rng), 0.5 * lattice(rng), 0.0, 4.0, 1.8, 1.5, y, classes[cls(rng)]);
  }
  return out;
}

// Whether detections (given as boxes) satisfy every object clause that `key` emits for the
// ground-truth boxes. Works on the boxes directly rather than on prompt text.
inline bool detections_satisfy(const std::string& key, const std::vector<Box3D>& truth,
                               const std::vector<Box3D>& det) {
  const int nt = car_count(truth), nd = car_count(det);
  auto has = [](const std::vector<Box3D>& v, const std::string& c) {
    for (const auto& b : v) {
      if (b.cls == c) return true;
    }
    return false;
  };
  if (key == "quantity") return nt > 5 ? nd > 5 : nd == nt;
  if (nt == 0) return key == "weather" || key == "time" || nd == 0;
  if (key == "location") {
    for (const auto& b : truth) {
      if (b.cls != "car" && !(nd > 0 && has(det, b.cls))) return false;
    }
    return true;
  }
  if (key == "orientation") {
    for (const auto& b : truth) {
      if (b.cls != "car") continue;
      bool found = false;
      for (const auto& d : det) found = found || (d.cls == "car" && facing(d.yaw) == facing(b.yaw));
      if (!found) return false;
    }
    return true;
  }
  if (key == "layout") {
    const std::string want = layout(truth);
    if (want.empty()) return true;
    for (const auto& c : det) {
      if (c.cls != "car") continue;
      for (const auto& o : det) {
        if (o.cls == "car") continue;
        if ("One car is " + relation(c.cx - o.cx, c.cy - o.cy) + " of one " + o.cls + "." == want) {
          return true;
        }
      }
    }
    return false;
  }
  return true;
}

}  // namespace oracle
