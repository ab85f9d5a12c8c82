#include "t2ldm/synthscene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace t2ldm::synthscene {

int label_for_class(const std::string& cls) {
  if (cls == "ground") return kLabelGround;
  if (cls == "wall") return kLabelWall;
  if (cls == "car") return kLabelCar;
  if (cls == "pedestrian") return kLabelPedestrian;
  if (cls == "barrier") return kLabelBarrier;
  if (cls == "truck") return kLabelTruck;
  throw std::invalid_argument("unknown object class '" + cls + "'");
}

double IntensityModel::base(const std::string& cls) const {
  if (cls == "ground") return ground;
  if (cls == "wall") return wall;
  if (cls == "car") return car;
  if (cls == "pedestrian") return pedestrian;
  if (cls == "barrier") return barrier;
  if (cls == "truck") return truck;
  return 0.5;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kEps = 1e-9;

// Smallest t > eps in [t0, t1] or inf.
double first_positive(double t0, double t1) {
  if (t0 > kEps) return t0;
  if (t1 > kEps) return t1;
  return kInf;
}

double intersect(const Vec3& o, const Vec3& d, const Primitive& p) {
  switch (p.kind) {
    case PrimitiveKind::ground: {
      if (std::abs(d[2]) < kEps) return kInf;
      const double t = (p.center[2] - o[2]) / d[2];
      return t > kEps ? t : kInf;
    }
    case PrimitiveKind::wall: {
      if (std::abs(d[1]) < kEps) return kInf;
      const double t = (p.center[1] - o[1]) / d[1];
      if (t <= kEps) return kInf;
      const double z = o[2] + t * d[2];
      return (z >= p.center[2] && z <= p.size[2]) ? t : kInf;
    }
    case PrimitiveKind::cuboid: {
      const double c = std::cos(-p.yaw), s = std::sin(-p.yaw);
      const double ox = o[0] - p.center[0], oy = o[1] - p.center[1];
      const Vec3 lo{c * ox - s * oy, s * ox + c * oy, o[2] - p.center[2]};
      const Vec3 ld{c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]};
      double tmin = -kInf, tmax = kInf;
      for (int a = 0; a < 3; ++a) {
        const double half = 0.5 * p.size[a];
        if (std::abs(ld[a]) < kEps) {
          if (lo[a] < -half || lo[a] > half) return kInf;
          continue;
        }
        double t0 = (-half - lo[a]) / ld[a];
        double t1 = (half - lo[a]) / ld[a];
        if (t0 > t1) std::swap(t0, t1);
        tmin = std::max(tmin, t0);
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return kInf;
      }
      return first_positive(tmin, tmax);
    }
    case PrimitiveKind::cylinder: {
      const double r = p.size[0];
      const double z0 = p.center[2] - 0.5 * p.size[2];
      const double z1 = p.center[2] + 0.5 * p.size[2];
      double best = kInf;
      const double ox = o[0] - p.center[0], oy = o[1] - p.center[1];
      const double a = d[0] * d[0] + d[1] * d[1];
      if (a > kEps) {
        const double b = 2.0 * (ox * d[0] + oy * d[1]);
        const double cc = ox * ox + oy * oy - r * r;
        const double disc = b * b - 4 * a * cc;
        if (disc >= 0) {
          const double sq = std::sqrt(disc);
          for (double t : {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}) {
            if (t <= kEps) continue;
            const double z = o[2] + t * d[2];
            if (z >= z0 && z <= z1) best = std::min(best, t);
          }
        }
      }
      if (std::abs(d[2]) > kEps) {
        for (double zc : {z0, z1}) {
          const double t = (zc - o[2]) / d[2];
          if (t <= kEps) continue;
          const double x = ox + t * d[0], y = oy + t * d[1];
          if (x * x + y * y <= r * r) best = std::min(best, t);
        }
      }
      return best;
    }
  }
  return kInf;
}

}  // namespace

std::optional<Hit> raycast(const Vec3& origin, const Vec3& direction, const Geometry& geometry,
                           double max_depth) {
  const double n = std::sqrt(direction[0] * direction[0] + direction[1] * direction[1] +
                             direction[2] * direction[2]);
  if (!(std::abs(n - 1.0) <= 1e-9)) {
    throw std::invalid_argument("raycast: direction must be a unit vector");
  }
  Hit best{kInf, -1};
  for (std::size_t i = 0; i < geometry.primitives.size(); ++i) {
    const double t = intersect(origin, direction, geometry.primitives[i]);
    if (t < best.depth) best = {t, static_cast<int>(i)};
  }
  if (best.surface < 0 || best.depth > max_depth) return std::nullopt;
  return best;
}

double surface_distance(const Vec3& q, const Primitive& p) {
  switch (p.kind) {
    case PrimitiveKind::ground: return std::abs(q[2] - p.center[2]);
    case PrimitiveKind::wall: return std::abs(q[1] - p.center[1]);
    case PrimitiveKind::cuboid: {
      const double c = std::cos(-p.yaw), s = std::sin(-p.yaw);
      const double ox = q[0] - p.center[0], oy = q[1] - p.center[1];
      const Vec3 l{c * ox - s * oy, s * ox + c * oy, q[2] - p.center[2]};
      // Signed distance to the box, absolute value gives the surface distance.
      double outside = 0, inside = -kInf;
      for (int a = 0; a < 3; ++a) {
        const double e = std::abs(l[a]) - 0.5 * p.size[a];
        outside += std::max(e, 0.0) * std::max(e, 0.0);
        inside = std::max(inside, e);
      }
      return outside > 0 ? std::sqrt(outside) : std::abs(inside);
    }
    case PrimitiveKind::cylinder: {
      const double dx = q[0] - p.center[0], dy = q[1] - p.center[1];
      const double radial = std::sqrt(dx * dx + dy * dy) - p.size[0];
      const double vertical = std::abs(q[2] - p.center[2]) - 0.5 * p.size[2];
      if (radial > 0 || vertical > 0) {
        return std::hypot(std::max(radial, 0.0), std::max(vertical, 0.0));
      }
      return std::abs(std::max(radial, vertical));
    }
  }
  return kInf;
}

namespace {

Primitive primitive_for(const ObjectPlacement& o, double ground_z) {
  Primitive p;
  p.cls = o.cls;
  p.yaw = o.yaw;
  if (o.cls == "pedestrian") {
    p.kind = PrimitiveKind::cylinder;
    p.size = {0.5 * o.size[0], 0.5 * o.size[0], o.size[2]};
  } else {
    p.kind = PrimitiveKind::cuboid;
    p.size = o.size;
  }
  p.center = {o.x, o.y, ground_z + 0.5 * o.size[2]};
  return p;
}

double footprint_radius(const ObjectPlacement& o) {
  return 0.5 * std::hypot(o.size[0], o.size[1]);
}

Vec3 random_size(const std::string& cls, std::mt19937_64& rng) {
  auto u = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  if (cls == "car") return {u(3.8, 5.0), u(1.6, 2.0), u(1.4, 1.7)};
  if (cls == "truck") return {u(6.0, 9.0), u(2.3, 2.6), u(2.8, 3.5)};
  if (cls == "barrier") return {u(1.5, 2.5), u(0.3, 0.5), u(0.8, 1.1)};
  const double d = 2.0 * u(0.25, 0.35);
  return {d, d, u(1.6, 1.9)};
}

double random_yaw(const std::string& cls, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (cls == "car" || cls == "truck") {
    if (unit(rng) < 0.7) {
      const double base = unit(rng) < 0.5 ? 0.0 : std::numbers::pi;
      return annotate::normalize_yaw(base + 0.2 * (unit(rng) - 0.5));
    }
  }
  return annotate::normalize_yaw(2.0 * std::numbers::pi * unit(rng) - std::numbers::pi);
}

}  // namespace

Geometry build_geometry(const SceneSpec& spec, std::vector<annotate::Box3D>* boxes) {
  spec.sensor.validate();
  const double ground_z = -spec.sensor_height;
  Geometry g;
  g.primitives.push_back({PrimitiveKind::ground, "ground", {0, 0, ground_z}, {0, 0, 0}, 0});
  if (spec.walls) {
    const double top = ground_z + spec.wall_height;
    g.primitives.push_back(
        {PrimitiveKind::wall, "wall", {0, 0.5 * spec.street_width, ground_z}, {0, 0, top}, 0});
    g.primitives.push_back(
        {PrimitiveKind::wall, "wall", {0, -0.5 * spec.street_width, ground_z}, {0, 0, top}, 0});
  }

  std::vector<ObjectPlacement> placed = spec.objects;
  std::mt19937_64 rng(spec.seed ^ 0x5ce7e5eedULL);
  const double max_range = std::min(spec.max_range, 0.75 * spec.sensor.depth_max);
  auto try_place = [&](const std::string& cls) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      ObjectPlacement o;
      o.cls = cls;
      o.size = random_size(cls, rng);
      o.yaw = random_yaw(cls, rng);
      const double half_w = 0.5 * spec.street_width - footprint_radius(o) - 1.2;
      if (half_w <= 0) return;
      o.x = std::uniform_real_distribution<double>(-max_range, max_range)(rng);
      o.y = std::uniform_real_distribution<double>(-half_w, half_w)(rng);
      const double dist = std::hypot(o.x, o.y);
      if (dist < spec.min_range + footprint_radius(o) || dist > max_range) continue;
      const bool overlaps = std::any_of(placed.begin(), placed.end(), [&](const auto& q) {
        return std::hypot(q.x - o.x, q.y - o.y) < footprint_radius(q) + footprint_radius(o) + 1.2;
      });
      if (overlaps) continue;
      placed.push_back(o);
      return;
    }
  };
  for (int i = 0; i < spec.random_cars; ++i) try_place("car");
  for (int i = 0; i < spec.random_trucks; ++i) try_place("truck");
  for (int i = 0; i < spec.random_pedestrians; ++i) try_place("pedestrian");
  for (int i = 0; i < spec.random_barriers; ++i) try_place("barrier");

  for (const auto& o : placed) {
    const Primitive p = primitive_for(o, ground_z);
    g.primitives.push_back(p);
    if (boxes) {
      boxes->emplace_back(o.x, o.y, p.center[2], o.size[0], o.size[1], o.size[2], o.yaw, o.cls);
    }
  }
  return g;
}

SceneRecord generate_scene(const SceneSpec& spec) {
  SceneRecord rec;
  rec.meta = spec.meta;
  rec.geometry = build_geometry(spec, &rec.boxes);
  rec.annotation = annotate::annotate_scene(rec.boxes, rec.meta, annotate::AnnotationRules{},
                                            annotate::parse_template(spec.prompt_template));
  rec.prompt = rec.annotation.prompt;

  const auto& cfg = spec.sensor;
  const auto& im = spec.intensity;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const bool rainy = spec.meta.weather == annotate::Weather::rainy;
  const bool night = spec.meta.time == annotate::TimeOfDay::night;

  for (int h = 0; h < cfg.height; ++h) {
    const double phi = rangemap::row_elevation(h, cfg);
    for (int w = 0; w < cfg.width; ++w) {
      const double psi = rangemap::column_azimuth(w, cfg);
      Vec3 dir{std::cos(phi) * std::cos(psi), std::cos(phi) * std::sin(psi), std::sin(phi)};
      const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      for (auto& c : dir) c /= n;
      const auto hit = raycast({0, 0, 0}, dir, rec.geometry, cfg.depth_max);
      // Noise draws happen for every beam so the stream does not depend on hits.
      const double inten_noise = (2.0 * unit(rng) - 1.0) * im.noise;
      const double drop_draw = unit(rng);
      const double jitter = normal(rng) * im.rain_depth_sigma;
      if (!hit || hit->depth < cfg.depth_min) continue;
      double depth = hit->depth;
      if (rainy) {
        if (drop_draw < im.rain_dropout) continue;
        depth = std::clamp(depth + jitter, cfg.depth_min, cfg.depth_max);
      }
      const Primitive& prim = rec.geometry.primitives[static_cast<std::size_t>(hit->surface)];
      double inten = std::clamp(im.base(prim.cls) + inten_noise, 0.0, 1.0);
      if (night) inten *= im.night_scale;
      rec.cloud.points.push_back({static_cast<float>(depth * dir[0]),
                                  static_cast<float>(depth * dir[1]),
                                  static_cast<float>(depth * dir[2]), static_cast<float>(inten)});
      rec.cloud.labels.push_back(label_for_class(prim.cls));
      rec.surfaces.push_back(hit->surface);
    }
  }
  return rec;
}

SceneSpec random_scene_spec(const SceneSpec& base, std::uint64_t seed) {
  SceneSpec s = base;
  s.seed = seed;
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 17);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  s.random_cars = pick(0, 7);
  s.random_pedestrians = pick(0, 2);
  s.random_barriers = pick(0, 2);
  s.random_trucks = pick(0, 1);
  s.meta.weather = pick(0, 3) == 0 ? annotate::Weather::rainy : annotate::Weather::sunny;
  s.meta.time = pick(0, 3) == 0 ? annotate::TimeOfDay::night : annotate::TimeOfDay::day;
  return s;
}

nlohmann::json sidecar_json(const SceneRecord& rec) {
  annotate::SceneAnnotationInput in{rec.id, rec.boxes, rec.meta};
  auto j = annotate::scene_to_json(in);
  j["prompt"] = rec.prompt;
  j["parts"] = rec.annotation.parts;
  j["points"] = rec.cloud.size();
  return j;
}

void write_scene(const std::filesystem::path& dir, const std::string& stem,
                 const SceneRecord& rec) {
  std::filesystem::create_directories(dir);
  rangemap::write_point_cloud(dir / (stem + ".bin"), rec.cloud);
  {
    std::ofstream os(dir / (stem + ".label"), std::ios::binary);
    for (int l : rec.cloud.labels) {
      const auto v = static_cast<std::uint32_t>(l);
      os.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
  std::ofstream os(dir / (stem + ".jsonl"));
  if (!os) throw std::runtime_error("cannot write sidecar for " + stem);
  os << sidecar_json(rec).dump() << '\n';
}

}  // namespace t2ldm::synthscene
