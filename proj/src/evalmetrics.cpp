#include "t2ldm/evalmetrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>
#include <stdexcept>

namespace t2ldm::evalmetrics {

BEVHistogram bev_histogram(const rangemap::PointCloud& cloud, int grid, double radius) {
  if (grid < 2) throw std::invalid_argument("bev_histogram: grid must be >= 2");
  if (!(radius > 0)) throw std::invalid_argument("bev_histogram: radius must be > 0");
  BEVHistogram h;
  h.grid = grid;
  h.radius = radius;
  h.mass.assign(static_cast<std::size_t>(grid) * grid, 0.0);
  const double cell = 2.0 * radius / grid;
  for (const auto& p : cloud.points) {
    const double x = p.x, y = p.y;
    if (!(std::abs(x) <= radius) || !(std::abs(y) <= radius)) continue;
    const int ix = std::min(grid - 1, static_cast<int>(std::floor((x + radius) / cell)));
    const int iy = std::min(grid - 1, static_cast<int>(std::floor((y + radius) / cell)));
    h.mass[static_cast<std::size_t>(ix) * grid + iy] += 1.0;
    ++h.counted;
  }
  if (h.counted > 0) {
    const double inv = 1.0 / static_cast<double>(h.counted);
    for (auto& m : h.mass) m *= inv;
  }
  return h;
}

double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("jsd: shape mismatch");
  double kp = 0, kq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) kp += p[i] * std::log2(p[i] / m);
    if (q[i] > 0) kq += q[i] * std::log2(q[i] / m);
  }
  return std::clamp(0.5 * kp + 0.5 * kq, 0.0, 1.0);
}

double jsd(const BEVHistogram& p, const BEVHistogram& q) {
  if (p.grid != q.grid || p.mass.size() != q.mass.size()) {
    throw std::invalid_argument("jsd: histogram shape mismatch");
  }
  // An empty table has no mass to compare; treat it as disjoint from any nonempty one.
  if (p.empty() || q.empty()) return p.empty() && q.empty() ? 0.0 : 1.0;
  return jsd(p.mass, q.mass);
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void check_same_shape(const std::vector<BEVHistogram>& a, const std::vector<BEVHistogram>& b) {
  const std::size_t n = a.front().mass.size();
  for (const auto* list : {&a, &b}) {
    for (const auto& h : *list) {
      if (h.mass.size() != n) throw std::invalid_argument("mmd: histogram shape mismatch");
    }
  }
}

}  // namespace

double median_bandwidth(const std::vector<BEVHistogram>& a, const std::vector<BEVHistogram>& b) {
  std::vector<const BEVHistogram*> all;
  for (const auto& h : a) all.push_back(&h);
  for (const auto& h : b) all.push_back(&h);
  std::vector<double> d;
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      d.push_back(std::sqrt(sq_dist(all[i]->mass, all[j]->mass)));
    }
  }
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  return med > 0 ? med : 1.0;
}

double mmd(const std::vector<BEVHistogram>& a, const std::vector<BEVHistogram>& b,
           double bandwidth) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mmd: lists must be nonempty");
  check_same_shape(a, b);
  const double bw = bandwidth > 0 ? bandwidth : median_bandwidth(a, b);
  const double denom = 2.0 * bw * bw;
  auto mean_kernel = [&](const std::vector<BEVHistogram>& x, const std::vector<BEVHistogram>& y) {
    double s = 0;
    for (const auto& hx : x) {
      for (const auto& hy : y) s += std::exp(-sq_dist(hx.mass, hy.mass) / denom);
    }
    return s / (static_cast<double>(x.size()) * static_cast<double>(y.size()));
  };
  const double v = mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b);
  return std::max(0.0, v);
}

// ---------------------------------------------------------------------------
// Nearest neighbours

namespace {

double d2(const Vec3f& a, const Vec3f& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

double coord(const Vec3f& p, int axis) { return axis == 0 ? p.x : (axis == 1 ? p.y : p.z); }

class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3f>& pts) : pts_(pts), idx_(pts.size()) {
    std::iota(idx_.begin(), idx_.end(), 0);
    nodes_.reserve(pts.size());
    root_ = build(0, idx_.size(), 0);
  }

  double nearest_sq(const Vec3f& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(root_, q, best);
    return best;
  }

 private:
  struct Node {
    std::size_t point;
    int axis;
    int left = -1, right = -1;
  };

  int build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                     [&](std::size_t a, std::size_t b) {
                       return coord(pts_[a], axis) < coord(pts_[b], axis);
                     });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({idx_[mid], axis});
    const int l = build(lo, mid, depth + 1);
    const int r = build(mid + 1, hi, depth + 1);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search(int id, const Vec3f& q, double& best) const {
    if (id < 0) return;
    const Node& n = nodes_[id];
    const Vec3f& p = pts_[n.point];
    best = std::min(best, d2(p, q));
    const double diff = coord(q, n.axis) - coord(p, n.axis);
    const int near = diff < 0 ? n.left : n.right;
    const int far = diff < 0 ? n.right : n.left;
    search(near, q, best);
    if (diff * diff < best) search(far, q, best);
  }

  const std::vector<Vec3f>& pts_;
  std::vector<std::size_t> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

double mean_nearest_sq(const std::vector<Vec3f>& from, const std::vector<Vec3f>& to) {
  const KdTree tree(to);
  double s = 0;
  for (const auto& p : from) s += tree.nearest_sq(p);
  return s / static_cast<double>(from.size());
}

std::vector<Vec3f> strided(const std::vector<Vec3f>& pts, std::size_t n) {
  if (pts.size() == n) return pts;
  std::vector<Vec3f> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(pts[i * pts.size() / n]);
  return out;
}

constexpr std::size_t kExactAssignmentLimit = 256;

}  // namespace

double emd_exact(const std::vector<Vec3f>& a, const std::vector<Vec3f>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("emd_exact: equal nonempty sizes required");
  }
  // Shortest augmenting path Hungarian method with potentials, 1-based.
  const std::size_t n = a.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = std::sqrt(d2(a[i0 - 1], b[j - 1])) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0;
  for (std::size_t j = 1; j <= n; ++j) total += std::sqrt(d2(a[p[j] - 1], b[j - 1]));
  return total / static_cast<double>(n);
}

double emd_auction(const std::vector<Vec3f>& a, const std::vector<Vec3f>& b, double final_eps) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("emd_auction: equal nonempty sizes required");
  }
  const std::size_t n = a.size();
  std::vector<double> cost(n * n);
  double cmax = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      cost[i * n + j] = std::sqrt(d2(a[i], b[j]));
      cmax = std::max(cmax, cost[i * n + j]);
    }
  }
  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::vector<double> price(n, 0.0);
  std::vector<std::size_t> owner(n, none), assigned(n, none);
  double eps = std::max(cmax / 4.0, final_eps);
  while (true) {
    std::fill(owner.begin(), owner.end(), none);
    std::fill(assigned.begin(), assigned.end(), none);
    std::queue<std::size_t> unassigned;
    for (std::size_t i = 0; i < n; ++i) unassigned.push(i);
    while (!unassigned.empty()) {
      const std::size_t i = unassigned.front();
      unassigned.pop();
      // Bidder i maximizes -cost - price.
      double best = -std::numeric_limits<double>::infinity();
      double second = best;
      std::size_t bj = 0;
      const double* row = &cost[i * n];
      for (std::size_t j = 0; j < n; ++j) {
        const double val = -row[j] - price[j];
        if (val > best) {
          second = best;
          best = val;
          bj = j;
        } else if (val > second) {
          second = val;
        }
      }
      if (n == 1) second = best;
      price[bj] += best - second + eps;
      if (owner[bj] != none) {
        assigned[owner[bj]] = none;
        unassigned.push(owner[bj]);
      }
      owner[bj] = i;
      assigned[i] = bj;
    }
    if (eps <= final_eps) break;
    eps = std::max(eps / 5.0, final_eps);
  }
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assigned[i]];
  return total / static_cast<double>(n);
}

UpsampleScores upsample_scores(const std::vector<Vec3f>& pred, const std::vector<Vec3f>& gt,
                               std::size_t max_emd_points) {
  if (pred.empty() || gt.empty()) {
    throw std::invalid_argument("upsample_metrics: clouds must be nonempty");
  }
  UpsampleScores s;
  const double pg = mean_nearest_sq(pred, gt);
  const double gp = mean_nearest_sq(gt, pred);
  s.cd = pg + gp;
  s.mse = pg;
  const std::size_t n = std::min({pred.size(), gt.size(), std::max<std::size_t>(1, max_emd_points)});
  const auto a = strided(pred, n);
  const auto b = strided(gt, n);
  s.emd = n <= kExactAssignmentLimit ? emd_exact(a, b) : emd_auction(a, b);
  return s;
}

UpsampleScores upsample_metrics(const rangemap::PointCloud& pred, const rangemap::PointCloud& gt,
                                std::size_t max_emd_points) {
  if (pred.empty() || gt.empty()) {
    throw std::invalid_argument("upsample_metrics: clouds must be nonempty");
  }
  std::array<double, 3> lo{std::numeric_limits<double>::infinity(),
                           std::numeric_limits<double>::infinity(),
                           std::numeric_limits<double>::infinity()};
  std::array<double, 3> hi{-lo[0], -lo[1], -lo[2]};
  for (const auto* c : {&pred, &gt}) {
    for (const auto& p : c->points) {
      const double v[3] = {p.x, p.y, p.z};
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(lo[k], v[k]);
        hi[k] = std::max(hi[k], v[k]);
      }
    }
  }
  // One scale for all axes so distances keep their shape.
  double span = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  if (!(span > 0)) span = 1.0;
  auto convert = [&](const rangemap::PointCloud& c) {
    std::vector<Vec3f> out;
    out.reserve(c.size());
    for (const auto& p : c.points) {
      out.push_back({(p.x - lo[0]) / span, (p.y - lo[1]) / span, (p.z - lo[2]) / span});
    }
    return out;
  };
  return upsample_scores(convert(pred), convert(gt), max_emd_points);
}

// ---------------------------------------------------------------------------
// Detector

namespace {

bool solve3(std::array<std::array<double, 4>, 3> m, std::array<double, 3>& x) {
  for (int c = 0; c < 3; ++c) {
    int piv = c;
    for (int r = c + 1; r < 3; ++r) {
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    }
    if (std::abs(m[piv][c]) < 1e-12) return false;
    std::swap(m[c], m[piv]);
    for (int r = 0; r < 3; ++r) {
      if (r == c) continue;
      const double f = m[r][c] / m[c][c];
      for (int k = c; k < 4; ++k) m[r][k] -= f * m[c][k];
    }
  }
  for (int c = 0; c < 3; ++c) x[c] = m[c][3] / m[c][c];
  return true;
}

}  // namespace

GroundPlane fit_ground(const rangemap::PointCloud& cloud, const DetectorOptions& opt) {
  GroundPlane g;
  if (cloud.empty()) return g;
  // Seed with a flat plane at a low height percentile, then refit on the inlier band.
  std::vector<float> z;
  z.reserve(cloud.size());
  for (const auto& p : cloud.points) z.push_back(p.z);
  const auto k = z.size() / 10;
  std::nth_element(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(k), z.end());
  g.c = z[k];
  for (int iter = 0; iter < 5; ++iter) {
    std::array<std::array<double, 4>, 3> m{};
    std::size_t used = 0;
    for (const auto& p : cloud.points) {
      if (std::abs(p.z - g.height_at(p.x, p.y)) > opt.ground_band) continue;
      const double r[3] = {p.x, p.y, 1.0};
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) m[i][j] += r[i] * r[j];
        m[i][3] += r[i] * p.z;
      }
      ++used;
    }
    if (used < 3) break;
    std::array<double, 3> x{};
    if (!solve3(m, x)) break;
    g = {x[0], x[1], x[2]};
  }
  return g;
}

std::vector<Detection> detect_objects(const rangemap::PointCloud& cloud,
                                      const DetectorOptions& opt) {
  std::vector<Detection> out;
  if (cloud.empty()) return out;
  const GroundPlane g = fit_ground(cloud, opt);

  struct Cell {
    std::int64_t ix, iy;
    bool operator<(const Cell& o) const { return ix != o.ix ? ix < o.ix : iy < o.iy; }
  };
  std::vector<std::size_t> kept;
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) continue;
    if (p.z - g.height_at(p.x, p.y) <= opt.ground_band) continue;
    kept.push_back(i);
    cells.push_back({static_cast<std::int64_t>(std::floor(p.x / opt.cell)),
                     static_cast<std::int64_t>(std::floor(p.y / opt.cell))});
  }
  if (kept.empty()) return out;

  // Occupied cells sorted, point lists per cell.
  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (cells[a] < cells[b]) return true;
    if (cells[b] < cells[a]) return false;
    return a < b;
  });
  std::vector<Cell> uniq;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t o : order) {
    if (uniq.empty() || uniq.back() < cells[o]) {
      uniq.push_back(cells[o]);
      members.emplace_back();
    }
    members.back().push_back(kept[o]);
  }
  auto find_cell = [&](const Cell& c) -> std::ptrdiff_t {
    auto it = std::lower_bound(uniq.begin(), uniq.end(), c);
    if (it == uniq.end() || c < *it) return -1;
    return it - uniq.begin();
  };

  std::vector<char> seen(uniq.size(), 0);
  for (std::size_t s = 0; s < uniq.size(); ++s) {
    if (seen[s]) continue;
    std::vector<std::size_t> comp;
    std::queue<std::size_t> q;
    q.push(s);
    seen[s] = 1;
    while (!q.empty()) {
      const std::size_t c = q.front();
      q.pop();
      comp.push_back(c);
      for (int dx = -1; dx <= 1; ++dx) {
        for (int dy = -1; dy <= 1; ++dy) {
          if (dx == 0 && dy == 0) continue;
          const auto n = find_cell({uniq[c].ix + dx, uniq[c].iy + dy});
          if (n >= 0 && !seen[static_cast<std::size_t>(n)]) {
            seen[static_cast<std::size_t>(n)] = 1;
            q.push(static_cast<std::size_t>(n));
          }
        }
      }
    }
    Detection d;
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    d.z_min = xmin;
    d.z_max = -xmin;
    for (std::size_t c : comp) {
      for (std::size_t i : members[c]) {
        const auto& p = cloud.points[i];
        xmin = std::min<double>(xmin, p.x);
        xmax = std::max<double>(xmax, p.x);
        ymin = std::min<double>(ymin, p.y);
        ymax = std::max<double>(ymax, p.y);
        d.z_min = std::min<double>(d.z_min, p.z);
        d.z_max = std::max<double>(d.z_max, p.z);
        ++d.points;
      }
    }
    d.x = 0.5 * (xmin + xmax);
    d.y = 0.5 * (ymin + ymax);
    // A single scan line can have zero extent along one axis; floor at the grid resolution
    // keeps extents strictly positive.
    const double ex = std::max(xmax - xmin, 1e-3);
    const double ey = std::max(ymax - ymin, 1e-3);
    d.length = std::max(ex, ey);
    d.width = std::min(ex, ey);
    if (d.length >= opt.car_min_length && d.length <= opt.car_max_length &&
        d.width >= opt.car_min_width && d.width <= opt.car_max_width &&
        d.points >= opt.car_min_points) {
      d.cls = "car";
    } else if (d.length <= opt.ped_max_extent && d.z_max - d.z_min >= opt.ped_min_height &&
               d.points >= opt.ped_min_points) {
      d.cls = "pedestrian";
    }
    out.push_back(d);
  }
  std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    if (a.x != b.x) return a.x < b.x;
    return a.y < b.y;
  });
  return out;
}

std::vector<Detection> detections_from_boxes(const std::vector<annotate::Box3D>& boxes) {
  std::vector<Detection> out;
  for (const auto& b : boxes) {
    Detection d;
    d.x = b.cx;
    d.y = b.cy;
    d.length = std::max(b.length, b.width);
    d.width = std::min(b.length, b.width);
    d.z_min = b.cz - 0.5 * b.height;
    d.z_max = b.cz + 0.5 * b.height;
    d.points = 1;
    d.cls = b.cls;
    d.yaw = b.yaw;
    out.push_back(d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// TBR

namespace {

std::string lower_trim(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> w;
  for (std::string t; is >> t;) w.push_back(t);
  return w;
}

int parse_number(const std::string& w) {
  for (int n = 0; n <= 20; ++n) {
    if (lower_trim(annotate::number_word(n)) == w) return n;
  }
  if (!w.empty() && std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::isdigit(c); })) {
    return std::stoi(w);
  }
  return -1;
}

bool is_target(const std::string& w, const std::string& target) {
  return w == target || w == target + "s";
}

template <class E, std::size_t N>
bool parse_enum(const std::string& w, const std::array<E, N>& all, E& out) {
  for (E e : all) {
    if (annotate::to_string(e) == w) {
      out = e;
      return true;
    }
  }
  return false;
}

}  // namespace

std::vector<Clause> parse_clauses(const std::string& prompt, const annotate::AnnotationRules& rules) {
  using annotate::Lateral;
  using annotate::Longitudinal;
  using annotate::Orientation;
  const std::string target = lower_trim(rules.target_class);
  std::vector<Clause> out;
  std::size_t pos = 0;
  while (pos < prompt.size()) {
    auto end = prompt.find('.', pos);
    if (end == std::string::npos) end = prompt.size();
    const auto w = words(lower_trim(prompt.substr(pos, end - pos)));
    pos = end + 1;
    if (w.empty()) continue;

    Clause c{};
    // "no car"
    if (w.size() == 2 && w[0] == "no" && is_target(w[1], target)) {
      c.kind = Clause::Kind::count_exact;
      c.count = 0;
      out.push_back(c);
      continue;
    }
    // "<n> cars"
    if (w.size() == 2 && is_target(w[1], target) && parse_number(w[0]) >= 0) {
      c.kind = Clause::Kind::count_exact;
      c.count = parse_number(w[0]);
      out.push_back(c);
      continue;
    }
    // "more|less than <n> cars"
    if (w.size() == 4 && (w[0] == "more" || w[0] == "less") && w[1] == "than" &&
        is_target(w[3], target) && parse_number(w[2]) >= 0) {
      c.kind = w[0] == "more" ? Clause::Kind::count_more : Clause::Kind::count_less;
      c.count = parse_number(w[2]);
      out.push_back(c);
      continue;
    }
    if (w.size() >= 4 && w[0] == "one" && w[1] == target && w[2] == "is") {
      // "one car is around one X"
      if (w.size() == 6 && w[3] == "around" && w[4] == "one") {
        c.kind = Clause::Kind::around;
        c.other_class = w[5];
        out.push_back(c);
        continue;
      }
      // "one car is facing B"
      Orientation o{};
      if (w.size() == 5 && w[3] == "facing" &&
          parse_enum(w[4], std::array{Orientation::forward, Orientation::left,
                                      Orientation::backward, Orientation::right},
                     o)) {
        c.kind = Clause::Kind::facing;
        c.orientation = o;
        out.push_back(c);
        continue;
      }
      // "one car is P1 to the P2 of one X"
      Longitudinal p1{};
      Lateral p2{};
      if (w.size() == 10 && w[4] == "to" && w[5] == "the" && w[7] == "of" && w[8] == "one" &&
          parse_enum(w[3], std::array{Longitudinal::ahead, Longitudinal::behind,
                                      Longitudinal::aligned},
                     p1) &&
          parse_enum(w[6], std::array{Lateral::left, Lateral::right, Lateral::center}, p2)) {
        c.kind = Clause::Kind::layout;
        c.p1 = p1;
        c.p2 = p2;
        c.other_class = w[9];
        out.push_back(c);
        continue;
      }
    }
    // Scene-level sentences (weather, time of day) are not object clauses.
  }
  return out;
}

bool clause_satisfied(const Clause& c, const std::vector<Detection>& dets,
                      const annotate::AnnotationRules& rules) {
  std::vector<const Detection*> cars;
  for (const auto& d : dets) {
    if (d.cls == rules.target_class) cars.push_back(&d);
  }
  const int n = static_cast<int>(cars.size());
  switch (c.kind) {
    case Clause::Kind::count_exact: return n == c.count;
    case Clause::Kind::count_more: return n > c.count;
    case Clause::Kind::count_less: return n < c.count;
    case Clause::Kind::around:
      return n > 0 && std::any_of(dets.begin(), dets.end(),
                                  [&](const Detection& d) { return d.cls == c.other_class; });
    case Clause::Kind::facing: {
      // Without yaw the clause cannot be judged and is skipped.
      if (std::any_of(cars.begin(), cars.end(), [](const Detection* d) { return !d->yaw; })) {
        return true;
      }
      return std::any_of(cars.begin(), cars.end(), [&](const Detection* d) {
        return annotate::orientation_bin(*d->yaw, rules) == c.orientation;
      });
    }
    case Clause::Kind::layout:
      for (const auto* car : cars) {
        for (const auto& o : dets) {
          if (o.cls != c.other_class) continue;
          annotate::Box3D a, b;
          a.cx = car->x;
          a.cy = car->y;
          b.cx = o.x;
          b.cy = o.y;
          const auto [p1, p2] = annotate::relation_text(a, b, rules);
          if (p1 == c.p1 && p2 == c.p2) return true;
        }
      }
      return false;
  }
  return false;
}

bool scene_matches(const std::string& prompt, const std::vector<Detection>& dets,
                   const annotate::AnnotationRules& rules) {
  for (const auto& c : parse_clauses(prompt, rules)) {
    if (!clause_satisfied(c, dets, rules)) return false;
  }
  return true;
}

double tbr(const std::vector<std::string>& prompts,
           const std::vector<std::vector<Detection>>& detections,
           const annotate::AnnotationRules& rules) {
  if (prompts.size() != detections.size()) {
    throw std::invalid_argument("tbr: prompts and detections differ in length");
  }
  if (prompts.empty()) return 0.0;
  std::size_t matched = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (scene_matches(prompts[i], detections[i], rules)) ++matched;
  }
  return 100.0 * static_cast<double>(matched) / static_cast<double>(prompts.size());
}

nlohmann::json EvalReport::to_json() const {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"jsd", jsd},
          {"mmd_e4", mmd_e4},
          {"cd_e5", opt(cd_e5)},
          {"mse_e5", opt(mse_e5)},
          {"emd_e3", opt(emd_e3)},
          {"tbr_pct", opt(tbr_pct)},
          {"n_generated", n_generated},
          {"n_reference", n_reference}};
}

}  // namespace t2ldm::evalmetrics
