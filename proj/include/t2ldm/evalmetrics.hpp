#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "t2ldm/annotate.hpp"
#include "t2ldm/rangemap.hpp"

namespace t2ldm::evalmetrics {

/// Bird's-eye occupancy over [-R, R]^2, bins indexed [ix * G + iy], normalized to sum 1.
struct BEVHistogram {
  int grid = 0;
  double radius = 0;
  std::vector<double> mass;
  std::size_t counted = 0;
  bool empty() const { return counted == 0; }
};

BEVHistogram bev_histogram(const rangemap::PointCloud& cloud, int grid = 100,
                           double radius = 50.0);

/// Base-2 Jensen-Shannon divergence in [0, 1]. Throws on shape mismatch.
double jsd(const BEVHistogram& p, const BEVHistogram& q);
double jsd(const std::vector<double>& p, const std::vector<double>& q);

/// Median pairwise Euclidean distance across both lists; 1 when degenerate.
double median_bandwidth(const std::vector<BEVHistogram>& a, const std::vector<BEVHistogram>& b);

/// Biased squared-MMD estimate with a Gaussian kernel. bandwidth <= 0 selects the median heuristic.
double mmd(const std::vector<BEVHistogram>& a, const std::vector<BEVHistogram>& b,
           double bandwidth = 0.0);

struct UpsampleScores {
  double cd = 0;
  double mse = 0;
  double emd = 0;
};

struct Vec3f {
  double x = 0, y = 0, z = 0;
};

/// Scores on coordinates that are already normalized.
UpsampleScores upsample_scores(const std::vector<Vec3f>& pred, const std::vector<Vec3f>& gt,
                               std::size_t max_emd_points = 2048);

/// Joint isotropic min-max normalization into [0, 1]^3, then upsample_scores.
UpsampleScores upsample_metrics(const rangemap::PointCloud& pred, const rangemap::PointCloud& gt,
                                std::size_t max_emd_points = 2048);

/// Mean matched distance under an optimal one-to-one assignment (Hungarian, O(n^3)).
double emd_exact(const std::vector<Vec3f>& a, const std::vector<Vec3f>& b);
/// Auction assignment with epsilon scaling; within `final_eps` of the optimum per point.
double emd_auction(const std::vector<Vec3f>& a, const std::vector<Vec3f>& b,
                   double final_eps = 1e-5);

struct Detection {
  double x = 0, y = 0;
  double length = 0, width = 0;
  double z_min = 0, z_max = 0;
  int points = 0;
  std::string cls = "other";
  std::optional<double> yaw;
};

struct DetectorOptions {
  double ground_band = 0.3;
  double cell = 0.5;
  double car_min_length = 2.5, car_max_length = 6.0;
  double car_min_width = 1.2, car_max_width = 2.5;
  int car_min_points = 10;
  double ped_max_extent = 1.2;
  double ped_min_height = 1.0;
  int ped_min_points = 5;
};

struct GroundPlane {
  double a = 0, b = 0, c = 0;  // z = a x + b y + c
  double height_at(double x, double y) const { return a * x + b * y + c; }
};

GroundPlane fit_ground(const rangemap::PointCloud& cloud, const DetectorOptions& opt = {});

/// Ground removal, 8-connected grid clustering and footprint classification.
std::vector<Detection> detect_objects(const rangemap::PointCloud& cloud,
                                      const DetectorOptions& opt = {});

/// Ground-truth boxes as detections (carries yaw, for orientation clauses).
std::vector<Detection> detections_from_boxes(const std::vector<annotate::Box3D>& boxes);

/// Object-level clause parsed from a prompt sentence.
struct Clause {
  enum class Kind { count_exact, count_more, count_less, around, facing, layout } kind;
  int count = 0;
  std::string other_class;
  annotate::Orientation orientation = annotate::Orientation::forward;
  annotate::Longitudinal p1 = annotate::Longitudinal::aligned;
  annotate::Lateral p2 = annotate::Lateral::center;
};

/// Sentences that are not object-level (weather, time) are skipped.
std::vector<Clause> parse_clauses(const std::string& prompt,
                                  const annotate::AnnotationRules& rules = {});

bool clause_satisfied(const Clause& c, const std::vector<Detection>& dets,
                      const annotate::AnnotationRules& rules = {});

bool scene_matches(const std::string& prompt, const std::vector<Detection>& dets,
                   const annotate::AnnotationRules& rules = {});

/// Percentage of scenes whose every object-level clause is satisfied. Throws on length mismatch.
double tbr(const std::vector<std::string>& prompts,
           const std::vector<std::vector<Detection>>& detections,
           const annotate::AnnotationRules& rules = {});

struct EvalReport {
  double jsd = 0;
  double mmd_e4 = 0;
  std::optional<double> cd_e5, mse_e5, emd_e3;
  std::optional<double> tbr_pct;
  std::size_t n_generated = 0;
  std::size_t n_reference = 0;

  nlohmann::json to_json() const;
};

}  // namespace t2ldm::evalmetrics
