#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellflow/raster.hpp"

namespace cellflow {

// ---------------------------------------------------------------------------------------------
// Detection (centroid matching)

struct Detection {
  Point position;
  int cls = 0;
};

struct MatchPair {
  std::size_t gt = 0;    // index into the ground-truth span
  std::size_t pred = 0;  // index into the prediction span
  double score = 0.0;    // centroid distance for detections, IoU for segments
};

struct MatchSets {
  std::vector<MatchPair> tp;
  std::vector<std::size_t> fp;
  std::vector<std::size_t> fn;
};

inline constexpr double kDetectionRadius = 15.0;

/// Per-class optimal matching: among same-class pairs within `radius` (inclusive), pick a
/// maximum-cardinality matching of minimum total distance.
std::map<int, MatchSets> match_detections(std::span<const Detection> preds, std::span<const Detection> gts,
                                          double radius = kDetectionRadius);

/// Rectangular assignment (Hungarian). `cost` is rows x cols row-major; returns the column for
/// each row, or -1 for rows left unassigned when rows > cols.
std::vector<int> solve_assignment(std::span<const double> cost, std::size_t rows, std::size_t cols);

struct DetectionScore {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

DetectionScore detection_score(std::size_t tp, std::size_t fp, std::size_t fn);

struct DetectionReport {
  std::map<int, DetectionScore> per_class;
  double m_precision = 0.0, m_recall = 0.0, m_f1 = 0.0;
};

/// Class-averaged scores; classes with TP = FP = FN = 0 are left out of the means.
DetectionReport detection_scores(const std::map<int, MatchSets>& matches);

/// Merges per-image matches into per-class counts (the pooled form used for suite reports).
DetectionReport detection_scores(const std::vector<std::map<int, MatchSets>>& per_image);

// ---------------------------------------------------------------------------------------------
// Panoptic quality

struct IouPair {
  std::uint32_t gt = 0;
  std::uint32_t pred = 0;
  double iou = 0.0;
};

struct PQCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;

  double dq() const noexcept;
  double sq() const noexcept;
  double pq() const noexcept { return dq() * sq(); }
  bool empty() const noexcept { return tp + fp + fn == 0; }
  PQCounts& operator+=(const PQCounts& o) noexcept;
};

struct PQResult {
  PQCounts counts;
  double dq = 0.0, sq = 0.0, pq = 0.0;
  std::vector<IouPair> pairs;  // matched (IoU > 0.5), sorted by gt id
};

/// Instance matching at IoU > 0.5 between two label rasters. Empty-vs-empty scores 1.
PQResult pq(const LabelRaster& pred, const LabelRaster& gt);

/// All overlapping (gt, pred) pairs with their IoU, sorted by (gt, pred).
std::vector<IouPair> overlap_pairs(const LabelRaster& pred, const LabelRaster& gt);

struct SuiteImage {
  LabelRaster pred;
  std::map<std::uint32_t, int> pred_classes;  // instance id -> class
  LabelRaster gt;
  std::map<std::uint32_t, int> gt_classes;
};

struct ClassPQ {
  PQCounts pooled;
  double dq = 0.0, sq = 0.0, pq = 0.0;
};

struct PQReport {
  std::map<int, ClassPQ> per_class;  // pooled over images
  PQCounts binary_pooled;
  double binary_dq = 0.0, binary_sq = 0.0;  // image means
  double mpq = 0.0;
  double mpq_plus = 0.0;
  double bpq = 0.0;
  double dice = 0.0;
  std::size_t images = 0;
};

PQReport mpq_suite(std::span<const SuiteImage> images, std::span<const int> classes);

/// Label raster restricted to the instances of one class.
LabelRaster filter_class(const LabelRaster& labels, const std::map<std::uint32_t, int>& classes, int cls);

nlohmann::json to_json(const PQReport& report);
nlohmann::json to_json(const DetectionReport& report);

/// One row per (class, metric): "scope,class,metric,value".
std::string to_csv(const PQReport& pq_report, const DetectionReport& detection);

// ---------------------------------------------------------------------------------------------
// Carbon footprint

inline constexpr double kCarbonIntensity = 0.432;  // kg CO2 eq. per kWh

double co2_kg(double energy_wh, double carbon_intensity = kCarbonIntensity);

}  // namespace cellflow
