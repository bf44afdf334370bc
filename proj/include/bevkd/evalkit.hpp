#pragma once

#include <cstdint>
#include <vector>

#include "bevkd/synthworld.hpp"

namespace bevkd::evalkit {

struct GtBox {
  world::BoxLabel box;
  std::int64_t scene_id = 0;
};

struct PredBox {
  world::BoxLabel box;
  double score = 0.0;
  std::int64_t scene_id = 0;
  std::int64_t det_id = 0;  // deterministic tie-break for equal scores
};

struct TpRecord {
  double trans_err = 0.0;   // center distance, meters
  double size_err = 0.0;    // 1 - (min/max w)(min/max l)
  double orient_err = 0.0;  // |yaw delta| wrapped to [0, pi]
  double score = 0.0;
  std::int64_t gt_index = -1;     // index into the gt list
  double gt_distance = 0.0;       // for distance bucketing
};

// Greedy score-ordered matching for one (class, threshold) pair.
struct ThresholdClassMatch {
  double threshold = 0.0;
  std::int32_t class_id = 0;
  std::int64_t gt_count = 0;
  // Per prediction of this class, sorted by (score desc, det_id asc).
  std::vector<double> scores;
  std::vector<char> tp_flags;
  std::vector<std::int64_t> matched_gt;   // -1 for FP
  std::vector<double> bucket_distance;    // matched-GT distance for TPs, own distance for FPs
  std::vector<TpRecord> tps;
};

struct MatchResult {
  std::vector<ThresholdClassMatch> entries;  // classes x thresholds
  std::vector<double> thresholds;
  std::int32_t num_classes = 0;
  std::int64_t total_gt = 0;
};

MatchResult match(const std::vector<PredBox>& preds, const std::vector<GtBox>& gts,
                  std::int32_t num_classes, const std::vector<double>& thresholds);

// Area under the precision-recall curve, 41-point interpolation.
double average_precision(const ThresholdClassMatch& entry);

struct TpErrors {
  double mate = 1.0;
  double mase = 1.0;
  double maoe = 1.0;
};
// Pooled mean over TPs at the given matching threshold; worst-case 1.0 when
// there are no TPs.
TpErrors tp_errors(const MatchResult& result, double tp_threshold);

// NDS* over the three desk-scale TP errors: (5*mAP + sum(1 - min(1,
// err/norm))) / 8 with norms ATE/4 m, ASE as-is, AOE/pi.
double composite_score(double map, const TpErrors& errors);

struct Metrics {
  double map = 0.0;
  double nds = 0.0;
  TpErrors errors;
  std::int64_t gt_count = 0;
  std::int64_t pred_count = 0;
};

Metrics evaluate(const std::vector<PredBox>& preds, const std::vector<GtBox>& gts,
                 std::int32_t num_classes, const std::vector<double>& thresholds,
                 double tp_threshold);

// Near/far split on GT center distance; matched predictions follow their GT,
// unmatched predictions bucket by their own distance.
struct BucketMetrics {
  Metrics near_bucket;
  Metrics far_bucket;
  double split = 0.0;
};
BucketMetrics bucket_by_distance(const std::vector<PredBox>& preds, const std::vector<GtBox>& gts,
                                 std::int32_t num_classes, const std::vector<double>& thresholds,
                                 double tp_threshold, double split);

}  // namespace bevkd::evalkit
