#include "bevkd/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bevkd/geometry.hpp"
#include "bevkd/util.hpp"

namespace bevkd::evalkit {

namespace {

double center_distance(const world::BoxLabel& a, const world::BoxLabel& b) {
  return std::hypot(static_cast<double>(a.x) - b.x, static_cast<double>(a.y) - b.y);
}

double size_error(const world::BoxLabel& pred, const world::BoxLabel& gt) {
  const double rw = std::min<double>(pred.w, gt.w) / std::max<double>(pred.w, gt.w);
  const double rl = std::min<double>(pred.l, gt.l) / std::max<double>(pred.l, gt.l);
  return 1.0 - rw * rl;
}

double orient_error(const world::BoxLabel& pred, const world::BoxLabel& gt) {
  return std::abs(wrap_angle(static_cast<double>(pred.yaw) - gt.yaw));
}

}  // namespace

MatchResult match(const std::vector<PredBox>& preds, const std::vector<GtBox>& gts,
                  std::int32_t num_classes, const std::vector<double>& thresholds) {
  MatchResult result;
  result.thresholds = thresholds;
  result.num_classes = num_classes;
  result.total_gt = static_cast<std::int64_t>(gts.size());

  for (std::int32_t cls = 0; cls < num_classes; ++cls) {
    // Predictions of this class sorted by score; ties broken by detection id
    // so permuting equal-score detections cannot change the result.
    std::vector<std::size_t> pred_idx;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i].box.class_id == cls) pred_idx.push_back(i);
    std::sort(pred_idx.begin(), pred_idx.end(), [&](std::size_t a, std::size_t b) {
      if (preds[a].score != preds[b].score) return preds[a].score > preds[b].score;
      return preds[a].det_id < preds[b].det_id;
    });
    std::vector<std::size_t> gt_idx;
    for (std::size_t i = 0; i < gts.size(); ++i)
      if (gts[i].box.class_id == cls) gt_idx.push_back(i);

    for (double thr : thresholds) {
      ThresholdClassMatch entry;
      entry.threshold = thr;
      entry.class_id = cls;
      entry.gt_count = static_cast<std::int64_t>(gt_idx.size());
      std::vector<char> gt_used(gt_idx.size(), 0);
      for (std::size_t pi : pred_idx) {
        const PredBox& p = preds[pi];
        double best_d = std::numeric_limits<double>::infinity();
        std::size_t best_g = gt_idx.size();
        for (std::size_t g = 0; g < gt_idx.size(); ++g) {
          if (gt_used[g]) continue;
          const GtBox& gt = gts[gt_idx[g]];
          if (gt.scene_id != p.scene_id) continue;
          const double d = center_distance(p.box, gt.box);
          if (d <= thr && d < best_d) {
            best_d = d;
            best_g = g;
          }
        }
        entry.scores.push_back(p.score);
        if (best_g < gt_idx.size()) {
          gt_used[best_g] = 1;
          const GtBox& gt = gts[gt_idx[best_g]];
          entry.tp_flags.push_back(1);
          entry.matched_gt.push_back(static_cast<std::int64_t>(gt_idx[best_g]));
          entry.bucket_distance.push_back(gt.box.distance());
          entry.tps.push_back({best_d, size_error(p.box, gt.box), orient_error(p.box, gt.box),
                               p.score, static_cast<std::int64_t>(gt_idx[best_g]),
                               gt.box.distance()});
        } else {
          entry.tp_flags.push_back(0);
          entry.matched_gt.push_back(-1);
          entry.bucket_distance.push_back(p.box.distance());
        }
      }
      result.entries.push_back(std::move(entry));
    }
  }
  return result;
}

double average_precision(const ThresholdClassMatch& entry) {
  if (entry.gt_count == 0) return 0.0;
  const std::size_t n = entry.tp_flags.size();
  std::vector<double> precision(n), recall(n);
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (entry.tp_flags[i])
      tp += 1.0;
    else
      fp += 1.0;
    precision[i] = tp / (tp + fp);
    recall[i] = tp / static_cast<double>(entry.gt_count);
  }
  double ap = 0.0;
  for (int r = 0; r <= 40; ++r) {
    const double level = static_cast<double>(r) / 40.0;
    double best = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (recall[i] >= level) best = std::max(best, precision[i]);
    ap += best;
  }
  return ap / 41.0;
}

TpErrors tp_errors(const MatchResult& result, double tp_threshold) {
  double sum_t = 0.0, sum_s = 0.0, sum_o = 0.0;
  std::int64_t count = 0;
  for (const auto& entry : result.entries) {
    if (entry.threshold != tp_threshold) continue;
    for (const auto& tp : entry.tps) {
      sum_t += tp.trans_err;
      sum_s += tp.size_err;
      sum_o += tp.orient_err;
      ++count;
    }
  }
  if (count == 0) return {1.0, 1.0, 1.0};
  return {sum_t / count, sum_s / count, sum_o / count};
}

double composite_score(double map, const TpErrors& errors) {
  const double ate = 1.0 - std::min(1.0, errors.mate / 4.0);
  const double ase = 1.0 - std::min(1.0, errors.mase);
  const double aoe = 1.0 - std::min(1.0, errors.maoe / M_PI);
  return (5.0 * map + ate + ase + aoe) / 8.0;
}

namespace {

Metrics metrics_from_match(const MatchResult& result, const std::vector<PredBox>& preds,
                           double tp_threshold, std::int64_t total_gt) {
  Metrics m;
  m.gt_count = total_gt;
  m.pred_count = static_cast<std::int64_t>(preds.size());
  if (total_gt == 0) {
    // No ground truth anywhere: vacuously perfect iff there are no
    // predictions; any detection is a false positive.
    m.map = preds.empty() ? 1.0 : 0.0;
    m.errors = preds.empty() ? TpErrors{0.0, 0.0, 0.0} : TpErrors{1.0, 1.0, 1.0};
    m.nds = composite_score(m.map, m.errors);
    return m;
  }
  double ap_sum = 0.0;
  std::int64_t ap_terms = 0;
  for (const auto& entry : result.entries) {
    if (entry.gt_count == 0) continue;  // AP undefined for this class
    ap_sum += average_precision(entry);
    ++ap_terms;
  }
  m.map = ap_terms > 0 ? ap_sum / static_cast<double>(ap_terms) : 0.0;
  m.errors = tp_errors(result, tp_threshold);
  m.nds = composite_score(m.map, m.errors);
  return m;
}

}  // namespace

Metrics evaluate(const std::vector<PredBox>& preds, const std::vector<GtBox>& gts,
                 std::int32_t num_classes, const std::vector<double>& thresholds,
                 double tp_threshold) {
  const MatchResult result = match(preds, gts, num_classes, thresholds);
  return metrics_from_match(result, preds, tp_threshold, static_cast<std::int64_t>(gts.size()));
}

BucketMetrics bucket_by_distance(const std::vector<PredBox>& preds, const std::vector<GtBox>& gts,
                                 std::int32_t num_classes, const std::vector<double>& thresholds,
                                 double tp_threshold, double split) {
  const MatchResult full = match(preds, gts, num_classes, thresholds);
  BucketMetrics out;
  out.split = split;

  for (int bucket = 0; bucket < 2; ++bucket) {
    const bool far = bucket == 1;
    auto in_bucket = [&](double d) { return far ? d >= split : d < split; };

    MatchResult filtered;
    filtered.thresholds = full.thresholds;
    filtered.num_classes = full.num_classes;
    std::int64_t gt_count = 0;
    for (const auto& g : gts)
      if (in_bucket(g.box.distance())) ++gt_count;
    filtered.total_gt = gt_count;

    std::int64_t bucket_preds = 0;
    for (const auto& entry : full.entries) {
      ThresholdClassMatch fe;
      fe.threshold = entry.threshold;
      fe.class_id = entry.class_id;
      fe.gt_count = 0;
      for (const auto& g : gts)
        if (g.box.class_id == entry.class_id && in_bucket(g.box.distance())) ++fe.gt_count;
      for (std::size_t i = 0; i < entry.scores.size(); ++i) {
        if (!in_bucket(entry.bucket_distance[i])) continue;
        fe.scores.push_back(entry.scores[i]);
        fe.tp_flags.push_back(entry.tp_flags[i]);
        fe.matched_gt.push_back(entry.matched_gt[i]);
        fe.bucket_distance.push_back(entry.bucket_distance[i]);
      }
      for (const auto& tp : entry.tps)
        if (in_bucket(tp.gt_distance)) fe.tps.push_back(tp);
      if (entry.threshold == tp_threshold)
        bucket_preds += static_cast<std::int64_t>(fe.scores.size());
      filtered.entries.push_back(std::move(fe));
    }

    Metrics m;
    m.gt_count = gt_count;
    m.pred_count = bucket_preds;
    if (gt_count == 0) {
      m.map = bucket_preds == 0 ? 1.0 : 0.0;
      m.errors = bucket_preds == 0 ? TpErrors{0.0, 0.0, 0.0} : TpErrors{1.0, 1.0, 1.0};
      m.nds = composite_score(m.map, m.errors);
    } else {
      double ap_sum = 0.0;
      std::int64_t ap_terms = 0;
      for (const auto& entry : filtered.entries) {
        if (entry.gt_count == 0) continue;
        ap_sum += average_precision(entry);
        ++ap_terms;
      }
      m.map = ap_terms > 0 ? ap_sum / static_cast<double>(ap_terms) : 0.0;
      m.errors = tp_errors(filtered, tp_threshold);
      m.nds = composite_score(m.map, m.errors);
    }
    (far ? out.far_bucket : out.near_bucket) = m;
  }
  return out;
}

}  // namespace bevkd::evalkit
