#include "bevkd/distill.hpp"

#include <cmath>

#include "bevkd/util.hpp"

namespace bevkd::distill {

void PartitionSpec::validate(std::int64_t channels) const {
  if (n_image < 0 || n_lidar < 0 || n_label < 0)
    throw Error(ErrorKind::kConfig, "partition sizes must be >= 0");
  if (total() != channels)
    throw Error(ErrorKind::kConfig, "partition sizes sum to " + std::to_string(total()) +
                                        " but student has " + std::to_string(channels) +
                                        " channels");
}

void LossWeights::validate() const {
  for (double v : {lambda_lidar_feat, lambda_label_feat, lambda_lidar_resp, w_heatmap, w_regress,
                   w_depth, focal_gamma}) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw Error(ErrorKind::kConfig, "loss weights must be finite and >= 0");
  }
}

Tensor slice_channels(const Tensor& f, std::int64_t begin, std::int64_t count) {
  const std::int64_t n = f.size(0), c = f.size(1), h = f.size(2), w = f.size(3);
  Tensor out({n, count, h, w});
  const std::int64_t hw = h * w;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < count; ++ch)
      std::copy(f.data() + ((i * c + begin + ch) * hw), f.data() + ((i * c + begin + ch) * hw) + hw,
                out.data() + ((i * count + ch) * hw));
  return out;
}

Partitioned partition(const Tensor& f_image, const PartitionSpec& spec) {
  spec.validate(f_image.size(1));
  Partitioned p;
  p.image = slice_channels(f_image, spec.image_begin(), spec.n_image);
  p.lidar = slice_channels(f_image, spec.lidar_begin(), spec.n_lidar);
  p.label = slice_channels(f_image, spec.label_begin(), spec.n_label);
  return p;
}

void scatter_group_grad(Tensor& d_full, const Tensor& d_group, std::int64_t channel_begin) {
  const std::int64_t n = d_full.size(0), c = d_full.size(1), h = d_full.size(2), w = d_full.size(3);
  const std::int64_t gc = d_group.size(1);
  const std::int64_t hw = h * w;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < gc; ++ch) {
      const double* src = d_group.data() + (i * gc + ch) * hw;
      double* dst = d_full.data() + ((i * c + channel_begin + ch) * hw);
      for (std::int64_t k = 0; k < hw; ++k) dst[k] += src[k];
    }
}

double masked_feature_loss(const Tensor& target, const Tensor& adapted, const Tensor& mask,
                           std::int64_t n_p, Tensor* d_adapted) {
  if (n_p == 0) return 0.0;
  if (!target.same_shape(adapted))
    throw Error(ErrorKind::kRuntime, "feature loss shape mismatch: " + target.shape_str() + " vs " +
                                         adapted.shape_str());
  const std::int64_t c = target.size(0), h = target.size(1), w = target.size(2);
  const std::int64_t hw = h * w;
  const double inv = 1.0 / static_cast<double>(n_p);
  double loss = 0.0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* t = target.data() + ch * hw;
    const double* a = adapted.data() + ch * hw;
    double* g = d_adapted ? d_adapted->data() + ch * hw : nullptr;
    for (std::int64_t k = 0; k < hw; ++k) {
      const double m = mask[k];
      if (m == 0.0) continue;
      const double diff = t[k] - a[k];
      loss += m * diff * diff;
      if (g) g[k] += -2.0 * m * diff * inv;
    }
  }
  return loss * inv;
}

namespace {

double run_feature_loss(const Tensor& target, const Tensor& group, const Tensor& mask,
                        std::int64_t n_p, det::AdaptModule& adapt, Tensor* d_group, bool train) {
  const Tensor batch = group.reshaped({1, group.size(0), group.size(1), group.size(2)});
  const Tensor adapted4 = adapt.forward(batch, train);
  const Tensor adapted = adapted4.reshaped({adapted4.size(1), adapted4.size(2), adapted4.size(3)});
  Tensor d_adapted;
  if (d_group) d_adapted = Tensor(adapted.shape());
  const double loss = masked_feature_loss(target, adapted, mask, n_p, d_group ? &d_adapted : nullptr);
  if (d_group) {
    const Tensor d4 = adapt.backward(
        d_adapted.reshaped({1, d_adapted.size(0), d_adapted.size(1), d_adapted.size(2)}), train);
    *d_group = d4.reshaped({d4.size(1), d4.size(2), d4.size(3)});
  }
  return loss;
}

}  // namespace

double lidar_feature_loss(const Tensor& f_lidar, const Tensor& f_lidar_group, const Tensor& mask,
                          std::int64_t n_p, det::AdaptModule& adapt, Tensor* d_group, bool train) {
  return run_feature_loss(f_lidar, f_lidar_group, mask, n_p, adapt, d_group, train);
}

double label_feature_loss(const Tensor& f_label, const Tensor& f_label_group, const Tensor& mask,
                          std::int64_t n_p, det::AdaptModule& adapt, Tensor* d_group, bool train) {
  return run_feature_loss(f_label, f_label_group, mask, n_p, adapt, d_group, train);
}

namespace {

constexpr double kProbEps = 1e-12;

// Quality-focal term |t-p|^gamma * (-(t log p + (1-t) log(1-p))); zero at
// p == t, so soft teacher heatmaps and gaussian targets are exact fixed
// points.
inline double qfl_value(double p, double t, double gamma) {
  const double pc = std::clamp(p, kProbEps, 1.0 - kProbEps);
  const double ce = t * std::log(pc) + (1.0 - t) * std::log1p(-pc);
  return -std::pow(std::abs(t - pc), gamma) * ce;
}

inline double qfl_grad(double p, double t, double gamma) {
  const double pc = std::clamp(p, kProbEps, 1.0 - kProbEps);
  const double diff = t - pc;
  if (diff == 0.0) return 0.0;
  const double ce = t * std::log(pc) + (1.0 - t) * std::log1p(-pc);
  const double a = std::pow(std::abs(diff), gamma);
  const double da = gamma * std::pow(std::abs(diff), gamma - 1.0) * (diff > 0 ? -1.0 : 1.0);
  const double dce = t / pc - (1.0 - t) / (1.0 - pc);
  return -(da * ce + a * dce);
}

}  // namespace

double response_loss(const Tensor& teacher_heatmap, const Tensor& teacher_regress,
                     const Tensor& student_heatmap, const Tensor& student_regress,
                     const Tensor& gt_fg_mask, std::int64_t n_fg, double focal_gamma,
                     Tensor* d_student_heatmap, Tensor* d_student_regress) {
  if (n_fg == 0) return 0.0;
  if (!teacher_heatmap.same_shape(student_heatmap) || !teacher_regress.same_shape(student_regress))
    throw Error(ErrorKind::kRuntime, "response loss map shape mismatch");
  const std::int64_t m = teacher_heatmap.size(0);
  const std::int64_t hw = teacher_heatmap.size(1) * teacher_heatmap.size(2);
  const double inv = 1.0 / static_cast<double>(n_fg);

  double cls = 0.0, bbox = 0.0;
  for (std::int64_t k = 0; k < hw; ++k) {
    if (gt_fg_mask[k] == 0.0) continue;
    for (std::int64_t c = 0; c < m; ++c) {
      const double t = teacher_heatmap[c * hw + k];
      const double p = student_heatmap[c * hw + k];
      cls += qfl_value(p, t, focal_gamma);
      if (d_student_heatmap)
        (*d_student_heatmap)[c * hw + k] += qfl_grad(p, t, focal_gamma) * inv;
    }
    for (std::int64_t c = 0; c < det::kRegressChannels; ++c) {
      const double diff = student_regress[c * hw + k] - teacher_regress[c * hw + k];
      bbox += std::abs(diff);
      if (d_student_regress)
        (*d_student_regress)[c * hw + k] += (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) * inv;
    }
  }
  return (cls + bbox) * inv;
}

DetectionLossParts detection_loss(const Tensor& heatmap, const Tensor& regress,
                                  const Tensor* depth_probs, std::int64_t slot,
                                  std::int64_t azimuth_bins, const det::GtTargets& gt,
                                  const std::vector<std::int32_t>* depth_targets,
                                  const LossWeights& weights, double focal_gamma,
                                  Tensor* d_heatmap, Tensor* d_regress, Tensor* d_depth_probs) {
  DetectionLossParts parts;
  const std::int64_t m = heatmap.size(1);
  const std::int64_t h = heatmap.size(2), w = heatmap.size(3);
  const std::int64_t hw = h * w;
  const std::int64_t n_obj = static_cast<std::int64_t>(gt.center_cells.size());
  const double inv_obj = 1.0 / static_cast<double>(std::max<std::int64_t>(1, n_obj));

  // Heatmap: quality-focal against the gaussian target over every cell.
  const double* target = gt.heatmap.data.data();
  const double* pred = heatmap.data() + slot * m * hw;
  double* dpred = d_heatmap ? d_heatmap->data() + slot * m * hw : nullptr;
  double hm_loss = 0.0;
  for (std::int64_t k = 0; k < m * hw; ++k) {
    hm_loss += qfl_value(pred[k], target[k], focal_gamma);
    if (dpred) dpred[k] += weights.w_heatmap * qfl_grad(pred[k], target[k], focal_gamma) * inv_obj;
  }
  parts.heatmap = hm_loss * inv_obj;

  // Regression: L1 at the object center cells.
  const double* reg = regress.data() + slot * det::kRegressChannels * hw;
  double* dreg = d_regress ? d_regress->data() + slot * det::kRegressChannels * hw : nullptr;
  double reg_loss = 0.0;
  for (std::int64_t b = 0; b < n_obj; ++b) {
    const auto [ci, cj] = gt.center_cells[static_cast<std::size_t>(b)];
    for (std::int64_t c = 0; c < det::kRegressChannels; ++c) {
      const std::int64_t idx = c * hw + ci * w + cj;
      const double diff = reg[idx] - gt.reg_targets.at(b, c);
      reg_loss += std::abs(diff);
      if (dreg)
        dreg[idx] += weights.w_regress * (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) * inv_obj;
    }
  }
  parts.regress = reg_loss * inv_obj;

  // Depth: cross-entropy on columns that hit an object.
  if (depth_probs != nullptr && depth_targets != nullptr) {
    const std::int64_t d_bins = depth_probs->size(1);
    std::int64_t hits = 0;
    for (std::int32_t t : *depth_targets)
      if (t >= 0) ++hits;
    if (hits > 0) {
      const double inv_hits = 1.0 / static_cast<double>(hits);
      double depth_loss = 0.0;
      for (std::int64_t a = 0; a < azimuth_bins; ++a) {
        const std::int32_t t = (*depth_targets)[static_cast<std::size_t>(a)];
        if (t < 0) continue;
        const std::int64_t row = slot * azimuth_bins + a;
        const double p = std::max(depth_probs->at(row, t), 1e-300);
        depth_loss += -std::log(p);
        if (d_depth_probs) d_depth_probs->at(row, t) += weights.w_depth * (-1.0 / p) * inv_hits;
      }
      parts.depth = depth_loss * inv_hits;
      (void)d_bins;
    }
  }
  return parts;
}

double total_loss(double det, std::optional<double> lidar_feat, std::optional<double> label_feat,
                  std::optional<double> lidar_resp, const LossWeights& w) {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v))
      throw Error(ErrorKind::kRuntime, std::string("non-finite loss component: ") + name);
    return v;
  };
  double total = check(det, "detection");
  if (lidar_feat) total += w.lambda_lidar_feat * check(*lidar_feat, "lidar_feature");
  if (label_feat) total += w.lambda_label_feat * check(*label_feat, "label_feature");
  if (lidar_resp) total += w.lambda_lidar_resp * check(*lidar_resp, "lidar_response");
  return total;
}

}  // namespace bevkd::distill
