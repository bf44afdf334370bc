#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bevkd/bevgrid.hpp"
#include "bevkd/detectors.hpp"
#include "bevkd/tensor.hpp"

namespace bevkd::distill {

// Channel split of the student feature into image / lidar / label groups,
// contiguous in that order.
struct PartitionSpec {
  std::int64_t n_image = 16;
  std::int64_t n_lidar = 16;
  std::int64_t n_label = 16;

  std::int64_t total() const { return n_image + n_lidar + n_label; }
  std::int64_t image_begin() const { return 0; }
  std::int64_t lidar_begin() const { return n_image; }
  std::int64_t label_begin() const { return n_image + n_lidar; }
  void validate(std::int64_t channels) const;
};

struct LossWeights {
  double lambda_lidar_feat = 1.0;   // lambda_1
  double lambda_label_feat = 1.0;   // lambda_2
  double lambda_lidar_resp = 0.25;  // lambda_3
  double w_heatmap = 1.0;           // detection-loss internals
  double w_regress = 1.0;
  double w_depth = 0.2;
  double focal_gamma = 2.0;

  void validate() const;
};

// Channel slices of a [N, C, H, W] feature.
struct Partitioned {
  Tensor image;
  Tensor lidar;
  Tensor label;
};
Partitioned partition(const Tensor& f_image, const PartitionSpec& spec);
// Scatter a group gradient back into the matching channel range of a zeroed
// [N, C, H, W] gradient tensor.
void scatter_group_grad(Tensor& d_full, const Tensor& d_group, std::int64_t channel_begin);
Tensor slice_channels(const Tensor& f, std::int64_t begin, std::int64_t count);

// Masked per-cell squared error against a teacher-space target, normalized by
// the positive-cell count; 0 when the mask is empty. `d_adapted`, when
// non-null, receives the gradient w.r.t. the adapted student features.
double masked_feature_loss(const Tensor& target, const Tensor& adapted, const Tensor& mask,
                           std::int64_t n_p, Tensor* d_adapted);

// Convenience wrappers matching the two feature-distillation losses; both
// run the adaptation module and propagate its gradient when training.
double lidar_feature_loss(const Tensor& f_lidar, const Tensor& f_lidar_group, const Tensor& mask,
                          std::int64_t n_p, det::AdaptModule& adapt, Tensor* d_group,
                          bool train = true);
double label_feature_loss(const Tensor& f_label, const Tensor& f_label_group, const Tensor& mask,
                          std::int64_t n_p, det::AdaptModule& adapt, Tensor* d_group,
                          bool train = true);

// Response-level distillation (teacher predictions as soft labels), masked to
// ground-truth foreground: quality-focal on heatmaps plus L1 on regression
// maps, each normalized by the foreground cell count.
double response_loss(const Tensor& teacher_heatmap, const Tensor& teacher_regress,
                     const Tensor& student_heatmap, const Tensor& student_regress,
                     const Tensor& gt_fg_mask, std::int64_t n_fg, double focal_gamma,
                     Tensor* d_student_heatmap, Tensor* d_student_regress);

// Detection loss for one scene at batch slot `slot`: quality-focal heatmap
// loss against the ground-truth gaussians, L1 regression at object centers,
// and cross-entropy on hit-column depth bins. Gradients accumulate into the
// provided tensors when non-null.
struct DetectionLossParts {
  double heatmap = 0.0;
  double regress = 0.0;
  double depth = 0.0;
  double weighted_total(const LossWeights& w) const {
    return w.w_heatmap * heatmap + w.w_regress * regress + w.w_depth * depth;
  }
};
DetectionLossParts detection_loss(const Tensor& heatmap, const Tensor& regress,
                                  const Tensor* depth_probs, std::int64_t slot,
                                  std::int64_t azimuth_bins, const det::GtTargets& gt,
                                  const std::vector<std::int32_t>* depth_targets,
                                  const LossWeights& weights, double focal_gamma,
                                  Tensor* d_heatmap, Tensor* d_regress, Tensor* d_depth_probs);

// Eq. 7: L_det + l1*L_lidar_feat + l2*L_label_feat + l3*L_lidar_resp.
// Disabled terms are expressed as std::nullopt and contribute exactly zero.
// Non-finite components abort, naming the component.
double total_loss(double det, std::optional<double> lidar_feat, std::optional<double> label_feat,
                  std::optional<double> lidar_resp, const LossWeights& w);

}  // namespace bevkd::distill
