#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "bevkd/bevgrid.hpp"
#include "bevkd/nn.hpp"
#include "bevkd/synthworld.hpp"
#include "bevkd/tensor.hpp"

namespace bevkd::det {

// Head outputs for one scene: per-class center heatmap (post-sigmoid) and
// dense regression (dx, dy within-cell offsets in cell units, log w, log l,
// sin yaw, cos yaw).
struct DetectionMaps {
  Tensor heatmap;  // [m, H, W]
  Tensor regress;  // [6, H, W]
};

constexpr std::int64_t kRegressChannels = 6;

// Ground-truth encoding shared by detection losses and the round-trip tests.
struct GtTargets {
  bev::Heatmap heatmap;
  std::vector<std::array<std::int64_t, 2>> center_cells;  // (i, j) per box
  Tensor reg_targets;                                      // [n_boxes, 6]
};
GtTargets encode_gt(const world::Scene& scene, const bev::BevGridSpec& grid,
                    std::int32_t num_classes, const bev::HeatmapParams& params);

struct Detection {
  world::BoxLabel box;
  double score = 0.0;
};

// Local-3x3-maximum decoding of a center head: peaks above score_thresh,
// top k_max across classes, box recovered from the regression channels.
std::vector<Detection> head_decode(const DetectionMaps& maps, const bev::BevGridSpec& grid,
                                   double score_thresh, std::int64_t k_max);

// Copy one batch slot out of [N, m, H, W] / [N, 6, H, W] head outputs.
DetectionMaps slice_maps(const Tensor& heatmap, const Tensor& regress, std::int64_t slot);

// Center head shared structurally by teacher and student: two 3x3 convs with
// ReLU, then 1x1 heatmap and regression heads. No normalization.
class DetectionHead {
 public:
  DetectionHead() = default;
  DetectionHead(std::int64_t in_ch, std::int64_t hidden, std::int64_t num_classes, Rng& rng);

  struct Out {
    Tensor heatmap;  // [N, m, H, W], post-sigmoid
    Tensor regress;  // [N, 6, H, W]
  };
  Out forward(const Tensor& features, bool cache = true);
  // d_heatmap is w.r.t. the post-sigmoid probabilities.
  Tensor backward(const Tensor& d_heatmap, const Tensor& d_regress, bool param_grads = true);

  void params(const std::string& prefix, std::vector<nn::ParamRef>& out);
  void state(const std::string& prefix, nn::StateDict& out);
  std::int32_t num_classes() const { return num_classes_; }

 private:
  std::int32_t num_classes_ = 0;
  nn::Conv2d c1_, c2_, hm_, reg_;
  nn::ReLU r1_, r2_;
  Tensor probs_;
};

// Point-cloud teacher: per-cell point statistics, a small conv encoder, and
// the detection head.
class TeacherModel {
 public:
  TeacherModel() = default;
  TeacherModel(std::int32_t num_classes, std::int64_t channels, std::int64_t head_width,
               bev::BevGridSpec grid, Rng& rng);

  // [4, H, W]: log1p(count), mean dx, mean dy (cell units), occupancy.
  // Points are accumulated in a sorted order so the result is bit-identical
  // under input permutation.
  Tensor featurize(const std::vector<world::LidarPoint>& points) const;
  Tensor featurize_batch(const std::vector<const world::Scene*>& scenes) const;

  struct Out {
    Tensor f_lidar;  // [N, C_T, H, W]
    Tensor heatmap;
    Tensor regress;
  };
  Out forward(const Tensor& input, bool train, bool cache = true);
  void backward(const Tensor& d_heatmap, const Tensor& d_regress);

  void params(std::vector<nn::ParamRef>& out);
  void state(nn::StateDict& out);

  const bev::BevGridSpec& grid() const { return grid_; }
  std::int64_t channels() const { return channels_; }
  std::int32_t num_classes() const { return num_classes_; }

  // Differentiate an external feature through the frozen head, as the label
  // encoder training does: returns d_features given loss grads on the head
  // outputs. Head parameters receive no gradient.
  Out head_forward(const Tensor& features, bool cache = true);
  Tensor head_backward_frozen(const Tensor& d_heatmap, const Tensor& d_regress);
  DetectionHead& head() { return head_; }

 private:
  std::int32_t num_classes_ = 0;
  std::int64_t channels_ = 0;
  bev::BevGridSpec grid_;
  nn::Conv2d c1_, c2_;
  nn::BatchNorm2d bn1_, bn2_;
  nn::ReLU r1_, r2_;
  DetectionHead head_;
};

// Panorama student: per-column MLP, categorical depth distribution over D
// range bins, depth-weighted splat along each column's ray into BEV
// (lift-splat), conv encoder, detection head.
class StudentModel {
 public:
  StudentModel() = default;
  StudentModel(std::int32_t num_classes, std::int64_t channels, std::int64_t depth_bins,
               std::int64_t column_width, std::int64_t head_width, const world::WorldSpec& world,
               bev::BevGridSpec grid, Rng& rng);

  struct Out {
    Tensor f_image;      // [N, C_S, H, W]
    Tensor heatmap;      // [N, m, H, W]
    Tensor regress;      // [N, 6, H, W]
    Tensor depth_probs;  // [N*A, D], rows sum to 1
  };
  // panorama batch: [N, A, CH] row-major (scene layout).
  Out forward(const Tensor& panorama, bool train, bool cache = true);
  // d_f_image_ext: external gradient on F_image (feature distillation paths);
  // pass an empty tensor when unused. d_depth_probs w.r.t. the softmax output.
  void backward(const Tensor& d_f_image_ext, const Tensor& d_heatmap, const Tensor& d_regress,
                const Tensor& d_depth_probs);

  Tensor panorama_batch(const std::vector<const world::Scene*>& scenes) const;

  void params(std::vector<nn::ParamRef>& out);
  void state(nn::StateDict& out);

  std::int64_t channels() const { return channels_; }
  std::int64_t depth_bins() const { return depth_bins_; }
  double max_range() const { return max_range_; }
  const bev::BevGridSpec& grid() const { return grid_; }
  std::int32_t azimuth_bins() const { return azimuth_bins_; }

  // Flat BEV cell index for (azimuth bin, depth bin), -1 if off-grid.
  std::int64_t lift_cell(std::int64_t a, std::int64_t k) const {
    return lift_cells_[static_cast<std::size_t>(a * depth_bins_ + k)];
  }

 private:
  std::int32_t num_classes_ = 0;
  std::int64_t channels_ = 0, depth_bins_ = 0, column_width_ = 0;
  std::int32_t azimuth_bins_ = 0, pano_channels_ = 0;
  double max_range_ = 0.0;
  bev::BevGridSpec grid_;
  std::vector<std::int64_t> lift_cells_;  // [A * D]

  nn::Linear col1_, col2_, depth_head_, context_head_;
  nn::ReLU r1_, r2_;
  nn::Conv2d e1_, e2_;
  nn::BatchNorm2d bn1_, bn2_;
  nn::ReLU er1_, er2_;
  DetectionHead head_;

  // forward caches
  Tensor ctx_, depth_probs_, lift_;
};

// Depth supervision target per azimuth bin: nearest-hit range bin, or -1 for
// background columns (masked out of the depth loss).
std::vector<std::int32_t> depth_bin_targets(const world::Scene& scene, const world::WorldSpec& world,
                                            std::int64_t depth_bins, double max_range);

// Adaptation module: 1-3 3x3 convs with ReLU between, output C_T channels.
class AdaptModule {
 public:
  AdaptModule() = default;
  AdaptModule(std::int64_t in_ch, std::int64_t out_ch, int layers, Rng& rng);

  Tensor forward(const Tensor& x, bool cache = true);
  Tensor backward(const Tensor& dy, bool param_grads = true);

  void params(const std::string& prefix, std::vector<nn::ParamRef>& out);
  void state(const std::string& prefix, nn::StateDict& out);
  std::int64_t in_ch() const { return layers_.empty() ? 0 : layers_.front().in_ch(); }

 private:
  std::vector<nn::Conv2d> layers_;
  std::vector<nn::ReLU> relus_;
};

}  // namespace bevkd::det
