#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bevkd/bevgrid.hpp"
#include "bevkd/detectors.hpp"
#include "bevkd/distill.hpp"
#include "bevkd/evalkit.hpp"
#include "bevkd/nn.hpp"
#include "bevkd/schedule.hpp"
#include "bevkd/synthworld.hpp"

namespace bevkd::labelenc {

// How the label encoder is trained. kInverse decodes through the frozen
// pretrained teacher head; the two comparison schemes train a fresh head
// replica from scratch, kLabelEnc additionally pulling the label features
// toward a frozen baseline student's features.
enum class EncoderVariant { kInverse, kAutoencoder, kLabelEnc };
EncoderVariant variant_from_string(const std::string& name);
std::string to_string(EncoderVariant variant);

// g = f(q(Phi_cls(one_hot) + Phi_box(attrs))): two small MLPs, the BEV
// mapping function, and a conv block refining to the teacher channel count.
class LabelEncoder {
 public:
  LabelEncoder() = default;
  LabelEncoder(std::int32_t num_classes, std::int64_t embed_dim, std::int64_t out_channels,
               bev::BevGridSpec grid, bool position_blind, Rng& rng);

  // F_label for a batch of scenes: [N, C_T, H, W].
  Tensor forward(const std::vector<const world::Scene*>& scenes, const bev::BevGridSpec& grid,
                 bool train, bool cache = true);
  void backward(const Tensor& d_f_label);

  // Phi_cls + Phi_box embedding of a single box (no conv block); eval only.
  Tensor object_vector(const world::BoxLabel& box);
  // Box attribute vector fed to Phi_box: center position as the fractional
  // offset within its BEV cell (cell units; the coarse position enters via
  // the mapping function's placement), log sizes, yaw as (sin, cos).
  // Position channels are zeroed in position-blind mode.
  std::vector<double> box_attrs(const world::BoxLabel& box) const;

  void params(std::vector<nn::ParamRef>& out);
  void state(nn::StateDict& out);

  std::int64_t out_channels() const { return out_ch_; }
  std::int64_t embed_dim() const { return d_; }
  bool position_blind() const { return position_blind_; }

 private:
  std::int32_t num_classes_ = 0;
  std::int64_t d_ = 0, out_ch_ = 0;
  bev::BevGridSpec grid_;
  bool position_blind_ = false;

  nn::Linear cls1_, cls2_, box1_, box2_;
  nn::ReLU rc_, rb_;
  nn::Conv2d f1_, f2_;
  nn::BatchNorm2d fbn_;
  nn::ReLU fr_;

  // backward routing caches
  std::vector<std::vector<std::int32_t>> owners_;
  std::vector<std::int64_t> row_offsets_;
  std::int64_t grid_h_ = 0, grid_w_ = 0, total_rows_ = 0;
};

struct EncoderTrainResult {
  std::vector<double> epoch_losses;
  evalkit::Metrics autoencoder_metrics;  // on held-out scenes
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;
};

struct EncoderTrainContext {
  const world::WorldSpec* world = nullptr;
  bev::BevGridSpec grid;
  bev::HeatmapParams heatmap;
  distill::LossWeights weights;
  double tau = 0.1;
  std::int64_t head_width = 32;       // replica head width for the variants
  double align_weight = 1.0;          // labelenc-variant alignment strength
  double score_thresh = 0.1;
  std::int64_t k_max = 20;
  std::vector<double> thresholds = {0.5, 1.0, 2.0, 4.0};
  double tp_threshold = 2.0;
};

// Minimizes the detection loss of head(g(y)) against y. The teacher head is
// frozen: gradients flow through it into the encoder but its parameters are
// untouched (hash-checked in the result). `baseline_student` is required for
// the kLabelEnc variant and must be a trained, frozen model.
EncoderTrainResult train_label_encoder(LabelEncoder& encoder, det::TeacherModel& teacher,
                                       const std::vector<world::Scene>& train_scenes,
                                       const std::vector<world::Scene>& val_scenes,
                                       const EncoderTrainContext& ctx, const TrainSchedule& schedule,
                                       EncoderVariant variant, det::StudentModel* baseline_student,
                                       Rng& rng);

// Runs head(g(y)) per scene, decodes, and scores against the ground truth.
evalkit::Metrics autoencoder_eval(LabelEncoder& encoder, det::DetectionHead& head,
                                  const std::vector<world::Scene>& scenes,
                                  const EncoderTrainContext& ctx);

}  // namespace bevkd::labelenc
