#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bevkd/bevgrid.hpp"
#include "bevkd/distill.hpp"
#include "bevkd/schedule.hpp"
#include "bevkd/synthworld.hpp"

namespace bevkd::config {

struct ModelConfig {
  std::int64_t teacher_channels = 64;  // C_T
  std::int64_t student_channels = 48;  // C_S
  std::int64_t embed_dim = 64;         // label embedding width d
  std::int64_t depth_bins = 32;        // D
  std::int64_t head_width = 32;
  std::int64_t column_width = 64;
  int adapt_layers = 2;
};

struct EvalConfig {
  double score_thresh = 0.1;
  std::int64_t k_max = 20;
  std::vector<double> thresholds = {0.5, 1.0, 2.0, 4.0};
  double tp_threshold = 2.0;
  double far_fraction = 0.75;  // near/far split at fraction * extent
};

struct AblationSwitches {
  bool use_lidar_distill = true;
  bool use_label_distill = true;
  bool use_partition = true;
  std::string label_encoder_variant = "inverse";
};

struct DataConfig {
  std::int64_t train_scenes = 2000;
  std::int64_t val_scenes = 500;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  world::WorldSpec world = world::WorldSpec::defaults();
  std::int32_t grid_cells = 64;
  bev::HeatmapParams heatmap;
  double tau = 0.1;
  bool soft_mask = false;       // weight feature losses by the heatmap value
  bool position_blind = false;  // drop absolute position from Phi_box inputs
  double labelenc_align_weight = 1.0;
  ModelConfig model;
  distill::PartitionSpec partition;
  distill::LossWeights losses;
  DataConfig data;
  TrainSchedule teacher_stage{20, 2e-3, 8, 0.01, {15, 18}, 0.1, 0};
  TrainSchedule labelenc_stage{12, 1e-3, 8, 0.01, {9, 11}, 0.1, 0};
  TrainSchedule student_stage{24, 1e-3, 8, 0.01, {18, 22}, 0.1, 0};
  EvalConfig eval;
  AblationSwitches ablation;

  bev::BevGridSpec grid() const { return bev::BevGridSpec::covering(world, grid_cells); }
  double far_split() const { return eval.far_fraction * world.extent; }
  void validate() const;

  std::string to_json_string() const;
  static ExperimentConfig from_json_string(const std::string& text, const std::string& origin);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::uint64_t hash() const;

  // Dataset generation seeds derived from the experiment seed so train/val
  // splits are fixed per config regardless of per-run training seeds.
  std::uint64_t train_data_seed() const;
  std::uint64_t val_data_seed() const;
};

}  // namespace bevkd::config
