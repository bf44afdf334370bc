#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bevkd/config.hpp"
#include "bevkd/detectors.hpp"
#include "bevkd/evalkit.hpp"
#include "bevkd/labelenc.hpp"

namespace bevkd::pipeline {

struct EpochRow {
  int epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_det = 0.0;
  double loss_lidar_feat = 0.0;
  double loss_label_feat = 0.0;
  double loss_lidar_resp = 0.0;
  bool has_eval = false;
  evalkit::Metrics eval;
};

struct StageResult {
  std::filesystem::path checkpoint;
  std::vector<EpochRow> epochs;
  evalkit::Metrics final_metrics;
  evalkit::BucketMetrics buckets;  // student stage only
  evalkit::Metrics autoencoder_metrics;  // labelenc stage only
  std::uint64_t checkpoint_hash = 0;
  std::uint64_t frozen_teacher_hash_before = 0;
  std::uint64_t frozen_teacher_hash_after = 0;
  std::uint64_t frozen_labelenc_hash_before = 0;
  std::uint64_t frozen_labelenc_hash_after = 0;
};

// Model factories and checkpoint loaders; loaders verify the checkpoint kind.
det::TeacherModel make_teacher(const config::ExperimentConfig& cfg, Rng& rng);
det::StudentModel make_student(const config::ExperimentConfig& cfg, Rng& rng);
labelenc::LabelEncoder make_label_encoder(const config::ExperimentConfig& cfg, Rng& rng);
det::TeacherModel load_teacher(const config::ExperimentConfig& cfg,
                               const std::filesystem::path& path);
det::StudentModel load_student(const config::ExperimentConfig& cfg,
                               const std::filesystem::path& path);
labelenc::LabelEncoder load_label_encoder(const config::ExperimentConfig& cfg,
                                          const std::filesystem::path& path);

labelenc::EncoderTrainContext make_encoder_context(const config::ExperimentConfig& cfg);

// Foreground mask for the feature and response losses; soft variant keeps the
// heatmap value as a weight instead of binarizing.
bev::ForegroundMask feature_mask(const bev::Heatmap& heatmap, double tau, bool soft);

evalkit::Metrics evaluate_teacher(det::TeacherModel& teacher,
                                  const std::vector<world::Scene>& scenes,
                                  const config::ExperimentConfig& cfg);
evalkit::Metrics evaluate_student(det::StudentModel& student,
                                  const std::vector<world::Scene>& scenes,
                                  const config::ExperimentConfig& cfg);
evalkit::BucketMetrics bucketed_student_metrics(det::StudentModel& student,
                                                const std::vector<world::Scene>& scenes,
                                                const config::ExperimentConfig& cfg);

// Stage runners. Each writes into out_dir: config.json, metrics/<stage>.csv,
// checkpoints/<stage>.ckpt and report.json, everything atomically.
// `train_seed` controls parameter init and batch shuffling (dataset identity
// comes from the dataset files); pass cfg.seed for single runs.
StageResult run_stage_teacher(const config::ExperimentConfig& cfg,
                              const std::vector<world::Scene>& train,
                              const std::vector<world::Scene>& val,
                              const std::filesystem::path& out_dir, std::uint64_t train_seed);

StageResult run_stage_labelenc(const config::ExperimentConfig& cfg,
                               const std::vector<world::Scene>& train,
                               const std::vector<world::Scene>& val,
                               const std::filesystem::path& teacher_ckpt,
                               const std::filesystem::path& out_dir, std::uint64_t train_seed,
                               const std::filesystem::path& baseline_student_ckpt = {});

StageResult run_stage_student(const config::ExperimentConfig& cfg,
                              const std::vector<world::Scene>& train,
                              const std::vector<world::Scene>& val,
                              const std::filesystem::path& teacher_ckpt,
                              const std::filesystem::path& labelenc_ckpt,
                              const std::filesystem::path& out_dir, std::uint64_t train_seed);

struct AblationReport {
  std::string axis;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::filesystem::path csv_path;
  std::filesystem::path json_path;
  std::filesystem::path plot_path;
};

// Runs the config grid for one ablation axis over n_seeds seeds (cfg.seed,
// cfg.seed+1, ...). Shared per-seed artifacts (teacher, label encoders,
// repeated student rows) are cached under out_dir/shared and reused when a
// finished run with the same config hash is found.
AblationReport run_ablation_matrix(const config::ExperimentConfig& cfg, const std::string& axis,
                                   const std::vector<world::Scene>& train,
                                   const std::vector<world::Scene>& val,
                                   const std::filesystem::path& out_dir, int n_seeds);

struct RunManifest {
  std::string command;
  std::string config_path;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string revision;
  std::string timestamp;
  std::string out_dir;
  std::vector<std::string> args;
};
// Written before any work starts; a crashed run is a manifest without report.
void write_manifest(const std::filesystem::path& out_dir, const RunManifest& manifest);

std::string revision_string();

}  // namespace bevkd::pipeline
