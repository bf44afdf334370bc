#include <doctest.h>

#include <filesystem>

#include "bevkd/pipeline.hpp"
#include "bevkd/util.hpp"
#include "test_support.hpp"

using namespace bevkd;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "bevkd_pipe" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config json round trips and rejects unknown keys") {
  const auto cfg = oracle::tiny_config();
  const std::string text = cfg.to_json_string();
  const auto parsed = config::ExperimentConfig::from_json_string(text, "test");
  CHECK(parsed.hash() == cfg.hash());
  CHECK(parsed.to_json_string() == text);

  CHECK_THROWS_WITH_AS(
      config::ExperimentConfig::from_json_string("{\"bogus\": 1}", "test"),
      doctest::Contains("unknown key 'bogus'"), Error);
  CHECK_THROWS_WITH_AS(
      config::ExperimentConfig::from_json_string("{\"model\": {\"bad\": 1}}", "test"),
      doctest::Contains("model.bad"), Error);
  CHECK_THROWS_AS(config::ExperimentConfig::from_json_string("{not json", "test"), Error);

  auto invalid = cfg;
  invalid.partition = {1, 1, 1};  // does not sum to student channels
  CHECK_THROWS_AS(invalid.validate(), Error);
}

TEST_CASE("soft masks keep heatmap weights") {
  const auto cfg = oracle::tiny_config();
  const auto grid = cfg.grid();
  world::Scene s;
  s.boxes = {{0, 2.0f, 8.0f, 1.8f, 3.5f, 0.4f}};
  const auto hm = bev::gt_heatmap(s, grid, cfg.world.num_classes, cfg.heatmap);
  const auto hard = pipeline::feature_mask(hm, 0.1, false);
  const auto soft = pipeline::feature_mask(hm, 0.1, true);
  CHECK(hard.n_p == soft.n_p);
  bool found_soft_cell = false;
  for (std::int64_t k = 0; k < hard.mask.numel(); ++k) {
    if (hard.mask[k] == 0.0) {
      CHECK(soft.mask[k] == 0.0);
    } else {
      CHECK(soft.mask[k] > 0.0);
      CHECK(soft.mask[k] <= 1.0);
      if (soft.mask[k] < 1.0) found_soft_cell = true;
    }
  }
  CHECK(found_soft_cell);
}

TEST_CASE("three stages run end to end with frozen audits and reuse") {
  auto cfg = oracle::tiny_config();
  const auto train = world::make_dataset(cfg.world, cfg.data.train_scenes, cfg.train_data_seed());
  const auto val = world::make_dataset(cfg.world, cfg.data.val_scenes, cfg.val_data_seed(), 1000);

  const fs::path root = fresh_dir("stages");
  const auto teacher_res =
      pipeline::run_stage_teacher(cfg, train, val, root / "teacher", cfg.seed);
  CHECK(fs::exists(teacher_res.checkpoint));
  CHECK(fs::exists(root / "teacher" / "config.json"));
  CHECK(fs::exists(root / "teacher" / "metrics" / "teacher.csv"));
  CHECK(fs::exists(root / "teacher" / "report.json"));
  REQUIRE(teacher_res.epochs.size() == static_cast<std::size_t>(cfg.teacher_stage.epochs));

  const std::string teacher_bytes = read_file(teacher_res.checkpoint);

  const auto enc_res = pipeline::run_stage_labelenc(cfg, train, val, teacher_res.checkpoint,
                                                    root / "labelenc", cfg.seed);
  CHECK(enc_res.frozen_teacher_hash_before == enc_res.frozen_teacher_hash_after);
  CHECK(fs::exists(enc_res.checkpoint));
  CHECK(fs::exists(root / "labelenc" / "metrics" / "autoencoder.csv"));

  const auto stu_res =
      pipeline::run_stage_student(cfg, train, val, teacher_res.checkpoint, enc_res.checkpoint,
                                  root / "student", cfg.seed);
  CHECK(stu_res.frozen_teacher_hash_before == stu_res.frozen_teacher_hash_after);
  CHECK(stu_res.frozen_labelenc_hash_before == stu_res.frozen_labelenc_hash_after);
  CHECK(fs::exists(stu_res.checkpoint));

  // Stage isolation: earlier checkpoints are byte-identical after later stages.
  CHECK(read_file(teacher_res.checkpoint) == teacher_bytes);

  // Determinism: a rerun in a fresh directory reproduces everything bit-fed.
  const fs::path root2 = fresh_dir("stages2");
  const auto teacher2 = pipeline::run_stage_teacher(cfg, train, val, root2 / "teacher", cfg.seed);
  CHECK(teacher2.checkpoint_hash == teacher_res.checkpoint_hash);
  CHECK(teacher2.final_metrics.map == teacher_res.final_metrics.map);
  CHECK(read_file(root2 / "teacher" / "metrics" / "teacher.csv") ==
        read_file(root / "teacher" / "metrics" / "teacher.csv"));
  const auto stu2 = pipeline::run_stage_student(cfg, train, val, teacher2.checkpoint,
                                                enc_res.checkpoint, root2 / "student", cfg.seed);
  CHECK(stu2.checkpoint_hash == stu_res.checkpoint_hash);
  CHECK(stu2.final_metrics.map == stu_res.final_metrics.map);
  CHECK(stu2.final_metrics.nds == stu_res.final_metrics.nds);

  // Checkpoint loaders reject kind mismatches.
  CHECK_THROWS_AS(pipeline::load_teacher(cfg, stu_res.checkpoint), Error);
  CHECK_THROWS_AS(pipeline::load_student(cfg, teacher_res.checkpoint), Error);
}

TEST_CASE("baseline switches produce a pure detection loss") {
  auto cfg = oracle::tiny_config();
  cfg.ablation.use_lidar_distill = false;
  cfg.ablation.use_label_distill = false;
  cfg.ablation.use_partition = false;
  const auto train = world::make_dataset(cfg.world, 8, 41);
  const auto val = world::make_dataset(cfg.world, 4, 43, 100);
  const fs::path root = fresh_dir("baseline");
  const auto res = pipeline::run_stage_student(cfg, train, val, {}, {}, root, cfg.seed);
  for (const auto& row : res.epochs) {
    CHECK(row.loss_total == row.loss_det);
    CHECK(row.loss_lidar_feat == 0.0);
    CHECK(row.loss_label_feat == 0.0);
    CHECK(row.loss_lidar_resp == 0.0);
  }
}

TEST_CASE("label distillation without a checkpoint is a missing-artifact error") {
  auto cfg = oracle::tiny_config();
  cfg.ablation.use_lidar_distill = false;
  cfg.ablation.use_label_distill = true;
  const auto scenes = world::make_dataset(cfg.world, 4, 47);
  bool threw = false;
  try {
    pipeline::run_stage_student(cfg, scenes, scenes, {}, {}, fresh_dir("missing"), cfg.seed);
  } catch (const Error& e) {
    threw = true;
    CHECK(e.kind() == ErrorKind::kMissingArtifact);
  }
  CHECK(threw);
}

TEST_CASE("manifest is written before any artifacts") {
  const fs::path dir = fresh_dir("manifest");
  pipeline::RunManifest m;
  m.command = "test";
  m.config_hash = "abc";
  m.seed = 3;
  m.revision = pipeline::revision_string();
  m.timestamp = iso8601_now();
  m.out_dir = dir.string();
  pipeline::write_manifest(dir, m);
  CHECK(fs::exists(dir / "manifest.json"));
  const std::string text = read_file(dir / "manifest.json");
  CHECK(text.find("\"command\": \"test\"") != std::string::npos);
}

}  // TEST_SUITE
