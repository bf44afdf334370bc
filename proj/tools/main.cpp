#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "bevkd/config.hpp"
#include "bevkd/pipeline.hpp"
#include "bevkd/synthworld.hpp"
#include "bevkd/util.hpp"

namespace fs = std::filesystem;
using bevkd::Error;
using bevkd::ErrorKind;

namespace {

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kMissingArtifact: return 3;
    case ErrorKind::kRuntime: return 1;
  }
  return 1;
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

bevkd::config::ExperimentConfig load_config(const CommonArgs& args) {
  auto cfg = bevkd::config::ExperimentConfig::load(args.config_path);
  if (args.seed) {
    cfg.seed = *args.seed;
    cfg.world.seed = *args.seed;
  }
  return cfg;
}

void emit_manifest(const std::string& command, const CommonArgs& args,
                   const bevkd::config::ExperimentConfig& cfg, int argc, char** argv) {
  bevkd::pipeline::RunManifest m;
  m.command = command;
  m.config_path = args.config_path;
  m.config_hash = bevkd::hex64(cfg.hash());
  m.seed = cfg.seed;
  m.revision = bevkd::pipeline::revision_string();
  m.timestamp = bevkd::iso8601_now();
  m.out_dir = args.out_dir;
  for (int i = 0; i < argc; ++i) m.args.emplace_back(argv[i]);
  bevkd::pipeline::write_manifest(args.out_dir, m);
}

bevkd::world::Dataset load_split(const fs::path& data_dir, const std::string& split) {
  const fs::path path = data_dir / (split + ".bin");
  if (!fs::exists(path))
    throw Error(ErrorKind::kMissingArtifact, "dataset file not found: " + path.string());
  return bevkd::world::load_dataset(path);
}

void print_metrics(const std::string& label, const bevkd::evalkit::Metrics& m) {
  std::cout << label << ": mAP " << m.map << "  NDS* " << m.nds << "  mATE " << m.errors.mate
            << "  mASE " << m.errors.mase << "  mAOE " << m.errors.maoe << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bevkd: synthetic BEV detection with cross-modal knowledge distillation"};
  app.require_subcommand(1);

  const char* out_root_env = std::getenv("BEVKD_OUT_ROOT");
  const std::string out_root = out_root_env ? out_root_env : ".";

  CommonArgs args;
  std::string stage, data_dir, axis = "components", ckpt_path;
  std::string teacher_ckpt, labelenc_ckpt, student_ckpt, run_dir;
  int n_seeds = 3;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* copt = cmd->add_option("--config", args.config_path, "experiment config (JSON)");
    if (needs_config) copt->required();
    cmd->add_option("--out", args.out_dir,
                    "output directory (default: $BEVKD_OUT_ROOT/runs/<command>)");
    cmd->add_option("--seed", args.seed, "override the config seed");
  };
  auto default_out = [&](const std::string& name) {
    if (args.out_dir.empty()) args.out_dir = out_root + "/runs/" + name;
  };

  auto* gen = app.add_subcommand("gen-data", "generate train/val scene datasets");
  add_common(gen, true);

  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, true);
  train->add_option("--stage", stage, "teacher | labelenc | student")->required();
  train->add_option("--data", data_dir, "dataset directory (train.bin / val.bin)")->required();
  train->add_option("--teacher-ckpt", teacher_ckpt, "teacher checkpoint path");
  train->add_option("--labelenc-ckpt", labelenc_ckpt, "label encoder checkpoint path");
  train->add_option("--student-ckpt", student_ckpt,
                    "baseline student checkpoint (labelenc-variant encoder training)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--config", args.config_path, "experiment config (defaults to checkpoint snapshot)");
  eval->add_option("--out", args.out_dir,
                   "output directory (default: $BEVKD_OUT_ROOT/runs/eval)");
  eval->add_option("--seed", args.seed, "override the config seed");
  eval->add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
  eval->add_option("--data", data_dir, "dataset directory or file")->required();

  auto* ablate = app.add_subcommand("ablate", "run an ablation axis over seeds");
  add_common(ablate, true);
  ablate->add_option("--axis", axis, "components | channel_ratio | labelenc_variant | distance")
      ->required();
  ablate->add_option("--data", data_dir, "dataset directory")->required();
  ablate->add_option("--seeds", n_seeds, "number of seeds")->default_val(3);

  auto* report = app.add_subcommand("report", "summarize a finished run directory");
  report->add_option("--run", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      default_out("gen-data");
      auto cfg = load_config(args);
      emit_manifest("gen-data", args, cfg, argc, argv);
      const fs::path out(args.out_dir);
      auto train_scenes = bevkd::world::make_dataset(cfg.world, cfg.data.train_scenes,
                                                     cfg.train_data_seed(), 0);
      bevkd::world::serialize_dataset(train_scenes, cfg.world, out / "train.bin");
      auto val_scenes = bevkd::world::make_dataset(cfg.world, cfg.data.val_scenes,
                                                   cfg.val_data_seed(), cfg.data.train_scenes);
      bevkd::world::serialize_dataset(val_scenes, cfg.world, out / "val.bin");
      std::cout << "wrote " << train_scenes.size() << " train / " << val_scenes.size()
                << " val scenes to " << out.string() << "\n";
    } else if (train->parsed()) {
      default_out("train-" + stage);
      auto cfg = load_config(args);
      emit_manifest("train:" + stage, args, cfg, argc, argv);
      const auto train_ds = load_split(data_dir, "train");
      const auto val_ds = load_split(data_dir, "val");
      const std::uint64_t train_seed = cfg.seed;
      if (stage == "teacher") {
        auto res = bevkd::pipeline::run_stage_teacher(cfg, train_ds.scenes, val_ds.scenes,
                                                      args.out_dir, train_seed);
        print_metrics("teacher val", res.final_metrics);
      } else if (stage == "labelenc") {
        if (teacher_ckpt.empty())
          throw Error(ErrorKind::kMissingArtifact, "labelenc stage requires --teacher-ckpt");
        auto res = bevkd::pipeline::run_stage_labelenc(cfg, train_ds.scenes, val_ds.scenes,
                                                       teacher_ckpt, args.out_dir, train_seed,
                                                       student_ckpt);
        print_metrics("autoencoder val", res.autoencoder_metrics);
      } else if (stage == "student") {
        auto res = bevkd::pipeline::run_stage_student(cfg, train_ds.scenes, val_ds.scenes,
                                                      teacher_ckpt, labelenc_ckpt, args.out_dir,
                                                      train_seed);
        print_metrics("student val", res.final_metrics);
      } else {
        throw Error(ErrorKind::kConfig, "unknown stage '" + stage + "'");
      }
    } else if (eval->parsed()) {
      default_out("eval");
      const auto ck = bevkd::nn::load_checkpoint(ckpt_path);
      auto cfg = args.config_path.empty()
                     ? bevkd::config::ExperimentConfig::from_json_string(ck.config_json,
                                                                         "checkpoint config")
                     : load_config(args);
      emit_manifest("eval", args, cfg, argc, argv);
      fs::path data_path(data_dir);
      if (fs::is_directory(data_path)) data_path /= "val.bin";
      const auto ds = bevkd::world::load_dataset(data_path);

      bevkd::evalkit::Metrics metrics;
      nlohmann::json j;
      if (ck.kind == "teacher") {
        auto model = bevkd::pipeline::load_teacher(cfg, ckpt_path);
        metrics = bevkd::pipeline::evaluate_teacher(model, ds.scenes, cfg);
      } else if (ck.kind == "student") {
        auto model = bevkd::pipeline::load_student(cfg, ckpt_path);
        metrics = bevkd::pipeline::evaluate_student(model, ds.scenes, cfg);
        const auto buckets = bevkd::pipeline::bucketed_student_metrics(model, ds.scenes, cfg);
        j["buckets"] = {{"split", buckets.split},
                        {"near", {{"mATE", buckets.near_bucket.errors.mate},
                                  {"mASE", buckets.near_bucket.errors.mase},
                                  {"mAOE", buckets.near_bucket.errors.maoe},
                                  {"mAP", buckets.near_bucket.map},
                                  {"gt_count", buckets.near_bucket.gt_count}}},
                        {"far", {{"mATE", buckets.far_bucket.errors.mate},
                                 {"mASE", buckets.far_bucket.errors.mase},
                                 {"mAOE", buckets.far_bucket.errors.maoe},
                                 {"mAP", buckets.far_bucket.map},
                                 {"gt_count", buckets.far_bucket.gt_count}}}};
      } else {
        throw Error(ErrorKind::kConfig, "eval supports teacher and student checkpoints, got '" +
                                            ck.kind + "'");
      }
      j["schema_version"] = 1;
      j["checkpoint"] = ckpt_path;
      j["dataset"] = data_path.string();
      j["metrics"] = {{"mAP", metrics.map},
                      {"NDS_star", metrics.nds},
                      {"mATE", metrics.errors.mate},
                      {"mASE", metrics.errors.mase},
                      {"mAOE", metrics.errors.maoe},
                      {"gt_count", metrics.gt_count},
                      {"pred_count", metrics.pred_count}};
      bevkd::atomic_write_file(fs::path(args.out_dir) / "metrics.json", j.dump(2) + "\n");
      bevkd::CsvWriter csv({"mAP", "NDS_star", "mATE", "mASE", "mAOE"});
      csv.add_row({bevkd::format_double(metrics.map), bevkd::format_double(metrics.nds),
                   bevkd::format_double(metrics.errors.mate),
                   bevkd::format_double(metrics.errors.mase),
                   bevkd::format_double(metrics.errors.maoe)});
      csv.write(fs::path(args.out_dir) / "metrics.csv");
      print_metrics(ck.kind + " eval", metrics);
    } else if (ablate->parsed()) {
      default_out("ablate-" + axis);
      auto cfg = load_config(args);
      emit_manifest("ablate:" + axis, args, cfg, argc, argv);
      const auto train_ds = load_split(data_dir, "train");
      const auto val_ds = load_split(data_dir, "val");
      const auto rep = bevkd::pipeline::run_ablation_matrix(cfg, axis, train_ds.scenes,
                                                            val_ds.scenes, args.out_dir, n_seeds);
      std::cout << "axis " << rep.axis << " -> " << rep.csv_path.string() << "\n";
      for (const auto& row : rep.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) std::cout << (i ? "  " : "") << row[i];
        std::cout << "\n";
      }
    } else if (report->parsed()) {
      const fs::path run(run_dir);
      if (!fs::exists(run))
        throw Error(ErrorKind::kMissingArtifact, "run directory not found: " + run_dir);
      bool found = false;
      for (const auto& entry : fs::recursive_directory_iterator(run)) {
        if (!entry.is_regular_file()) continue;
        const auto& p = entry.path();
        if (p.filename() == "report.json" || p.extension() == ".csv") {
          std::cout << "==> " << p.string() << "\n" << bevkd::read_file(p) << "\n";
          found = true;
        }
      }
      if (!found) std::cout << "no reports found under " << run_dir << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
