#include "bevkd/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bevkd/plots.hpp"
#include "bevkd/util.hpp"

#ifndef BEVKD_REVISION
#define BEVKD_REVISION "unknown"
#endif

namespace bevkd::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string revision_string() { return BEVKD_REVISION; }

// ---------------------------------------------------------------------------
// Factories and loaders

det::TeacherModel make_teacher(const config::ExperimentConfig& cfg, Rng& rng) {
  return det::TeacherModel(cfg.world.num_classes, cfg.model.teacher_channels, cfg.model.head_width,
                           cfg.grid(), rng);
}

det::StudentModel make_student(const config::ExperimentConfig& cfg, Rng& rng) {
  return det::StudentModel(cfg.world.num_classes, cfg.model.student_channels, cfg.model.depth_bins,
                           cfg.model.column_width, cfg.model.head_width, cfg.world, cfg.grid(), rng);
}

labelenc::LabelEncoder make_label_encoder(const config::ExperimentConfig& cfg, Rng& rng) {
  return labelenc::LabelEncoder(cfg.world.num_classes, cfg.model.embed_dim,
                                cfg.model.teacher_channels, cfg.grid(), cfg.position_blind, rng);
}

namespace {

void check_kind(const nn::Checkpoint& ck, const std::string& expected, const fs::path& path) {
  if (ck.kind != expected)
    throw Error(ErrorKind::kRuntime, path.string() + ": expected a " + expected +
                                         " checkpoint, found '" + ck.kind + "'");
}

}  // namespace

det::TeacherModel load_teacher(const config::ExperimentConfig& cfg, const fs::path& path) {
  const nn::Checkpoint ck = nn::load_checkpoint(path);
  check_kind(ck, "teacher", path);
  Rng rng(0);
  det::TeacherModel model = make_teacher(cfg, rng);
  nn::StateDict state;
  model.state(state);
  ck.load_into(state);
  return model;
}

det::StudentModel load_student(const config::ExperimentConfig& cfg, const fs::path& path) {
  const nn::Checkpoint ck = nn::load_checkpoint(path);
  check_kind(ck, "student", path);
  Rng rng(0);
  det::StudentModel model = make_student(cfg, rng);
  nn::StateDict state;
  model.state(state);
  ck.load_into(state);
  return model;
}

labelenc::LabelEncoder load_label_encoder(const config::ExperimentConfig& cfg, const fs::path& path) {
  const nn::Checkpoint ck = nn::load_checkpoint(path);
  check_kind(ck, "labelenc", path);
  Rng rng(0);
  labelenc::LabelEncoder enc = make_label_encoder(cfg, rng);
  nn::StateDict state;
  enc.state(state);
  ck.load_into(state);
  return enc;
}

labelenc::EncoderTrainContext make_encoder_context(const config::ExperimentConfig& cfg) {
  labelenc::EncoderTrainContext ctx;
  ctx.world = &cfg.world;
  ctx.grid = cfg.grid();
  ctx.heatmap = cfg.heatmap;
  ctx.weights = cfg.losses;
  ctx.tau = cfg.tau;
  ctx.head_width = cfg.model.head_width;
  ctx.align_weight = cfg.labelenc_align_weight;
  ctx.score_thresh = cfg.eval.score_thresh;
  ctx.k_max = cfg.eval.k_max;
  ctx.thresholds = cfg.eval.thresholds;
  ctx.tp_threshold = cfg.eval.tp_threshold;
  return ctx;
}

bev::ForegroundMask feature_mask(const bev::Heatmap& heatmap, double tau, bool soft) {
  bev::ForegroundMask mask = bev::foreground_mask(heatmap, tau);
  if (!soft) return mask;
  const std::int64_t m = heatmap.data.size(0);
  const std::int64_t hw = heatmap.grid.height * heatmap.grid.width;
  for (std::int64_t k = 0; k < hw; ++k) {
    if (mask.mask[k] == 0.0) continue;
    double best = 0.0;
    for (std::int64_t c = 0; c < m; ++c)
      best = std::max(best, heatmap.data[c * hw + k]);
    mask.mask[k] = best;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

namespace {

constexpr std::size_t kEvalChunk = 16;

void collect_teacher_predictions(det::TeacherModel& teacher, const std::vector<world::Scene>& scenes,
                                 const config::ExperimentConfig& cfg,
                                 std::vector<evalkit::PredBox>* preds,
                                 std::vector<evalkit::GtBox>* gts) {
  const auto grid = cfg.grid();
  std::int64_t det_id = 0;
  for (std::size_t start = 0; start < scenes.size(); start += kEvalChunk) {
    const std::size_t end = std::min(scenes.size(), start + kEvalChunk);
    std::vector<const world::Scene*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&scenes[i]);
    const Tensor input = teacher.featurize_batch(batch);
    const auto out = teacher.forward(input, /*train=*/false, /*cache=*/false);
    for (std::size_t i = start; i < end; ++i) {
      const auto maps = det::slice_maps(out.heatmap, out.regress, static_cast<std::int64_t>(i - start));
      for (const auto& d : det::head_decode(maps, grid, cfg.eval.score_thresh, cfg.eval.k_max))
        preds->push_back({d.box, d.score, scenes[i].scene_id, det_id++});
      for (const auto& b : scenes[i].boxes) gts->push_back({b, scenes[i].scene_id});
    }
  }
}

void collect_student_predictions(det::StudentModel& student, const std::vector<world::Scene>& scenes,
                                 const config::ExperimentConfig& cfg,
                                 std::vector<evalkit::PredBox>* preds,
                                 std::vector<evalkit::GtBox>* gts) {
  const auto grid = cfg.grid();
  std::int64_t det_id = 0;
  for (std::size_t start = 0; start < scenes.size(); start += kEvalChunk) {
    const std::size_t end = std::min(scenes.size(), start + kEvalChunk);
    std::vector<const world::Scene*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&scenes[i]);
    const Tensor pano = student.panorama_batch(batch);
    const auto out = student.forward(pano, /*train=*/false, /*cache=*/false);
    for (std::size_t i = start; i < end; ++i) {
      const auto maps = det::slice_maps(out.heatmap, out.regress, static_cast<std::int64_t>(i - start));
      for (const auto& d : det::head_decode(maps, grid, cfg.eval.score_thresh, cfg.eval.k_max))
        preds->push_back({d.box, d.score, scenes[i].scene_id, det_id++});
      for (const auto& b : scenes[i].boxes) gts->push_back({b, scenes[i].scene_id});
    }
  }
}

}  // namespace

evalkit::Metrics evaluate_teacher(det::TeacherModel& teacher, const std::vector<world::Scene>& scenes,
                                  const config::ExperimentConfig& cfg) {
  std::vector<evalkit::PredBox> preds;
  std::vector<evalkit::GtBox> gts;
  collect_teacher_predictions(teacher, scenes, cfg, &preds, &gts);
  return evalkit::evaluate(preds, gts, cfg.world.num_classes, cfg.eval.thresholds,
                           cfg.eval.tp_threshold);
}

evalkit::Metrics evaluate_student(det::StudentModel& student, const std::vector<world::Scene>& scenes,
                                  const config::ExperimentConfig& cfg) {
  std::vector<evalkit::PredBox> preds;
  std::vector<evalkit::GtBox> gts;
  collect_student_predictions(student, scenes, cfg, &preds, &gts);
  return evalkit::evaluate(preds, gts, cfg.world.num_classes, cfg.eval.thresholds,
                           cfg.eval.tp_threshold);
}

evalkit::BucketMetrics bucketed_student_metrics(det::StudentModel& student,
                                                const std::vector<world::Scene>& scenes,
                                                const config::ExperimentConfig& cfg) {
  std::vector<evalkit::PredBox> preds;
  std::vector<evalkit::GtBox> gts;
  collect_student_predictions(student, scenes, cfg, &preds, &gts);
  return evalkit::bucket_by_distance(preds, gts, cfg.world.num_classes, cfg.eval.thresholds,
                                     cfg.eval.tp_threshold, cfg.far_split());
}

// ---------------------------------------------------------------------------
// Metrics / report serialization

namespace {

json metrics_to_json(const evalkit::Metrics& m) {
  return {{"mAP", m.map},          {"NDS_star", m.nds},     {"mATE", m.errors.mate},
          {"mASE", m.errors.mase}, {"mAOE", m.errors.maoe}, {"gt_count", m.gt_count},
          {"pred_count", m.pred_count}};
}

evalkit::Metrics metrics_from_json(const json& j) {
  evalkit::Metrics m;
  m.map = j.at("mAP").get<double>();
  m.nds = j.at("NDS_star").get<double>();
  m.errors.mate = j.at("mATE").get<double>();
  m.errors.mase = j.at("mASE").get<double>();
  m.errors.maoe = j.at("mAOE").get<double>();
  m.gt_count = j.value("gt_count", 0);
  m.pred_count = j.value("pred_count", 0);
  return m;
}

void write_epoch_csv(const fs::path& path, const std::vector<EpochRow>& rows) {
  CsvWriter csv({"epoch", "lr", "loss_total", "loss_det", "loss_lidar_feat", "loss_label_feat",
                 "loss_lidar_resp", "val_mAP", "val_NDS_star", "val_mATE", "val_mASE", "val_mAOE"});
  for (const auto& r : rows) {
    csv.add_row({std::to_string(r.epoch), format_double(r.lr), format_double(r.loss_total),
                 format_double(r.loss_det), format_double(r.loss_lidar_feat),
                 format_double(r.loss_label_feat), format_double(r.loss_lidar_resp),
                 r.has_eval ? format_double(r.eval.map) : "",
                 r.has_eval ? format_double(r.eval.nds) : "",
                 r.has_eval ? format_double(r.eval.errors.mate) : "",
                 r.has_eval ? format_double(r.eval.errors.mase) : "",
                 r.has_eval ? format_double(r.eval.errors.maoe) : ""});
  }
  csv.write(path);
}

struct ReportContext {
  std::string stage;
  const config::ExperimentConfig* cfg = nullptr;
  std::uint64_t train_seed = 0;
};

void write_stage_report(const fs::path& out_dir, const ReportContext& rc, const StageResult& result,
                        const json& extra = json::object()) {
  json j;
  j["stage"] = rc.stage;
  j["config_hash"] = hex64(rc.cfg->hash());
  j["train_seed"] = rc.train_seed;
  j["checkpoint"] = result.checkpoint.string();
  j["checkpoint_hash"] = hex64(result.checkpoint_hash);
  j["final_metrics"] = metrics_to_json(result.final_metrics);
  if (rc.stage == "student") {
    j["buckets"] = {{"split", result.buckets.split},
                    {"near", metrics_to_json(result.buckets.near_bucket)},
                    {"far", metrics_to_json(result.buckets.far_bucket)}};
    j["frozen_audit"] = {{"teacher_before", hex64(result.frozen_teacher_hash_before)},
                         {"teacher_after", hex64(result.frozen_teacher_hash_after)},
                         {"labelenc_before", hex64(result.frozen_labelenc_hash_before)},
                         {"labelenc_after", hex64(result.frozen_labelenc_hash_after)}};
  }
  if (rc.stage == "labelenc") {
    j["autoencoder_metrics"] = metrics_to_json(result.autoencoder_metrics);
    j["frozen_audit"] = {{"teacher_before", hex64(result.frozen_teacher_hash_before)},
                         {"teacher_after", hex64(result.frozen_teacher_hash_after)}};
  }
  json epochs = json::array();
  for (const auto& r : result.epochs) {
    json e = {{"epoch", r.epoch}, {"lr", r.lr}, {"loss_total", r.loss_total}};
    if (r.has_eval) e["eval"] = metrics_to_json(r.eval);
    epochs.push_back(e);
  }
  j["epochs"] = epochs;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  atomic_write_file(out_dir / "report.json", j.dump(2) + "\n");
}

// Reuse a finished run when its report matches this config and seed.
std::optional<StageResult> load_stage_report(const fs::path& out_dir, const std::string& stage,
                                             const config::ExperimentConfig& cfg,
                                             std::uint64_t train_seed) {
  const fs::path path = out_dir / "report.json";
  if (!fs::exists(path)) return std::nullopt;
  try {
    const json j = json::parse(read_file(path));
    if (j.at("stage").get<std::string>() != stage) return std::nullopt;
    if (j.at("config_hash").get<std::string>() != hex64(cfg.hash())) return std::nullopt;
    if (j.at("train_seed").get<std::uint64_t>() != train_seed) return std::nullopt;
    StageResult r;
    r.checkpoint = fs::path(j.at("checkpoint").get<std::string>());
    if (!fs::exists(r.checkpoint)) return std::nullopt;
    r.final_metrics = metrics_from_json(j.at("final_metrics"));
    if (j.contains("buckets")) {
      r.buckets.split = j["buckets"].at("split").get<double>();
      r.buckets.near_bucket = metrics_from_json(j["buckets"].at("near"));
      r.buckets.far_bucket = metrics_from_json(j["buckets"].at("far"));
    }
    if (j.contains("autoencoder_metrics"))
      r.autoencoder_metrics = metrics_from_json(j.at("autoencoder_metrics"));
    return r;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void prepare_run_dir(const config::ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir / "metrics");
  fs::create_directories(out_dir / "checkpoints");
  cfg.save(out_dir / "config.json");
}

void shuffle_indices(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1],
              order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 0: teacher pretraining

StageResult run_stage_teacher(const config::ExperimentConfig& cfg,
                              const std::vector<world::Scene>& train,
                              const std::vector<world::Scene>& val, const fs::path& out_dir,
                              std::uint64_t train_seed) {
  cfg.validate();
  prepare_run_dir(cfg, out_dir);
  const auto grid = cfg.grid();
  const TrainSchedule& sched = cfg.teacher_stage;

  Rng root(train_seed);
  Rng init_rng = root.child(0x7e);
  det::TeacherModel teacher = make_teacher(cfg, init_rng);
  std::vector<nn::ParamRef> params;
  teacher.params(params);
  nn::AdamW opt(sched.lr, sched.weight_decay);
  Rng shuffle_rng = root.child(0x5f);

  StageResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= sched.epochs; ++epoch) {
    opt.set_lr(sched.lr_at_epoch(epoch));
    shuffle_indices(order, shuffle_rng);
    double epoch_loss = 0.0;
    std::int64_t seen = 0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(sched.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(sched.batch_size));
      const std::int64_t bsz = static_cast<std::int64_t>(end - start);
      std::vector<const world::Scene*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&train[order[k]]);

      nn::zero_grads(params);
      const Tensor input = teacher.featurize_batch(batch);
      auto out = teacher.forward(input, /*train=*/true);

      Tensor d_hm(out.heatmap.shape());
      Tensor d_reg(out.regress.shape());
      double batch_loss = 0.0;
      for (std::int64_t slot = 0; slot < bsz; ++slot) {
        const auto gt = det::encode_gt(*batch[static_cast<std::size_t>(slot)], grid,
                                       cfg.world.num_classes, cfg.heatmap);
        const auto parts = distill::detection_loss(out.heatmap, out.regress, nullptr, slot, 0, gt,
                                                   nullptr, cfg.losses, cfg.losses.focal_gamma,
                                                   &d_hm, &d_reg, nullptr);
        batch_loss += parts.weighted_total(cfg.losses);
      }
      batch_loss /= static_cast<double>(bsz);
      if (!std::isfinite(batch_loss))
        throw Error(ErrorKind::kRuntime, "teacher training diverged: non-finite loss at epoch " +
                                             std::to_string(epoch));
      d_hm.scale(1.0 / static_cast<double>(bsz));
      d_reg.scale(1.0 / static_cast<double>(bsz));
      teacher.backward(d_hm, d_reg);
      opt.step(params);
      epoch_loss += batch_loss * static_cast<double>(bsz);
      seen += bsz;
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = opt.lr();
    row.loss_total = row.loss_det = epoch_loss / static_cast<double>(seen);
    const bool eval_now =
        epoch == sched.epochs || (sched.eval_every > 0 && epoch % sched.eval_every == 0);
    if (eval_now) {
      row.eval = evaluate_teacher(teacher, val, cfg);
      row.has_eval = true;
      result.final_metrics = row.eval;
    }
    result.epochs.push_back(row);
    write_epoch_csv(out_dir / "metrics" / "teacher.csv", result.epochs);
  }

  nn::StateDict state;
  teacher.state(state);
  result.checkpoint = out_dir / "checkpoints" / "teacher.ckpt";
  nn::save_checkpoint(result.checkpoint, "teacher", cfg.to_json_string(), state);
  result.checkpoint_hash = nn::params_hash(state);
  write_stage_report(out_dir, {"teacher", &cfg, train_seed}, result);
  return result;
}

// ---------------------------------------------------------------------------
// Stage 1: label encoder

StageResult run_stage_labelenc(const config::ExperimentConfig& cfg,
                               const std::vector<world::Scene>& train,
                               const std::vector<world::Scene>& val, const fs::path& teacher_ckpt,
                               const fs::path& out_dir, std::uint64_t train_seed,
                               const fs::path& baseline_student_ckpt) {
  cfg.validate();
  prepare_run_dir(cfg, out_dir);
  const auto variant = labelenc::variant_from_string(cfg.ablation.label_encoder_variant);

  det::TeacherModel teacher = load_teacher(cfg, teacher_ckpt);
  std::optional<det::StudentModel> baseline;
  if (variant == labelenc::EncoderVariant::kLabelEnc) {
    if (baseline_student_ckpt.empty())
      throw Error(ErrorKind::kMissingArtifact,
                  "labelenc variant requires --student-ckpt with a trained baseline student");
    baseline = load_student(cfg, baseline_student_ckpt);
  }

  Rng root(train_seed);
  Rng init_rng = root.child(0x1a);
  labelenc::LabelEncoder encoder = make_label_encoder(cfg, init_rng);
  Rng train_rng = root.child(0x1b);

  const auto ctx = make_encoder_context(cfg);
  const auto train_result =
      labelenc::train_label_encoder(encoder, teacher, train, val, ctx, cfg.labelenc_stage, variant,
                                    baseline ? &*baseline : nullptr, train_rng);

  StageResult result;
  for (std::size_t e = 0; e < train_result.epoch_losses.size(); ++e) {
    EpochRow row;
    row.epoch = static_cast<int>(e + 1);
    row.lr = cfg.labelenc_stage.lr_at_epoch(row.epoch);
    row.loss_total = row.loss_det = train_result.epoch_losses[e];
    result.epochs.push_back(row);
  }
  result.autoencoder_metrics = train_result.autoencoder_metrics;
  result.final_metrics = train_result.autoencoder_metrics;
  result.frozen_teacher_hash_before = train_result.teacher_hash_before;
  result.frozen_teacher_hash_after = train_result.teacher_hash_after;
  write_epoch_csv(out_dir / "metrics" / "labelenc.csv", result.epochs);

  // Table-1-style report row: identifiers plus the four metric columns.
  CsvWriter table({"variant", "seed", "mAP", "NDS_star", "mATE", "mAOE"});
  table.add_row({cfg.ablation.label_encoder_variant, std::to_string(train_seed),
                 format_double(result.autoencoder_metrics.map),
                 format_double(result.autoencoder_metrics.nds),
                 format_double(result.autoencoder_metrics.errors.mate),
                 format_double(result.autoencoder_metrics.errors.maoe)});
  table.write(out_dir / "metrics" / "autoencoder.csv");

  nn::StateDict state;
  encoder.state(state);
  result.checkpoint = out_dir / "checkpoints" / "labelenc.ckpt";
  nn::save_checkpoint(result.checkpoint, "labelenc", cfg.to_json_string(), state);
  result.checkpoint_hash = nn::params_hash(state);
  write_stage_report(out_dir, {"labelenc", &cfg, train_seed}, result,
                     {{"variant", cfg.ablation.label_encoder_variant}});
  return result;
}

// ---------------------------------------------------------------------------
// Stage 2: student distillation

StageResult run_stage_student(const config::ExperimentConfig& cfg,
                              const std::vector<world::Scene>& train,
                              const std::vector<world::Scene>& val, const fs::path& teacher_ckpt,
                              const fs::path& labelenc_ckpt, const fs::path& out_dir,
                              std::uint64_t train_seed) {
  cfg.validate();
  prepare_run_dir(cfg, out_dir);
  const auto grid = cfg.grid();
  const TrainSchedule& sched = cfg.student_stage;
  const auto& sw = cfg.ablation;
  const std::int64_t c_s = cfg.model.student_channels;
  const std::int64_t c_t = cfg.model.teacher_channels;

  if (sw.use_lidar_distill && teacher_ckpt.empty())
    throw Error(ErrorKind::kMissingArtifact,
                "lidar distillation enabled but no teacher checkpoint provided");
  if (sw.use_label_distill && labelenc_ckpt.empty())
    throw Error(ErrorKind::kMissingArtifact,
                "label distillation enabled but no label encoder checkpoint provided");

  std::optional<det::TeacherModel> teacher;
  std::optional<labelenc::LabelEncoder> encoder;
  StageResult result;
  if (sw.use_lidar_distill) {
    teacher = load_teacher(cfg, teacher_ckpt);
    nn::StateDict ts;
    teacher->state(ts);
    result.frozen_teacher_hash_before = nn::params_hash(ts);
  }
  if (sw.use_label_distill) {
    encoder = load_label_encoder(cfg, labelenc_ckpt);
    nn::StateDict ls;
    encoder->state(ls);
    result.frozen_labelenc_hash_before = nn::params_hash(ls);
  }

  Rng root(train_seed);
  Rng init_rng = root.child(0x57);
  det::StudentModel student = make_student(cfg, init_rng);
  std::optional<det::AdaptModule> adapt_lidar, adapt_label;
  const std::int64_t lidar_in = sw.use_partition ? cfg.partition.n_lidar : c_s;
  const std::int64_t label_in = sw.use_partition ? cfg.partition.n_label : c_s;
  if (sw.use_lidar_distill) {
    if (lidar_in <= 0)
      throw Error(ErrorKind::kConfig, "lidar distillation enabled with an empty lidar group");
    Rng r = root.child(0x58);
    adapt_lidar.emplace(lidar_in, c_t, cfg.model.adapt_layers, r);
  }
  if (sw.use_label_distill) {
    if (label_in <= 0)
      throw Error(ErrorKind::kConfig, "label distillation enabled with an empty label group");
    Rng r = root.child(0x59);
    adapt_label.emplace(label_in, c_t, cfg.model.adapt_layers, r);
  }

  std::vector<nn::ParamRef> params;
  student.params(params);
  if (adapt_lidar) adapt_lidar->params("adapt_lidar", params);
  if (adapt_label) adapt_label->params("adapt_label", params);
  nn::AdamW opt(sched.lr, sched.weight_decay);
  Rng shuffle_rng = root.child(0x5f);

  const std::int64_t hw = grid.height * grid.width;
  const std::int64_t a_bins = cfg.world.azimuth_bins;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= sched.epochs; ++epoch) {
    opt.set_lr(sched.lr_at_epoch(epoch));
    shuffle_indices(order, shuffle_rng);
    double ep_total = 0.0, ep_det = 0.0, ep_lf = 0.0, ep_bf = 0.0, ep_resp = 0.0;
    std::int64_t seen = 0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(sched.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(sched.batch_size));
      const std::int64_t bsz = static_cast<std::int64_t>(end - start);
      const double inv_b = 1.0 / static_cast<double>(bsz);
      std::vector<const world::Scene*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&train[order[k]]);

      nn::zero_grads(params);
      const Tensor pano = student.panorama_batch(batch);
      auto s_out = student.forward(pano, /*train=*/true);

      // Per-scene targets and masks for this batch.
      std::vector<det::GtTargets> gts;
      std::vector<bev::ForegroundMask> masks;
      std::vector<std::vector<std::int32_t>> depth_tgts;
      for (const auto* scene : batch) {
        gts.push_back(det::encode_gt(*scene, grid, cfg.world.num_classes, cfg.heatmap));
        masks.push_back(feature_mask(gts.back().heatmap, cfg.tau, cfg.soft_mask));
        depth_tgts.push_back(det::depth_bin_targets(*scene, cfg.world, cfg.model.depth_bins,
                                                    student.max_range()));
      }

      Tensor d_hm(s_out.heatmap.shape());
      Tensor d_reg(s_out.regress.shape());
      Tensor d_depth(s_out.depth_probs.shape());
      Tensor d_f_img(s_out.f_image.shape());

      double det_sum = 0.0;
      for (std::int64_t slot = 0; slot < bsz; ++slot) {
        const auto parts = distill::detection_loss(
            s_out.heatmap, s_out.regress, &s_out.depth_probs, slot, a_bins,
            gts[static_cast<std::size_t>(slot)], &depth_tgts[static_cast<std::size_t>(slot)],
            cfg.losses, cfg.losses.focal_gamma, &d_hm, &d_reg, &d_depth);
        det_sum += parts.weighted_total(cfg.losses);
      }
      d_hm.scale(inv_b);
      d_reg.scale(inv_b);
      d_depth.scale(inv_b);

      double lf_sum = 0.0, bf_sum = 0.0, resp_sum = 0.0;
      std::optional<det::TeacherModel::Out> t_out;
      if (sw.use_lidar_distill) {
        const Tensor t_in = teacher->featurize_batch(batch);
        t_out = teacher->forward(t_in, /*train=*/false, /*cache=*/false);

        // Response distillation: teacher predictions as soft labels.
        for (std::int64_t slot = 0; slot < bsz; ++slot) {
          const auto& mask = masks[static_cast<std::size_t>(slot)];
          const auto t_maps = det::slice_maps(t_out->heatmap, t_out->regress, slot);
          const auto s_maps = det::slice_maps(s_out.heatmap, s_out.regress, slot);
          Tensor d_shm(t_maps.heatmap.shape());
          Tensor d_sreg(t_maps.regress.shape());
          resp_sum += distill::response_loss(t_maps.heatmap, t_maps.regress, s_maps.heatmap,
                                             s_maps.regress, mask.mask, mask.n_p,
                                             cfg.losses.focal_gamma, &d_shm, &d_sreg);
          const double scale = cfg.losses.lambda_lidar_resp * inv_b;
          const std::int64_t m = d_shm.size(0);
          for (std::int64_t k = 0; k < m * hw; ++k)
            d_hm[slot * m * hw + k] += scale * d_shm[k];
          for (std::int64_t k = 0; k < det::kRegressChannels * hw; ++k)
            d_reg[slot * det::kRegressChannels * hw + k] += scale * d_sreg[k];
        }

        // Feature imitation on the lidar group.
        const Tensor group = sw.use_partition
                                 ? distill::slice_channels(s_out.f_image, cfg.partition.lidar_begin(),
                                                           cfg.partition.n_lidar)
                                 : s_out.f_image;
        const Tensor adapted = adapt_lidar->forward(group);
        Tensor d_adapted(adapted.shape());
        for (std::int64_t slot = 0; slot < bsz; ++slot) {
          const auto& mask = masks[static_cast<std::size_t>(slot)];
          Tensor target({c_t, grid.height, grid.width});
          std::copy(t_out->f_lidar.data() + slot * c_t * hw,
                    t_out->f_lidar.data() + (slot + 1) * c_t * hw, target.data());
          Tensor adapted_slot({c_t, grid.height, grid.width});
          std::copy(adapted.data() + slot * c_t * hw, adapted.data() + (slot + 1) * c_t * hw,
                    adapted_slot.data());
          Tensor d_slot({c_t, grid.height, grid.width});
          lf_sum += distill::masked_feature_loss(target, adapted_slot, mask.mask, mask.n_p, &d_slot);
          const double scale = cfg.losses.lambda_lidar_feat * inv_b;
          for (std::int64_t k = 0; k < c_t * hw; ++k)
            d_adapted[slot * c_t * hw + k] += scale * d_slot[k];
        }
        const Tensor d_group = adapt_lidar->backward(d_adapted);
        if (sw.use_partition)
          distill::scatter_group_grad(d_f_img, d_group, cfg.partition.lidar_begin());
        else
          d_f_img.add_scaled(d_group);
      }

      if (sw.use_label_distill) {
        const Tensor f_label = encoder->forward(batch, grid, /*train=*/false, /*cache=*/false);
        const Tensor group = sw.use_partition
                                 ? distill::slice_channels(s_out.f_image, cfg.partition.label_begin(),
                                                           cfg.partition.n_label)
                                 : s_out.f_image;
        const Tensor adapted = adapt_label->forward(group);
        Tensor d_adapted(adapted.shape());
        for (std::int64_t slot = 0; slot < bsz; ++slot) {
          const auto& mask = masks[static_cast<std::size_t>(slot)];
          Tensor target({c_t, grid.height, grid.width});
          std::copy(f_label.data() + slot * c_t * hw, f_label.data() + (slot + 1) * c_t * hw,
                    target.data());
          Tensor adapted_slot({c_t, grid.height, grid.width});
          std::copy(adapted.data() + slot * c_t * hw, adapted.data() + (slot + 1) * c_t * hw,
                    adapted_slot.data());
          Tensor d_slot({c_t, grid.height, grid.width});
          bf_sum += distill::masked_feature_loss(target, adapted_slot, mask.mask, mask.n_p, &d_slot);
          const double scale = cfg.losses.lambda_label_feat * inv_b;
          for (std::int64_t k = 0; k < c_t * hw; ++k)
            d_adapted[slot * c_t * hw + k] += scale * d_slot[k];
        }
        const Tensor d_group = adapt_label->backward(d_adapted);
        if (sw.use_partition)
          distill::scatter_group_grad(d_f_img, d_group, cfg.partition.label_begin());
        else
          d_f_img.add_scaled(d_group);
      }

      const double batch_total = distill::total_loss(
          det_sum * inv_b,
          sw.use_lidar_distill ? std::optional<double>(lf_sum * inv_b) : std::nullopt,
          sw.use_label_distill ? std::optional<double>(bf_sum * inv_b) : std::nullopt,
          sw.use_lidar_distill ? std::optional<double>(resp_sum * inv_b) : std::nullopt, cfg.losses);

      student.backward(d_f_img, d_hm, d_reg, d_depth);
      opt.step(params);

      ep_total += batch_total * static_cast<double>(bsz);
      ep_det += det_sum;
      ep_lf += lf_sum;
      ep_bf += bf_sum;
      ep_resp += resp_sum;
      seen += bsz;
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = opt.lr();
    const double inv_seen = 1.0 / static_cast<double>(seen);
    row.loss_total = ep_total * inv_seen;
    row.loss_det = ep_det * inv_seen;
    row.loss_lidar_feat = ep_lf * inv_seen;
    row.loss_label_feat = ep_bf * inv_seen;
    row.loss_lidar_resp = ep_resp * inv_seen;
    const bool eval_now =
        epoch == sched.epochs || (sched.eval_every > 0 && epoch % sched.eval_every == 0);
    if (eval_now) {
      row.eval = evaluate_student(student, val, cfg);
      row.has_eval = true;
      result.final_metrics = row.eval;
    }
    result.epochs.push_back(row);
    write_epoch_csv(out_dir / "metrics" / "student.csv", result.epochs);
  }

  // Frozen-parameter audit: distillation must not have touched the teachers.
  if (teacher) {
    nn::StateDict ts;
    teacher->state(ts);
    result.frozen_teacher_hash_after = nn::params_hash(ts);
    if (result.frozen_teacher_hash_after != result.frozen_teacher_hash_before)
      throw Error(ErrorKind::kRuntime, "teacher parameters changed during student training");
  }
  if (encoder) {
    nn::StateDict ls;
    encoder->state(ls);
    result.frozen_labelenc_hash_after = nn::params_hash(ls);
    if (result.frozen_labelenc_hash_after != result.frozen_labelenc_hash_before)
      throw Error(ErrorKind::kRuntime, "label encoder parameters changed during student training");
  }

  result.buckets = bucketed_student_metrics(student, val, cfg);

  nn::StateDict state;
  student.state(state);
  if (adapt_lidar) adapt_lidar->state("adapt_lidar", state);
  if (adapt_label) adapt_label->state("adapt_label", state);
  result.checkpoint = out_dir / "checkpoints" / "student.ckpt";
  nn::save_checkpoint(result.checkpoint, "student", cfg.to_json_string(), state);
  result.checkpoint_hash = nn::params_hash(state);
  write_stage_report(out_dir, {"student", &cfg, train_seed}, result);
  return result;
}

// ---------------------------------------------------------------------------
// Ablation matrix

namespace {

struct StudentRow {
  std::string label;
  config::ExperimentConfig cfg;
};

config::ExperimentConfig with_switches(const config::ExperimentConfig& base, bool lidar, bool label,
                                       bool part) {
  config::ExperimentConfig cfg = base;
  cfg.ablation.use_lidar_distill = lidar;
  cfg.ablation.use_label_distill = label;
  cfg.ablation.use_partition = part;
  return cfg;
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  return out;
}

class SeedRunner {
 public:
  SeedRunner(const config::ExperimentConfig& base, const std::vector<world::Scene>& train,
             const std::vector<world::Scene>& val, fs::path shared_dir, std::uint64_t train_seed)
      : base_(base), train_(train), val_(val), shared_(std::move(shared_dir)), seed_(train_seed) {}

  const StageResult& teacher() {
    if (!teacher_) {
      const fs::path dir = shared_ / "teacher";
      auto cached = load_stage_report(dir, "teacher", base_, seed_);
      teacher_ = cached ? *cached : run_stage_teacher(base_, train_, val_, dir, seed_);
    }
    return *teacher_;
  }

  const StageResult& encoder(const std::string& variant) {
    auto it = encoders_.find(variant);
    if (it != encoders_.end()) return it->second;
    config::ExperimentConfig cfg = base_;
    cfg.ablation.label_encoder_variant = variant;
    const fs::path dir = shared_ / ("labelenc_" + variant);
    fs::path baseline_ckpt;
    if (variant == "labelenc") baseline_ckpt = baseline_student().checkpoint;
    auto cached = load_stage_report(dir, "labelenc", cfg, seed_);
    StageResult res = cached ? *cached
                             : run_stage_labelenc(cfg, train_, val_, teacher().checkpoint, dir,
                                                  seed_, baseline_ckpt);
    return encoders_.emplace(variant, std::move(res)).first->second;
  }

  const StageResult& baseline_student() {
    return student({"baseline", with_switches(base_, false, false, false)});
  }

  const StageResult& student(const StudentRow& row) {
    const std::string key = sanitize(row.label) + "_" + hex64(row.cfg.hash()).substr(0, 8);
    auto it = students_.find(key);
    if (it != students_.end()) return it->second;
    const fs::path dir = shared_ / ("student_" + key);
    fs::path teacher_ckpt, labelenc_ckpt;
    if (row.cfg.ablation.use_lidar_distill) teacher_ckpt = teacher().checkpoint;
    if (row.cfg.ablation.use_label_distill)
      labelenc_ckpt = encoder(row.cfg.ablation.label_encoder_variant).checkpoint;
    auto cached = load_stage_report(dir, "student", row.cfg, seed_);
    StageResult res = cached ? *cached
                             : run_stage_student(row.cfg, train_, val_, teacher_ckpt, labelenc_ckpt,
                                                 dir, seed_);
    return students_.emplace(key, std::move(res)).first->second;
  }

 private:
  const config::ExperimentConfig& base_;
  const std::vector<world::Scene>& train_;
  const std::vector<world::Scene>& val_;
  fs::path shared_;
  std::uint64_t seed_;
  std::optional<StageResult> teacher_;
  std::map<std::string, StageResult> encoders_;
  std::map<std::string, StageResult> students_;
};

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

AblationReport run_ablation_matrix(const config::ExperimentConfig& cfg, const std::string& axis,
                                   const std::vector<world::Scene>& train,
                                   const std::vector<world::Scene>& val, const fs::path& out_dir,
                                   int n_seeds) {
  cfg.validate();
  if (n_seeds < 1) throw Error(ErrorKind::kConfig, "ablation needs n_seeds >= 1");
  fs::create_directories(out_dir);
  cfg.save(out_dir / "config.json");

  std::vector<StudentRow> rows;
  if (axis == "components") {
    rows = {{"baseline", with_switches(cfg, false, false, false)},
            {"+lidar", with_switches(cfg, true, false, false)},
            {"+lidar+label", with_switches(cfg, true, true, false)},
            {"full", with_switches(cfg, true, true, true)}};
  } else if (axis == "channel_ratio") {
    if (cfg.model.student_channels % 6 != 0)
      throw Error(ErrorKind::kConfig, "channel_ratio axis needs student_channels divisible by 6");
    const std::int64_t unit = cfg.model.student_channels / 6;
    // Ratio order: lidar group : label group : image group.
    const std::vector<std::array<std::int64_t, 3>> ratios = {{1, 3, 2}, {3, 1, 2}, {2, 2, 2}};
    for (const auto& r : ratios) {
      config::ExperimentConfig c = with_switches(cfg, true, true, true);
      c.partition.n_lidar = r[0] * unit;
      c.partition.n_label = r[1] * unit;
      c.partition.n_image = r[2] * unit;
      rows.push_back({std::to_string(r[0]) + ":" + std::to_string(r[1]) + ":" + std::to_string(r[2]),
                      std::move(c)});
    }
  } else if (axis == "labelenc_variant") {
    for (const std::string v : {"autoencoder", "labelenc", "inverse"}) {
      config::ExperimentConfig c = with_switches(cfg, true, true, true);
      c.ablation.label_encoder_variant = v;
      rows.push_back({v, std::move(c)});
    }
  } else if (axis == "distance") {
    rows = {{"lidar", with_switches(cfg, true, false, false)},
            {"lidar_label", with_switches(cfg, true, true, true)}};
  } else {
    throw Error(ErrorKind::kConfig,
                "unknown ablation axis '" + axis +
                    "' (expected components|channel_ratio|labelenc_variant|distance)");
  }

  json detail;
  detail["axis"] = axis;
  detail["seeds"] = json::array();
  std::map<std::string, std::vector<StageResult>> results;  // label -> per-seed
  std::map<std::string, std::vector<evalkit::Metrics>> encoder_metrics;

  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t train_seed = cfg.seed + static_cast<std::uint64_t>(s);
    detail["seeds"].push_back(train_seed);
    SeedRunner runner(cfg, train, val, out_dir / "shared" / ("seed" + std::to_string(train_seed)),
                      train_seed);
    for (const auto& row : rows) {
      const StageResult& res = runner.student(row);
      results[row.label].push_back(res);
      if (axis == "labelenc_variant")
        encoder_metrics[row.label].push_back(runner.encoder(row.label).autoencoder_metrics);
    }
  }

  AblationReport report;
  report.axis = axis;
  json detail_rows = json::array();

  if (axis == "distance") {
    report.columns = {"bucket", "config", "mATE", "mASE", "mAOE"};
    for (const char* bucket : {"near", "far"}) {
      for (const auto& row : rows) {
        std::vector<double> mate, mase, maoe;
        for (const auto& r : results[row.label]) {
          const evalkit::Metrics& m =
              std::string(bucket) == "near" ? r.buckets.near_bucket : r.buckets.far_bucket;
          mate.push_back(m.errors.mate);
          mase.push_back(m.errors.mase);
          maoe.push_back(m.errors.maoe);
        }
        report.rows.push_back({bucket, row.label, format_double(mean(mate), 6),
                               format_double(mean(mase), 6), format_double(mean(maoe), 6)});
        detail_rows.push_back({{"bucket", bucket},
                               {"config", row.label},
                               {"mATE", mate},
                               {"mASE", mase},
                               {"mAOE", maoe}});
      }
    }
  } else {
    report.columns = {"config", "mAP", "NDS_star", "mATE", "mASE"};
    for (const auto& row : rows) {
      std::vector<double> map, nds, mate, mase;
      json seed_metrics = json::array();
      for (const auto& r : results[row.label]) {
        map.push_back(r.final_metrics.map);
        nds.push_back(r.final_metrics.nds);
        mate.push_back(r.final_metrics.errors.mate);
        mase.push_back(r.final_metrics.errors.mase);
        seed_metrics.push_back(metrics_to_json(r.final_metrics));
      }
      report.rows.push_back({row.label, format_double(mean(map), 6), format_double(mean(nds), 6),
                             format_double(mean(mate), 6), format_double(mean(mase), 6)});
      json jrow = {{"config", row.label}, {"per_seed", seed_metrics}};
      if (axis == "labelenc_variant") {
        json enc = json::array();
        for (const auto& m : encoder_metrics[row.label]) enc.push_back(metrics_to_json(m));
        jrow["autoencoder_per_seed"] = enc;
      }
      detail_rows.push_back(jrow);
    }
  }
  detail["rows"] = detail_rows;

  CsvWriter csv(report.columns);
  for (const auto& r : report.rows) csv.add_row(r);
  report.csv_path = out_dir / (axis + ".csv");
  csv.write(report.csv_path);
  report.json_path = out_dir / (axis + ".json");
  atomic_write_file(report.json_path, detail.dump(2) + "\n");

  // Plots: bar charts of mAP/NDS* per config, mASE near/far lines for the
  // distance axis.
  report.plot_path = out_dir / (axis + ".svg");
  if (axis == "distance") {
    std::vector<plots::Series> series;
    for (const auto& row : rows) {
      plots::Series s{row.label, {}};
      std::vector<double> near_v, far_v;
      for (const auto& r : results[row.label]) {
        near_v.push_back(r.buckets.near_bucket.errors.mase);
        far_v.push_back(r.buckets.far_bucket.errors.mase);
      }
      s.values = {mean(near_v), mean(far_v)};
      series.push_back(std::move(s));
    }
    plots::line_chart(report.plot_path, "size error by object distance", {"near", "far"}, series,
                      "mASE");
  } else {
    std::vector<std::string> groups;
    plots::Series map_s{"mAP", {}}, nds_s{"NDS*", {}};
    for (const auto& row : rows) {
      groups.push_back(row.label);
      std::vector<double> map, nds;
      for (const auto& r : results[row.label]) {
        map.push_back(r.final_metrics.map);
        nds.push_back(r.final_metrics.nds);
      }
      map_s.values.push_back(mean(map));
      nds_s.values.push_back(mean(nds));
    }
    plots::bar_chart(report.plot_path, "ablation: " + axis, groups, {map_s, nds_s});
  }
  return report;
}

// ---------------------------------------------------------------------------
// Run manifest

void write_manifest(const fs::path& out_dir, const RunManifest& manifest) {
  fs::create_directories(out_dir);
  json j = {{"command", manifest.command},
            {"config_path", manifest.config_path},
            {"config_hash", manifest.config_hash},
            {"seed", manifest.seed},
            {"revision", manifest.revision},
            {"timestamp", manifest.timestamp},
            {"out_dir", manifest.out_dir},
            {"args", manifest.args}};
  atomic_write_file(out_dir / "manifest.json", j.dump(2) + "\n");
}

}  // namespace bevkd::pipeline
