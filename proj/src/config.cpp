#include "bevkd/config.hpp"

#include <json.hpp>

#include <set>

#include "bevkd/rng.hpp"
#include "bevkd/util.hpp"

namespace bevkd::config {

using json = nlohmann::json;

namespace {

// Strict object reader: unknown keys are config errors, with the full key
// path in the message.
class ObjReader {
 public:
  ObjReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw Error(ErrorKind::kConfig, "config: expected object at '" + path_ + "'");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kConfig,
                  "config: bad value for '" + path_ + key + "': " + e.what());
    }
  }

  const json& sub(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key()))
        throw Error(ErrorKind::kConfig, "config: unknown key '" + path_ + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_world(const json& j, world::WorldSpec& w) {
  ObjReader r(j, "world.");
  r.read("extent", w.extent);
  r.read("num_classes", w.num_classes);
  r.read("max_objects", w.max_objects);
  if (r.has("class_sizes")) {
    const json& cs = r.sub("class_sizes");
    if (!cs.is_array())
      throw Error(ErrorKind::kConfig, "config: world.class_sizes must be an array");
    w.class_sizes.clear();
    for (const auto& e : cs) {
      if (!e.is_array() || e.size() != 4)
        throw Error(ErrorKind::kConfig,
                    "config: world.class_sizes entries must be [w_lo, w_hi, l_lo, l_hi]");
      w.class_sizes.push_back(
          {e[0].get<float>(), e[1].get<float>(), e[2].get<float>(), e[3].get<float>()});
    }
  }
  r.read("min_center_distance", w.min_center_distance);
  r.read("density_k", w.density_k);
  r.read("occlusion", w.occlusion);
  r.read("lidar_noise", w.lidar_noise);
  r.read("camera_range_noise", w.camera_range_noise);
  r.read("azimuth_bins", w.azimuth_bins);
  r.finish();
}

json world_to_json(const world::WorldSpec& w) {
  json cs = json::array();
  for (const auto& s : w.class_sizes) cs.push_back({s.w_lo, s.w_hi, s.l_lo, s.l_hi});
  return {{"extent", w.extent},
          {"num_classes", w.num_classes},
          {"max_objects", w.max_objects},
          {"class_sizes", cs},
          {"min_center_distance", w.min_center_distance},
          {"density_k", w.density_k},
          {"occlusion", w.occlusion},
          {"lidar_noise", w.lidar_noise},
          {"camera_range_noise", w.camera_range_noise},
          {"azimuth_bins", w.azimuth_bins}};
}

void parse_schedule(const json& j, const std::string& path, TrainSchedule& s) {
  ObjReader r(j, path);
  r.read("epochs", s.epochs);
  r.read("lr", s.lr);
  r.read("batch_size", s.batch_size);
  r.read("weight_decay", s.weight_decay);
  r.read("lr_decay_epochs", s.lr_decay_epochs);
  r.read("lr_decay_factor", s.lr_decay_factor);
  r.read("eval_every", s.eval_every);
  r.finish();
}

json schedule_to_json(const TrainSchedule& s) {
  return {{"epochs", s.epochs},
          {"lr", s.lr},
          {"batch_size", s.batch_size},
          {"weight_decay", s.weight_decay},
          {"lr_decay_epochs", s.lr_decay_epochs},
          {"lr_decay_factor", s.lr_decay_factor},
          {"eval_every", s.eval_every}};
}

}  // namespace

void ExperimentConfig::validate() const {
  world.validate();
  if (grid_cells < 8) throw Error(ErrorKind::kConfig, "grid_cells must be >= 8");
  if (!(tau > 0.0 && tau < 1.0)) throw Error(ErrorKind::kConfig, "tau must be in (0, 1)");
  if (heatmap.beta <= 0.0 || heatmap.r_min < 0.0)
    throw Error(ErrorKind::kConfig, "heatmap.beta must be > 0 and heatmap.r_min >= 0");
  if (model.teacher_channels < 1 || model.student_channels < 1 || model.embed_dim < 1 ||
      model.head_width < 1 || model.column_width < 1)
    throw Error(ErrorKind::kConfig, "model widths must be positive");
  if (model.depth_bins < 2) throw Error(ErrorKind::kConfig, "model.depth_bins must be >= 2");
  if (model.adapt_layers < 1 || model.adapt_layers > 3)
    throw Error(ErrorKind::kConfig, "model.adapt_layers must be in [1, 3]");
  partition.validate(model.student_channels);
  losses.validate();
  if (data.train_scenes < 1 || data.val_scenes < 1)
    throw Error(ErrorKind::kConfig, "data scene counts must be >= 1");
  for (const TrainSchedule* s : {&teacher_stage, &labelenc_stage, &student_stage}) {
    if (s->epochs < 1 || s->lr <= 0.0 || s->batch_size < 1)
      throw Error(ErrorKind::kConfig, "stage schedules need epochs >= 1, lr > 0, batch_size >= 1");
  }
  if (eval.thresholds.empty())
    throw Error(ErrorKind::kConfig, "eval.thresholds must be non-empty");
  bool tp_found = false;
  for (double t : eval.thresholds) tp_found = tp_found || t == eval.tp_threshold;
  if (!tp_found)
    throw Error(ErrorKind::kConfig, "eval.tp_threshold must be one of eval.thresholds");
  if (!(eval.far_fraction > 0.0 && eval.far_fraction < 1.0))
    throw Error(ErrorKind::kConfig, "eval.far_fraction must be in (0, 1)");
  const std::string& v = ablation.label_encoder_variant;
  if (v != "inverse" && v != "autoencoder" && v != "labelenc")
    throw Error(ErrorKind::kConfig, "ablation.label_encoder_variant must be one of "
                                    "inverse|autoencoder|labelenc, got '" + v + "'");
}

std::string ExperimentConfig::to_json_string() const {
  json j;
  j["seed"] = seed;
  j["world"] = world_to_json(world);
  j["grid_cells"] = grid_cells;
  j["heatmap"] = {{"beta", heatmap.beta}, {"r_min", heatmap.r_min}};
  j["tau"] = tau;
  j["soft_mask"] = soft_mask;
  j["position_blind"] = position_blind;
  j["labelenc_align_weight"] = labelenc_align_weight;
  j["model"] = {{"teacher_channels", model.teacher_channels},
                {"student_channels", model.student_channels},
                {"embed_dim", model.embed_dim},
                {"depth_bins", model.depth_bins},
                {"head_width", model.head_width},
                {"column_width", model.column_width},
                {"adapt_layers", model.adapt_layers}};
  j["partition"] = {{"image", partition.n_image}, {"lidar", partition.n_lidar}, {"label", partition.n_label}};
  j["losses"] = {{"lambda_lidar_feat", losses.lambda_lidar_feat},
                 {"lambda_label_feat", losses.lambda_label_feat},
                 {"lambda_lidar_resp", losses.lambda_lidar_resp},
                 {"w_heatmap", losses.w_heatmap},
                 {"w_regress", losses.w_regress},
                 {"w_depth", losses.w_depth},
                 {"focal_gamma", losses.focal_gamma}};
  j["data"] = {{"train_scenes", data.train_scenes}, {"val_scenes", data.val_scenes}};
  j["stages"] = {{"teacher", schedule_to_json(teacher_stage)},
                 {"labelenc", schedule_to_json(labelenc_stage)},
                 {"student", schedule_to_json(student_stage)}};
  j["eval"] = {{"score_thresh", eval.score_thresh},
               {"k_max", eval.k_max},
               {"thresholds", eval.thresholds},
               {"tp_threshold", eval.tp_threshold},
               {"far_fraction", eval.far_fraction}};
  j["ablation"] = {{"use_lidar_distill", ablation.use_lidar_distill},
                   {"use_label_distill", ablation.use_label_distill},
                   {"use_partition", ablation.use_partition},
                   {"label_encoder_variant", ablation.label_encoder_variant}};
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& text,
                                                    const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kConfig, origin + ": " + e.what());
  }
  ExperimentConfig cfg;
  ObjReader r(j, "");
  r.read("seed", cfg.seed);
  if (r.has("world")) parse_world(r.sub("world"), cfg.world);
  r.read("grid_cells", cfg.grid_cells);
  if (r.has("heatmap")) {
    ObjReader h(r.sub("heatmap"), "heatmap.");
    h.read("beta", cfg.heatmap.beta);
    h.read("r_min", cfg.heatmap.r_min);
    h.finish();
  }
  r.read("tau", cfg.tau);
  r.read("soft_mask", cfg.soft_mask);
  r.read("position_blind", cfg.position_blind);
  r.read("labelenc_align_weight", cfg.labelenc_align_weight);
  if (r.has("model")) {
    ObjReader m(r.sub("model"), "model.");
    m.read("teacher_channels", cfg.model.teacher_channels);
    m.read("student_channels", cfg.model.student_channels);
    m.read("embed_dim", cfg.model.embed_dim);
    m.read("depth_bins", cfg.model.depth_bins);
    m.read("head_width", cfg.model.head_width);
    m.read("column_width", cfg.model.column_width);
    m.read("adapt_layers", cfg.model.adapt_layers);
    m.finish();
  }
  if (r.has("partition")) {
    ObjReader p(r.sub("partition"), "partition.");
    p.read("image", cfg.partition.n_image);
    p.read("lidar", cfg.partition.n_lidar);
    p.read("label", cfg.partition.n_label);
    p.finish();
  }
  if (r.has("losses")) {
    ObjReader l(r.sub("losses"), "losses.");
    l.read("lambda_lidar_feat", cfg.losses.lambda_lidar_feat);
    l.read("lambda_label_feat", cfg.losses.lambda_label_feat);
    l.read("lambda_lidar_resp", cfg.losses.lambda_lidar_resp);
    l.read("w_heatmap", cfg.losses.w_heatmap);
    l.read("w_regress", cfg.losses.w_regress);
    l.read("w_depth", cfg.losses.w_depth);
    l.read("focal_gamma", cfg.losses.focal_gamma);
    l.finish();
  }
  if (r.has("data")) {
    ObjReader d(r.sub("data"), "data.");
    d.read("train_scenes", cfg.data.train_scenes);
    d.read("val_scenes", cfg.data.val_scenes);
    d.finish();
  }
  if (r.has("stages")) {
    ObjReader s(r.sub("stages"), "stages.");
    if (s.has("teacher")) parse_schedule(s.sub("teacher"), "stages.teacher.", cfg.teacher_stage);
    if (s.has("labelenc")) parse_schedule(s.sub("labelenc"), "stages.labelenc.", cfg.labelenc_stage);
    if (s.has("student")) parse_schedule(s.sub("student"), "stages.student.", cfg.student_stage);
    s.finish();
  }
  if (r.has("eval")) {
    ObjReader e(r.sub("eval"), "eval.");
    e.read("score_thresh", cfg.eval.score_thresh);
    e.read("k_max", cfg.eval.k_max);
    e.read("thresholds", cfg.eval.thresholds);
    e.read("tp_threshold", cfg.eval.tp_threshold);
    e.read("far_fraction", cfg.eval.far_fraction);
    e.finish();
  }
  if (r.has("ablation")) {
    ObjReader a(r.sub("ablation"), "ablation.");
    a.read("use_lidar_distill", cfg.ablation.use_lidar_distill);
    a.read("use_label_distill", cfg.ablation.use_label_distill);
    a.read("use_partition", cfg.ablation.use_partition);
    a.read("label_encoder_variant", cfg.ablation.label_encoder_variant);
    a.finish();
  }
  r.finish();
  cfg.world.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorKind::kConfig, "config file not found: " + path.string());
  return from_json_string(read_file(path), path.string());
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  atomic_write_file(path, to_json_string());
}

std::uint64_t ExperimentConfig::hash() const {
  const std::string s = to_json_string();
  return fnv1a(s.data(), s.size());
}

std::uint64_t ExperimentConfig::train_data_seed() const { return splitmix64(seed ^ 0x747261696eull); }
std::uint64_t ExperimentConfig::val_data_seed() const { return splitmix64(seed ^ 0x76616cull); }

}  // namespace bevkd::config
