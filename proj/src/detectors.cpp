#include "bevkd/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bevkd/util.hpp"

namespace bevkd::det {

// ---------------------------------------------------------------------------
// Ground-truth encoding / decoding

GtTargets encode_gt(const world::Scene& scene, const bev::BevGridSpec& grid,
                    std::int32_t num_classes, const bev::HeatmapParams& params) {
  GtTargets t{bev::gt_heatmap(scene, grid, num_classes, params),
              {},
              Tensor({static_cast<std::int64_t>(scene.boxes.size()), kRegressChannels})};
  for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
    const world::BoxLabel& box = scene.boxes[b];
    std::int64_t ci, cj;
    grid.cell_of(box.x, box.y, &ci, &cj);
    t.center_cells.push_back({ci, cj});
    const std::int64_t r = static_cast<std::int64_t>(b);
    t.reg_targets.at(r, 0) = (box.x - grid.cell_center_x(cj)) / grid.cell_size;
    t.reg_targets.at(r, 1) = (box.y - grid.cell_center_y(ci)) / grid.cell_size;
    t.reg_targets.at(r, 2) = std::log(box.w);
    t.reg_targets.at(r, 3) = std::log(box.l);
    t.reg_targets.at(r, 4) = std::sin(box.yaw);
    t.reg_targets.at(r, 5) = std::cos(box.yaw);
  }
  return t;
}

std::vector<Detection> head_decode(const DetectionMaps& maps, const bev::BevGridSpec& grid,
                                   double score_thresh, std::int64_t k_max) {
  const std::int64_t m = maps.heatmap.size(0);
  const std::int64_t h = maps.heatmap.size(1);
  const std::int64_t w = maps.heatmap.size(2);
  std::vector<Detection> dets;
  for (std::int64_t c = 0; c < m; ++c) {
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        const double v = maps.heatmap.at(c, i, j);
        if (v < score_thresh) continue;
        bool peak = true;
        for (std::int64_t di = -1; di <= 1 && peak; ++di) {
          for (std::int64_t dj = -1; dj <= 1 && peak; ++dj) {
            if (di == 0 && dj == 0) continue;
            const std::int64_t ni = i + di, nj = j + dj;
            if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
            if (maps.heatmap.at(c, ni, nj) > v) peak = false;
          }
        }
        if (!peak) continue;
        Detection d;
        d.score = v;
        d.box.class_id = static_cast<std::int32_t>(c);
        d.box.x = static_cast<float>(grid.cell_center_x(j) + maps.regress.at(0, i, j) * grid.cell_size);
        d.box.y = static_cast<float>(grid.cell_center_y(i) + maps.regress.at(1, i, j) * grid.cell_size);
        d.box.w = static_cast<float>(std::exp(maps.regress.at(2, i, j)));
        d.box.l = static_cast<float>(std::exp(maps.regress.at(3, i, j)));
        d.box.yaw = static_cast<float>(std::atan2(maps.regress.at(4, i, j), maps.regress.at(5, i, j)));
        dets.push_back(d);
      }
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    return a.score > b.score;
  });
  if (static_cast<std::int64_t>(dets.size()) > k_max) dets.resize(static_cast<std::size_t>(k_max));
  return dets;
}

DetectionMaps slice_maps(const Tensor& heatmap, const Tensor& regress, std::int64_t slot) {
  const std::int64_t m = heatmap.size(1), h = heatmap.size(2), w = heatmap.size(3);
  DetectionMaps maps{Tensor({m, h, w}), Tensor({kRegressChannels, h, w})};
  std::copy(heatmap.data() + slot * m * h * w, heatmap.data() + (slot + 1) * m * h * w,
            maps.heatmap.data());
  std::copy(regress.data() + slot * kRegressChannels * h * w,
            regress.data() + (slot + 1) * kRegressChannels * h * w, maps.regress.data());
  return maps;
}

// ---------------------------------------------------------------------------
// DetectionHead

DetectionHead::DetectionHead(std::int64_t in_ch, std::int64_t hidden, std::int64_t num_classes,
                             Rng& rng)
    : num_classes_(static_cast<std::int32_t>(num_classes)), c1_(in_ch, hidden, 3),
      c2_(hidden, hidden, 3), hm_(hidden, num_classes, 1), reg_(hidden, kRegressChannels, 1) {
  c1_.init(rng);
  c2_.init(rng);
  hm_.init(rng);
  reg_.init(rng);
  // Bias the heatmap toward background so focal training starts stable.
  hm_.b.fill(-2.19);
}

DetectionHead::Out DetectionHead::forward(const Tensor& features, bool cache) {
  Tensor h = r1_.forward(c1_.forward(features, cache), cache);
  h = r2_.forward(c2_.forward(h, cache), cache);
  Out out;
  out.heatmap = hm_.forward(h, cache);
  nn::sigmoid_inplace(out.heatmap);
  if (cache) probs_ = out.heatmap;
  out.regress = reg_.forward(h, cache);
  return out;
}

Tensor DetectionHead::backward(const Tensor& d_heatmap, const Tensor& d_regress, bool param_grads) {
  Tensor d_logits(d_heatmap.shape());
  const std::int64_t n = d_heatmap.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double p = probs_[i];
    d_logits[i] = d_heatmap[i] * p * (1.0 - p);
  }
  Tensor dh = hm_.backward(d_logits, param_grads);
  dh.add_scaled(reg_.backward(d_regress, param_grads));
  Tensor d = c2_.backward(r2_.backward(dh), param_grads);
  return c1_.backward(r1_.backward(d), param_grads);
}

void DetectionHead::params(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  c1_.params(prefix + ".c1", out);
  c2_.params(prefix + ".c2", out);
  hm_.params(prefix + ".hm", out);
  reg_.params(prefix + ".reg", out);
}

void DetectionHead::state(const std::string& prefix, nn::StateDict& out) {
  c1_.state(prefix + ".c1", out);
  c2_.state(prefix + ".c2", out);
  hm_.state(prefix + ".hm", out);
  reg_.state(prefix + ".reg", out);
}

// ---------------------------------------------------------------------------
// TeacherModel

TeacherModel::TeacherModel(std::int32_t num_classes, std::int64_t channels, std::int64_t head_width,
                           bev::BevGridSpec grid, Rng& rng)
    : num_classes_(num_classes),
      channels_(channels),
      grid_(grid),
      c1_(4, channels, 3),
      c2_(channels, channels, 3),
      bn1_(channels),
      bn2_(channels),
      head_(channels, head_width, num_classes, rng) {
  c1_.init(rng);
  c2_.init(rng);
}

Tensor TeacherModel::featurize(const std::vector<world::LidarPoint>& points) const {
  const std::int64_t h = grid_.height, w = grid_.width;
  Tensor out({4, h, w});
  std::vector<std::vector<world::LidarPoint>> bucket(static_cast<std::size_t>(h * w));
  for (const auto& p : points) {
    std::int64_t i, j;
    if (grid_.cell_of(p.x, p.y, &i, &j)) bucket[static_cast<std::size_t>(i * w + j)].push_back(p);
  }
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      auto& pts = bucket[static_cast<std::size_t>(i * w + j)];
      if (pts.empty()) continue;
      // Sort before accumulating so the sums do not depend on input order.
      std::sort(pts.begin(), pts.end(), [](const world::LidarPoint& a, const world::LidarPoint& b) {
        return a.x != b.x ? a.x < b.x : a.y < b.y;
      });
      double sx = 0.0, sy = 0.0;
      for (const auto& p : pts) {
        sx += (p.x - grid_.cell_center_x(j)) / grid_.cell_size;
        sy += (p.y - grid_.cell_center_y(i)) / grid_.cell_size;
      }
      const double count = static_cast<double>(pts.size());
      out.at(0, i, j) = std::log1p(count);
      out.at(1, i, j) = sx / count;
      out.at(2, i, j) = sy / count;
      out.at(3, i, j) = 1.0;
    }
  }
  return out;
}

Tensor TeacherModel::featurize_batch(const std::vector<const world::Scene*>& scenes) const {
  const std::int64_t n = static_cast<std::int64_t>(scenes.size());
  const std::int64_t h = grid_.height, w = grid_.width;
  Tensor out({n, 4, h, w});
  for (std::int64_t i = 0; i < n; ++i) {
    const Tensor single = featurize(scenes[static_cast<std::size_t>(i)]->points);
    std::copy(single.data(), single.data() + single.numel(), out.data() + i * 4 * h * w);
  }
  return out;
}

TeacherModel::Out TeacherModel::forward(const Tensor& input, bool train, bool cache) {
  Tensor f = r1_.forward(bn1_.forward(c1_.forward(input, cache), train, cache), cache);
  f = r2_.forward(bn2_.forward(c2_.forward(f, cache), train, cache), cache);
  Out out;
  auto head_out = head_.forward(f, cache);
  out.f_lidar = std::move(f);
  out.heatmap = std::move(head_out.heatmap);
  out.regress = std::move(head_out.regress);
  return out;
}

void TeacherModel::backward(const Tensor& d_heatmap, const Tensor& d_regress) {
  Tensor d = head_.backward(d_heatmap, d_regress);
  d = c2_.backward(bn2_.backward(r2_.backward(d)), true, true);
  c1_.backward(bn1_.backward(r1_.backward(d)), true, false);
}

TeacherModel::Out TeacherModel::head_forward(const Tensor& features, bool cache) {
  Out out;
  auto head_out = head_.forward(features, cache);
  out.f_lidar = features;
  out.heatmap = std::move(head_out.heatmap);
  out.regress = std::move(head_out.regress);
  return out;
}

Tensor TeacherModel::head_backward_frozen(const Tensor& d_heatmap, const Tensor& d_regress) {
  return head_.backward(d_heatmap, d_regress, /*param_grads=*/false);
}

void TeacherModel::params(std::vector<nn::ParamRef>& out) {
  c1_.params("enc.c1", out);
  bn1_.params("enc.bn1", out);
  c2_.params("enc.c2", out);
  bn2_.params("enc.bn2", out);
  head_.params("head", out);
}

void TeacherModel::state(nn::StateDict& out) {
  c1_.state("enc.c1", out);
  bn1_.state("enc.bn1", out);
  c2_.state("enc.c2", out);
  bn2_.state("enc.bn2", out);
  head_.state("head", out);
}


// ---------------------------------------------------------------------------
// StudentModel

StudentModel::StudentModel(std::int32_t num_classes, std::int64_t channels, std::int64_t depth_bins,
                           std::int64_t column_width, std::int64_t head_width,
                           const world::WorldSpec& world, bev::BevGridSpec grid, Rng& rng)
    : num_classes_(num_classes),
      channels_(channels),
      depth_bins_(depth_bins),
      column_width_(column_width),
      azimuth_bins_(world.azimuth_bins),
      pano_channels_(world.panorama_channels()),
      max_range_(world.extent * std::sqrt(2.0)),
      grid_(grid),
      col1_(world.panorama_channels(), column_width),
      col2_(column_width, column_width),
      depth_head_(column_width, depth_bins),
      context_head_(column_width, channels),
      e1_(channels, channels, 3),
      e2_(channels, channels, 3),
      bn1_(channels),
      bn2_(channels),
      head_(channels, head_width, num_classes, rng) {
  col1_.init(rng);
  col2_.init(rng);
  depth_head_.init(rng);
  context_head_.init(rng);
  e1_.init(rng);
  e2_.init(rng);

  // Ray/range table: where each (azimuth, depth bin) lands in the BEV grid.
  lift_cells_.assign(static_cast<std::size_t>(azimuth_bins_ * depth_bins_), -1);
  for (std::int32_t a = 0; a < azimuth_bins_; ++a) {
    const double az = world::azimuth_of_bin(a, world);
    for (std::int64_t k = 0; k < depth_bins_; ++k) {
      const double r = (k + 0.5) * max_range_ / static_cast<double>(depth_bins_);
      std::int64_t i, j;
      if (grid_.cell_of(r * std::cos(az), r * std::sin(az), &i, &j))
        lift_cells_[static_cast<std::size_t>(a * depth_bins_ + k)] = i * grid_.width + j;
    }
  }
}

Tensor StudentModel::panorama_batch(const std::vector<const world::Scene*>& scenes) const {
  const std::int64_t n = static_cast<std::int64_t>(scenes.size());
  Tensor out({n, azimuth_bins_, pano_channels_});
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& pano = scenes[static_cast<std::size_t>(i)]->panorama;
    double* dst = out.data() + i * azimuth_bins_ * pano_channels_;
    for (std::size_t k = 0; k < pano.size(); ++k) dst[k] = static_cast<double>(pano[k]);
  }
  return out;
}

StudentModel::Out StudentModel::forward(const Tensor& panorama, bool train, bool cache) {
  const std::int64_t n = panorama.size(0);
  const std::int64_t rows = n * azimuth_bins_;
  const Tensor cols_in = panorama.reshaped({rows, pano_channels_});
  Tensor col = r1_.forward(col1_.forward(cols_in, cache), cache);
  col = r2_.forward(col2_.forward(col, cache), cache);

  Out out;
  out.depth_probs = nn::softmax_rows(depth_head_.forward(col, cache));
  Tensor ctx = context_head_.forward(col, cache);
  if (cache) {
    depth_probs_ = out.depth_probs;
    ctx_ = ctx;
  }

  // Lift-splat: scatter ctx[a] * depth[a, k] into the BEV cell on the ray.
  const std::int64_t hw = grid_.height * grid_.width;
  Tensor lift({n, channels_, grid_.height, grid_.width});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t a = 0; a < azimuth_bins_; ++a) {
      const std::int64_t row = i * azimuth_bins_ + a;
      for (std::int64_t k = 0; k < depth_bins_; ++k) {
        const std::int64_t cell = lift_cell(a, k);
        if (cell < 0) continue;
        const double wgt = out.depth_probs.at(row, k);
        double* dst = lift.data() + i * channels_ * hw;
        for (std::int64_t c = 0; c < channels_; ++c) dst[c * hw + cell] += ctx.at(row, c) * wgt;
      }
    }
  }
  if (cache) lift_ = lift;

  Tensor f = er1_.forward(bn1_.forward(e1_.forward(lift, cache), train, cache), cache);
  f = er2_.forward(bn2_.forward(e2_.forward(f, cache), train, cache), cache);
  auto head_out = head_.forward(f, cache);
  out.f_image = std::move(f);
  out.heatmap = std::move(head_out.heatmap);
  out.regress = std::move(head_out.regress);
  return out;
}

void StudentModel::backward(const Tensor& d_f_image_ext, const Tensor& d_heatmap,
                            const Tensor& d_regress, const Tensor& d_depth_probs) {
  Tensor df = head_.backward(d_heatmap, d_regress);
  if (d_f_image_ext.numel() > 0) df.add_scaled(d_f_image_ext);
  Tensor d = e2_.backward(bn2_.backward(er2_.backward(df)));
  Tensor d_lift = e1_.backward(bn1_.backward(er1_.backward(d)), true, true);

  // Gather lift gradients back to context features and depth weights.
  const std::int64_t n = d_lift.size(0);
  const std::int64_t hw = grid_.height * grid_.width;
  const std::int64_t rows = n * azimuth_bins_;
  Tensor d_ctx({rows, channels_});
  Tensor d_depth({rows, depth_bins_});
  if (d_depth_probs.numel() > 0) d_depth = d_depth_probs;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* dl = d_lift.data() + i * channels_ * hw;
    for (std::int64_t a = 0; a < azimuth_bins_; ++a) {
      const std::int64_t row = i * azimuth_bins_ + a;
      for (std::int64_t k = 0; k < depth_bins_; ++k) {
        const std::int64_t cell = lift_cell(a, k);
        if (cell < 0) continue;
        const double wgt = depth_probs_.at(row, k);
        double dd = 0.0;
        for (std::int64_t c = 0; c < channels_; ++c) {
          const double g = dl[c * hw + cell];
          d_ctx.at(row, c) += g * wgt;
          dd += g * ctx_.at(row, c);
        }
        d_depth.at(row, k) += dd;
      }
    }
  }

  Tensor d_col = context_head_.backward(d_ctx);
  d_col.add_scaled(depth_head_.backward(nn::softmax_backward_rows(depth_probs_, d_depth)));
  col1_.backward(r1_.backward(col2_.backward(r2_.backward(d_col))));
}

void StudentModel::params(std::vector<nn::ParamRef>& out) {
  col1_.params("col.l1", out);
  col2_.params("col.l2", out);
  depth_head_.params("depth", out);
  context_head_.params("context", out);
  e1_.params("enc.c1", out);
  bn1_.params("enc.bn1", out);
  e2_.params("enc.c2", out);
  bn2_.params("enc.bn2", out);
  head_.params("head", out);
}

void StudentModel::state(nn::StateDict& out) {
  col1_.state("col.l1", out);
  col2_.state("col.l2", out);
  depth_head_.state("depth", out);
  context_head_.state("context", out);
  e1_.state("enc.c1", out);
  bn1_.state("enc.bn1", out);
  e2_.state("enc.c2", out);
  bn2_.state("enc.bn2", out);
  head_.state("head", out);
}


std::vector<std::int32_t> depth_bin_targets(const world::Scene& scene, const world::WorldSpec& world,
                                            std::int64_t depth_bins, double max_range) {
  const auto ranges = world::nearest_hit_ranges(scene, world);
  std::vector<std::int32_t> bins(ranges.size(), -1);
  for (std::size_t a = 0; a < ranges.size(); ++a) {
    if (ranges[a] < 0.0) continue;
    auto k = static_cast<std::int64_t>(ranges[a] / max_range * static_cast<double>(depth_bins));
    bins[a] = static_cast<std::int32_t>(std::clamp<std::int64_t>(k, 0, depth_bins - 1));
  }
  return bins;
}

// ---------------------------------------------------------------------------
// AdaptModule

AdaptModule::AdaptModule(std::int64_t in_ch, std::int64_t out_ch, int layers, Rng& rng) {
  if (layers < 1 || layers > 3) throw Error(ErrorKind::kConfig, "adapt layers must be in [1, 3]");
  for (int i = 0; i < layers; ++i) {
    const std::int64_t ic = i == 0 ? in_ch : out_ch;
    layers_.emplace_back(ic, out_ch, 3);
    layers_.back().init(rng);
  }
  relus_.resize(layers_.size() > 1 ? layers_.size() - 1 : 0);
}

Tensor AdaptModule::forward(const Tensor& x, bool cache) {
  if (x.size(1) != layers_.front().in_ch()) {
    throw Error(ErrorKind::kRuntime, "adapt module channel mismatch: expected " +
                                         std::to_string(layers_.front().in_ch()) + ", got " +
                                         std::to_string(x.size(1)));
  }
  Tensor h = layers_.front().forward(x, cache);
  for (std::size_t i = 1; i < layers_.size(); ++i)
    h = layers_[i].forward(relus_[i - 1].forward(h, cache), cache);
  return h;
}

Tensor AdaptModule::backward(const Tensor& dy, bool param_grads) {
  Tensor d = dy;
  for (std::size_t i = layers_.size(); i-- > 1;)
    d = relus_[i - 1].backward(layers_[i].backward(d, param_grads));
  return layers_.front().backward(d, param_grads);
}

void AdaptModule::params(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].params(prefix + ".c" + std::to_string(i + 1), out);
}

void AdaptModule::state(const std::string& prefix, nn::StateDict& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].state(prefix + ".c" + std::to_string(i + 1), out);
}

}  // namespace bevkd::det
