#include "bevkd/labelenc.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "bevkd/util.hpp"

namespace bevkd::labelenc {

EncoderVariant variant_from_string(const std::string& name) {
  if (name == "inverse") return EncoderVariant::kInverse;
  if (name == "autoencoder") return EncoderVariant::kAutoencoder;
  if (name == "labelenc") return EncoderVariant::kLabelEnc;
  throw Error(ErrorKind::kConfig, "unknown label encoder variant: " + name);
}

std::string to_string(EncoderVariant variant) {
  switch (variant) {
    case EncoderVariant::kInverse: return "inverse";
    case EncoderVariant::kAutoencoder: return "autoencoder";
    case EncoderVariant::kLabelEnc: return "labelenc";
  }
  return "?";
}

LabelEncoder::LabelEncoder(std::int32_t num_classes, std::int64_t embed_dim,
                           std::int64_t out_channels, bev::BevGridSpec grid, bool position_blind,
                           Rng& rng)
    : num_classes_(num_classes),
      d_(embed_dim),
      out_ch_(out_channels),
      grid_(grid),
      position_blind_(position_blind),
      cls1_(num_classes, embed_dim),
      cls2_(embed_dim, embed_dim),
      box1_(det::kRegressChannels, embed_dim),
      box2_(embed_dim, embed_dim),
      f1_(embed_dim, out_channels, 3),
      f2_(out_channels, out_channels, 3),
      fbn_(out_channels) {
  cls1_.init(rng);
  cls2_.init(rng);
  box1_.init(rng);
  box2_.init(rng);
  f1_.init(rng);
  f2_.init(rng);
}

std::vector<double> LabelEncoder::box_attrs(const world::BoxLabel& box) const {
  // Within-cell offsets; normalizing by the extent instead makes the sub-cell
  // position unrecoverable for the translation-invariant decode stack.
  double fx = 0.0, fy = 0.0;
  if (!position_blind_) {
    std::int64_t ci, cj;
    grid_.cell_of(box.x, box.y, &ci, &cj);
    fx = (box.x - grid_.cell_center_x(cj)) / grid_.cell_size;
    fy = (box.y - grid_.cell_center_y(ci)) / grid_.cell_size;
  }
  return {fx, fy, std::log(box.w), std::log(box.l), std::sin(box.yaw), std::cos(box.yaw)};
}

Tensor LabelEncoder::forward(const std::vector<const world::Scene*>& scenes,
                             const bev::BevGridSpec& grid, bool train, bool cache) {
  const std::int64_t n = static_cast<std::int64_t>(scenes.size());
  grid_h_ = grid.height;
  grid_w_ = grid.width;
  row_offsets_.assign(static_cast<std::size_t>(n + 1), 0);
  for (std::int64_t i = 0; i < n; ++i)
    row_offsets_[static_cast<std::size_t>(i + 1)] =
        row_offsets_[static_cast<std::size_t>(i)] +
        static_cast<std::int64_t>(scenes[static_cast<std::size_t>(i)]->boxes.size());
  total_rows_ = row_offsets_.back();

  Tensor vec;
  if (total_rows_ > 0) {
    Tensor cls_in({total_rows_, num_classes_});
    Tensor box_in({total_rows_, det::kRegressChannels});
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& boxes = scenes[static_cast<std::size_t>(i)]->boxes;
      for (std::size_t b = 0; b < boxes.size(); ++b) {
        const std::int64_t row = row_offsets_[static_cast<std::size_t>(i)] + static_cast<std::int64_t>(b);
        cls_in.at(row, boxes[b].class_id) = 1.0;
        const auto attrs = box_attrs(boxes[b]);
        for (std::int64_t c = 0; c < det::kRegressChannels; ++c)
          box_in.at(row, c) = attrs[static_cast<std::size_t>(c)];
      }
    }
    vec = cls2_.forward(rc_.forward(cls1_.forward(cls_in, cache), cache), cache);
    vec.add_scaled(box2_.forward(rb_.forward(box1_.forward(box_in, cache), cache), cache));
  }

  Tensor maps({n, d_, grid_h_, grid_w_});
  owners_.assign(static_cast<std::size_t>(n), {});
  const std::int64_t hw = grid_h_ * grid_w_;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& boxes = scenes[static_cast<std::size_t>(i)]->boxes;
    if (boxes.empty()) continue;
    std::vector<Tensor> vectors;
    vectors.reserve(boxes.size());
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      Tensor v({d_});
      const std::int64_t row = row_offsets_[static_cast<std::size_t>(i)] + static_cast<std::int64_t>(b);
      for (std::int64_t c = 0; c < d_; ++c) v[c] = vec.at(row, c);
      vectors.push_back(std::move(v));
    }
    const Tensor scene_map = bev::map_to_bev(vectors, boxes, grid, &owners_[static_cast<std::size_t>(i)]);
    std::copy(scene_map.data(), scene_map.data() + d_ * hw, maps.data() + i * d_ * hw);
  }

  Tensor h = fr_.forward(fbn_.forward(f1_.forward(maps, cache), train, cache), cache);
  return f2_.forward(h, cache);
}

void LabelEncoder::backward(const Tensor& d_f_label) {
  Tensor d_maps = f1_.backward(fbn_.backward(fr_.backward(f2_.backward(d_f_label))), true, true);
  if (total_rows_ == 0) return;
  Tensor d_vec({total_rows_, d_});
  const std::int64_t n = d_maps.size(0);
  const std::int64_t hw = grid_h_ * grid_w_;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& owner = owners_[static_cast<std::size_t>(i)];
    if (owner.empty()) continue;
    const double* dm = d_maps.data() + i * d_ * hw;
    for (std::int64_t k = 0; k < hw; ++k) {
      const std::int32_t o = owner[static_cast<std::size_t>(k)];
      if (o < 0) continue;
      const std::int64_t row = row_offsets_[static_cast<std::size_t>(i)] + o;
      for (std::int64_t c = 0; c < d_; ++c) d_vec.at(row, c) += dm[c * hw + k];
    }
  }
  // The class and box embeddings are summed, so each branch receives the
  // full vector gradient.
  cls1_.backward(rc_.backward(cls2_.backward(d_vec)));
  box1_.backward(rb_.backward(box2_.backward(d_vec)));
}

Tensor LabelEncoder::object_vector(const world::BoxLabel& box) {
  Tensor cls_in({1, num_classes_});
  cls_in.at(0, box.class_id) = 1.0;
  Tensor box_in({1, det::kRegressChannels});
  const auto attrs = box_attrs(box);
  for (std::int64_t c = 0; c < det::kRegressChannels; ++c)
    box_in.at(0, c) = attrs[static_cast<std::size_t>(c)];
  nn::ReLU rc, rb;
  Tensor v = cls2_.forward(rc.forward(cls1_.forward(cls_in, false), false), false);
  v.add_scaled(box2_.forward(rb.forward(box1_.forward(box_in, false), false), false));
  return v.reshaped({d_});
}

void LabelEncoder::params(std::vector<nn::ParamRef>& out) {
  cls1_.params("cls.l1", out);
  cls2_.params("cls.l2", out);
  box1_.params("box.l1", out);
  box2_.params("box.l2", out);
  f1_.params("f.c1", out);
  fbn_.params("f.bn1", out);
  f2_.params("f.c2", out);
}

void LabelEncoder::state(nn::StateDict& out) {
  cls1_.state("cls.l1", out);
  cls2_.state("cls.l2", out);
  box1_.state("box.l1", out);
  box2_.state("box.l2", out);
  f1_.state("f.c1", out);
  fbn_.state("f.bn1", out);
  f2_.state("f.c2", out);
}

// ---------------------------------------------------------------------------
// Training

namespace {

// Symmetric masked MSE used by the labelenc-style alignment term; both sides
// are trainable.
double aligned_masked_mse(const Tensor& a, const Tensor& b, const Tensor& mask, std::int64_t n_p,
                          Tensor* d_a, Tensor* d_b) {
  if (n_p == 0) return 0.0;
  const std::int64_t c = a.size(0), hw = a.size(1) * a.size(2);
  const double inv = 1.0 / static_cast<double>(n_p);
  double loss = 0.0;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t k = 0; k < hw; ++k) {
      const double m = mask[k];
      if (m == 0.0) continue;
      const double diff = a[ch * hw + k] - b[ch * hw + k];
      loss += m * diff * diff;
      if (d_a) (*d_a)[ch * hw + k] += 2.0 * m * diff * inv;
      if (d_b) (*d_b)[ch * hw + k] += -2.0 * m * diff * inv;
    }
  }
  return loss * inv;
}

}  // namespace

EncoderTrainResult train_label_encoder(LabelEncoder& encoder, det::TeacherModel& teacher,
                                       const std::vector<world::Scene>& train_scenes,
                                       const std::vector<world::Scene>& val_scenes,
                                       const EncoderTrainContext& ctx, const TrainSchedule& schedule,
                                       EncoderVariant variant, det::StudentModel* baseline_student,
                                       Rng& rng) {
  if (variant == EncoderVariant::kLabelEnc && baseline_student == nullptr)
    throw Error(ErrorKind::kMissingArtifact,
                "labelenc variant requires a trained baseline student model");

  EncoderTrainResult result;
  nn::StateDict teacher_state;
  teacher.state(teacher_state);
  result.teacher_hash_before = nn::params_hash(teacher_state);

  // Comparison variants decode through a fresh head trained from scratch
  // instead of the pretrained teacher head.
  std::unique_ptr<det::DetectionHead> replica;
  Rng init_rng = rng.child(0x11ab);
  if (variant != EncoderVariant::kInverse)
    replica = std::make_unique<det::DetectionHead>(encoder.out_channels(), ctx.head_width,
                                                   teacher.num_classes(), init_rng);
  std::unique_ptr<nn::Conv2d> projection;  // student C_S -> C_T for alignment
  if (variant == EncoderVariant::kLabelEnc) {
    projection = std::make_unique<nn::Conv2d>(baseline_student->channels(), encoder.out_channels(), 1);
    projection->init(init_rng);
  }

  std::vector<nn::ParamRef> params;
  encoder.params(params);
  if (replica) replica->params("replica_head", params);
  if (projection) projection->params("align_proj", params);

  // Per-scene targets are pure functions of the dataset; compute once.
  std::vector<det::GtTargets> targets;
  std::vector<bev::ForegroundMask> masks;
  targets.reserve(train_scenes.size());
  for (const auto& scene : train_scenes) {
    targets.push_back(det::encode_gt(scene, ctx.grid, teacher.num_classes(), ctx.heatmap));
    masks.push_back(bev::foreground_mask(targets.back().heatmap, ctx.tau));
  }

  nn::AdamW opt(schedule.lr, schedule.weight_decay);
  Rng shuffle_rng = rng.child(0x5e0f);
  std::vector<std::size_t> order(train_scenes.size());
  std::iota(order.begin(), order.end(), 0);

  const std::int64_t m = teacher.num_classes();
  for (int epoch = 1; epoch <= schedule.epochs; ++epoch) {
    opt.set_lr(schedule.lr_at_epoch(epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(
                                  shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    double epoch_loss = 0.0;
    std::int64_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(schedule.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(schedule.batch_size));
      const std::int64_t bsz = static_cast<std::int64_t>(end - start);
      std::vector<const world::Scene*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&train_scenes[order[k]]);

      nn::zero_grads(params);
      Tensor f_label = encoder.forward(batch, ctx.grid, /*train=*/true);
      det::TeacherModel::Out head_out;
      if (variant == EncoderVariant::kInverse) {
        head_out = teacher.head_forward(f_label);
      } else {
        auto out = replica->forward(f_label);
        head_out.heatmap = std::move(out.heatmap);
        head_out.regress = std::move(out.regress);
      }

      Tensor d_hm(head_out.heatmap.shape());
      Tensor d_reg(head_out.regress.shape());
      double batch_loss = 0.0;
      for (std::int64_t slot = 0; slot < bsz; ++slot) {
        const std::size_t idx = order[start + static_cast<std::size_t>(slot)];
        const auto parts =
            distill::detection_loss(head_out.heatmap, head_out.regress, nullptr, slot, 0,
                                    targets[idx], nullptr, ctx.weights, ctx.weights.focal_gamma,
                                    &d_hm, &d_reg, nullptr);
        batch_loss += parts.weighted_total(ctx.weights);
      }
      const double inv_b = 1.0 / static_cast<double>(bsz);
      d_hm.scale(inv_b);
      d_reg.scale(inv_b);

      Tensor d_f_label = variant == EncoderVariant::kInverse
                             ? teacher.head_backward_frozen(d_hm, d_reg)
                             : replica->backward(d_hm, d_reg);

      if (variant == EncoderVariant::kLabelEnc) {
        const Tensor pano = baseline_student->panorama_batch(batch);
        const auto student_out = baseline_student->forward(pano, /*train=*/false, /*cache=*/false);
        Tensor proj = projection->forward(student_out.f_image, /*cache=*/true);
        Tensor d_proj(proj.shape());
        const std::int64_t chw = encoder.out_channels() * ctx.grid.height * ctx.grid.width;
        double align_loss = 0.0;
        for (std::int64_t slot = 0; slot < bsz; ++slot) {
          const std::size_t idx = order[start + static_cast<std::size_t>(slot)];
          Tensor fl({encoder.out_channels(), ctx.grid.height, ctx.grid.width});
          std::copy(f_label.data() + slot * chw, f_label.data() + (slot + 1) * chw, fl.data());
          Tensor pj({encoder.out_channels(), ctx.grid.height, ctx.grid.width});
          std::copy(proj.data() + slot * chw, proj.data() + (slot + 1) * chw, pj.data());
          Tensor d_fl(fl.shape()), d_pj(pj.shape());
          align_loss += aligned_masked_mse(fl, pj, masks[idx].mask, masks[idx].n_p, &d_fl, &d_pj);
          for (std::int64_t k = 0; k < chw; ++k) {
            d_f_label[slot * chw + k] += ctx.align_weight * d_fl[k] * inv_b;
            d_proj[slot * chw + k] += ctx.align_weight * d_pj[k] * inv_b;
          }
        }
        batch_loss += ctx.align_weight * align_loss;
        projection->backward(d_proj, /*param_grads=*/true, /*need_dx=*/false);
      }

      if (!std::isfinite(batch_loss)) {
        std::ostringstream ss;
        ss << "label encoder training diverged: non-finite loss at epoch " << epoch << ", batch "
           << start / static_cast<std::size_t>(schedule.batch_size);
        throw Error(ErrorKind::kRuntime, ss.str());
      }

      encoder.backward(d_f_label);
      opt.step(params);
      epoch_loss += batch_loss;
      seen += bsz;
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
    (void)m;
  }

  det::DetectionHead& eval_head = replica ? *replica : teacher.head();
  result.autoencoder_metrics = autoencoder_eval(encoder, eval_head, val_scenes, ctx);

  nn::StateDict after;
  teacher.state(after);
  result.teacher_hash_after = nn::params_hash(after);
  if (result.teacher_hash_after != result.teacher_hash_before)
    throw Error(ErrorKind::kRuntime, "frozen teacher parameters changed during label encoder training");
  return result;
}

evalkit::Metrics autoencoder_eval(LabelEncoder& encoder, det::DetectionHead& head,
                                  const std::vector<world::Scene>& scenes,
                                  const EncoderTrainContext& ctx) {
  std::vector<evalkit::PredBox> preds;
  std::vector<evalkit::GtBox> gts;
  std::int64_t det_id = 0;
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < scenes.size(); start += kChunk) {
    const std::size_t end = std::min(scenes.size(), start + kChunk);
    std::vector<const world::Scene*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&scenes[i]);
    const Tensor f_label = encoder.forward(batch, ctx.grid, /*train=*/false, /*cache=*/false);
    const auto out = head.forward(f_label, /*cache=*/false);
    for (std::size_t i = start; i < end; ++i) {
      const auto maps = det::slice_maps(out.heatmap, out.regress, static_cast<std::int64_t>(i - start));
      for (const auto& d : det::head_decode(maps, ctx.grid, ctx.score_thresh, ctx.k_max))
        preds.push_back({d.box, d.score, scenes[i].scene_id, det_id++});
      for (const auto& b : scenes[i].boxes) gts.push_back({b, scenes[i].scene_id});
    }
  }
  return evalkit::evaluate(preds, gts, head.num_classes(), ctx.thresholds, ctx.tp_threshold);
}

}  // namespace bevkd::labelenc
