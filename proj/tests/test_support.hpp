#pragma once

// Shared fixtures and independent oracle implementations used by the unit
// suites and the acceptance harness. Everything here is deliberately written
// as plain scalar loops, separate from the library's vectorized paths, so it
// can serve as a reference the implementation is checked against.

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "bevkd/config.hpp"
#include "bevkd/detectors.hpp"
#include "bevkd/distill.hpp"
#include "bevkd/evalkit.hpp"
#include "bevkd/nn.hpp"
#include "bevkd/rng.hpp"
#include "bevkd/synthworld.hpp"
#include "bevkd/tensor.hpp"

namespace oracle {

using bevkd::Tensor;

// ---------------------------------------------------------------------------
// Naive loss references (double loops, no shared helpers)

inline double qfl_term(double p, double t, double gamma) {
  const double eps = 1e-12;
  double pc = p;
  if (pc < eps) pc = eps;
  if (pc > 1.0 - eps) pc = 1.0 - eps;
  const double ce = t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc);
  return -std::pow(std::abs(t - pc), gamma) * ce;
}

inline double naive_masked_feature_loss(const Tensor& target, const Tensor& adapted,
                                        const Tensor& mask, long n_p) {
  if (n_p == 0) return 0.0;
  double acc = 0.0;
  const long c = target.size(0), h = target.size(1), w = target.size(2);
  for (long ch = 0; ch < c; ++ch)
    for (long i = 0; i < h; ++i)
      for (long j = 0; j < w; ++j) {
        const double d = target.at(ch, i, j) - adapted.at(ch, i, j);
        acc += mask.at(i, j) * d * d;
      }
  return acc / static_cast<double>(n_p);
}

inline double naive_response_loss(const Tensor& t_hm, const Tensor& t_reg, const Tensor& s_hm,
                                  const Tensor& s_reg, const Tensor& mask, long n_fg,
                                  double gamma) {
  if (n_fg == 0) return 0.0;
  double cls = 0.0, bbox = 0.0;
  const long m = t_hm.size(0), h = t_hm.size(1), w = t_hm.size(2);
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j) {
      if (mask.at(i, j) == 0.0) continue;
      for (long c = 0; c < m; ++c) cls += qfl_term(s_hm.at(c, i, j), t_hm.at(c, i, j), gamma);
      for (long c = 0; c < 6; ++c) bbox += std::abs(s_reg.at(c, i, j) - t_reg.at(c, i, j));
    }
  return (cls + bbox) / static_cast<double>(n_fg);
}

struct NaiveDetParts {
  double heatmap = 0.0, regress = 0.0, depth = 0.0;
};

inline NaiveDetParts naive_detection_loss(const Tensor& hm, const Tensor& reg,
                                          const bevkd::det::GtTargets& gt,
                                          const std::vector<double>* depth_rows, long depth_bins,
                                          const std::vector<int>* depth_targets, double gamma) {
  NaiveDetParts parts;
  const long m = hm.size(0), h = hm.size(1), w = hm.size(2);
  const long n_obj = static_cast<long>(gt.center_cells.size());
  const double inv = 1.0 / std::max<long>(1, n_obj);
  for (long c = 0; c < m; ++c)
    for (long i = 0; i < h; ++i)
      for (long j = 0; j < w; ++j)
        parts.heatmap += qfl_term(hm.at(c, i, j), gt.heatmap.data.at(c, i, j), gamma);
  parts.heatmap *= inv;
  for (long b = 0; b < n_obj; ++b) {
    const auto [ci, cj] = gt.center_cells[static_cast<std::size_t>(b)];
    for (long c = 0; c < 6; ++c)
      parts.regress += std::abs(reg.at(c, ci, cj) - gt.reg_targets.at(b, c));
  }
  parts.regress *= inv;
  if (depth_rows && depth_targets) {
    long hits = 0;
    double acc = 0.0;
    for (std::size_t a = 0; a < depth_targets->size(); ++a) {
      const int t = (*depth_targets)[a];
      if (t < 0) continue;
      ++hits;
      acc += -std::log(std::max((*depth_rows)[a * static_cast<std::size_t>(depth_bins) +
                                              static_cast<std::size_t>(t)],
                                1e-300));
    }
    if (hits > 0) parts.depth = acc / static_cast<double>(hits);
  }
  return parts;
}

inline double naive_total(double det, double l1v, double l2v, double l3v, double l1, double l2,
                          double l3) {
  return det + l1 * l1v + l2 * l2v + l3 * l3v;
}

// ---------------------------------------------------------------------------
// From-scratch metric recomputation (criterion oracle)

struct SimplePred {
  int cls;
  double x, y, w, l, yaw, score;
  long scene, id;
};
struct SimpleGt {
  int cls;
  double x, y, w, l, yaw;
  long scene;
};

inline double wrap_pi(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a <= -M_PI) a += 2.0 * M_PI;
  return a;
}

struct SimpleMetrics {
  double map = 0.0, nds = 0.0, mate = 1.0, mase = 1.0, maoe = 1.0;
};

inline SimpleMetrics naive_metrics(std::vector<SimplePred> preds, const std::vector<SimpleGt>& gts,
                                   int num_classes, const std::vector<double>& thresholds,
                                   double tp_threshold) {
  SimpleMetrics out;
  double ap_sum = 0.0;
  int ap_terms = 0;
  std::vector<double> te, se, oe;

  for (int cls = 0; cls < num_classes; ++cls) {
    std::vector<SimplePred> p;
    for (const auto& q : preds)
      if (q.cls == cls) p.push_back(q);
    std::sort(p.begin(), p.end(), [](const SimplePred& a, const SimplePred& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.id < b.id;
    });
    std::vector<SimpleGt> g;
    for (const auto& q : gts)
      if (q.cls == cls) g.push_back(q);

    for (double thr : thresholds) {
      if (g.empty()) continue;
      std::vector<bool> used(g.size(), false);
      std::vector<int> flags;
      for (const auto& q : p) {
        int best = -1;
        double best_d = 1e18;
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (used[k] || g[k].scene != q.scene) continue;
          const double d = std::hypot(q.x - g[k].x, q.y - g[k].y);
          if (d <= thr && d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
          }
        }
        if (best >= 0) {
          used[static_cast<std::size_t>(best)] = true;
          flags.push_back(1);
          if (thr == tp_threshold) {
            const auto& gt = g[static_cast<std::size_t>(best)];
            te.push_back(best_d);
            se.push_back(1.0 - (std::min(q.w, gt.w) / std::max(q.w, gt.w)) *
                                   (std::min(q.l, gt.l) / std::max(q.l, gt.l)));
            oe.push_back(std::abs(wrap_pi(q.yaw - gt.yaw)));
          }
        } else {
          flags.push_back(0);
        }
      }
      // 41-point interpolated AP.
      double ap = 0.0;
      for (int r = 0; r <= 40; ++r) {
        const double level = r / 40.0;
        double best_prec = 0.0;
        double tp = 0.0, fp = 0.0;
        for (std::size_t k = 0; k < flags.size(); ++k) {
          if (flags[k])
            tp += 1.0;
          else
            fp += 1.0;
          if (tp / static_cast<double>(g.size()) >= level)
            best_prec = std::max(best_prec, tp / (tp + fp));
        }
        ap += best_prec;
      }
      ap_sum += ap / 41.0;
      ++ap_terms;
    }
  }
  out.map = ap_terms > 0 ? ap_sum / ap_terms : (preds.empty() ? 1.0 : 0.0);
  if (!te.empty()) {
    out.mate = 0.0;
    out.mase = 0.0;
    out.maoe = 0.0;
    for (double v : te) out.mate += v;
    for (double v : se) out.mase += v;
    for (double v : oe) out.maoe += v;
    out.mate /= static_cast<double>(te.size());
    out.mase /= static_cast<double>(se.size());
    out.maoe /= static_cast<double>(oe.size());
  } else if (gts.empty() && preds.empty()) {
    out.mate = out.mase = out.maoe = 0.0;
  }
  out.nds = (5.0 * out.map + (1.0 - std::min(1.0, out.mate / 4.0)) +
             (1.0 - std::min(1.0, out.mase)) + (1.0 - std::min(1.0, out.maoe / M_PI))) /
            8.0;
  return out;
}

// ---------------------------------------------------------------------------
// Central-difference gradient checking

struct GradCheckResult {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Probes `count` parameter entries spread across the given parameter list.
// `loss` must re-run the forward pass; the analytic gradients must already be
// populated from one backward pass at the unperturbed point. Each probe
// retries with smaller steps so a ReLU/L1 kink inside the stencil does not
// masquerade as a gradient bug (a real bug stays wrong at every step size).
inline GradCheckResult finite_difference_check(const std::vector<bevkd::nn::ParamRef>& params,
                                               const std::function<double()>& loss, int count,
                                               double h = 1e-5) {
  GradCheckResult res;
  long total = 0;
  for (const auto& p : params) total += p.value->numel();
  bevkd::Rng rng(1234);
  for (int probe = 0; probe < count; ++probe) {
    long flat = rng.uniform_int(0, total - 1);
    const bevkd::nn::ParamRef* target = nullptr;
    for (const auto& p : params) {
      if (flat < p.value->numel()) {
        target = &p;
        break;
      }
      flat -= p.value->numel();
    }
    double& value = (*target->value)[flat];
    const double saved = value;
    const double analytic = (*target->grad)[flat];
    double best_rel = std::numeric_limits<double>::infinity();
    double best_numeric = 0.0;
    for (const double step : {h, h / 8.0, h / 64.0}) {
      value = saved + step;
      const double up = loss();
      value = saved - step;
      const double down = loss();
      value = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      const double rel = std::abs(numeric - analytic) / scale;
      if (rel < best_rel) {
        best_rel = rel;
        best_numeric = numeric;
      }
      if (best_rel < 1e-6) break;
    }
    if (best_rel > res.max_rel_err) {
      res.max_rel_err = best_rel;
      res.worst_analytic = analytic;
      res.worst_numeric = best_numeric;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Small world/config fixtures

inline bevkd::config::ExperimentConfig tiny_config() {
  bevkd::config::ExperimentConfig cfg;
  cfg.seed = 7;
  cfg.world = bevkd::world::WorldSpec::defaults();
  cfg.world.extent = 20.0f;
  cfg.world.max_objects = 3;
  cfg.world.azimuth_bins = 32;
  cfg.world.density_k = 60.0f;
  cfg.world.seed = 7;
  cfg.grid_cells = 16;
  cfg.model.teacher_channels = 8;
  cfg.model.student_channels = 6;
  cfg.model.embed_dim = 8;
  cfg.model.depth_bins = 6;
  cfg.model.head_width = 8;
  cfg.model.column_width = 12;
  cfg.partition = {2, 2, 2};
  cfg.data.train_scenes = 12;
  cfg.data.val_scenes = 6;
  cfg.teacher_stage = {2, 2e-3, 4, 0.01, {}, 0.1, 0};
  cfg.labelenc_stage = {2, 1e-3, 4, 0.01, {}, 0.1, 0};
  cfg.student_stage = {2, 1e-3, 4, 0.01, {}, 0.1, 0};
  return cfg;
}

}  // namespace oracle
