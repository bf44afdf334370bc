#include "bevkd/bevgrid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bevkd/util.hpp"

namespace bevkd::bev {

BevGridSpec BevGridSpec::covering(const world::WorldSpec& world, std::int32_t cells) {
  BevGridSpec g;
  g.height = cells;
  g.width = cells;
  g.cell_size = static_cast<double>(world.extent) / cells;
  g.origin_x = -0.5 * world.extent;
  g.origin_y = 0.0;
  return g;
}

void BevGridSpec::validate() const {
  if (height <= 0 || width <= 0 || cell_size <= 0.0)
    throw Error(ErrorKind::kConfig, "grid dimensions and cell_size must be positive");
}

bool BevGridSpec::cell_of(double x, double y, std::int64_t* i, std::int64_t* j) const {
  const std::int64_t jj = static_cast<std::int64_t>(std::floor((x - origin_x) / cell_size));
  const std::int64_t ii = static_cast<std::int64_t>(std::floor((y - origin_y) / cell_size));
  if (i) *i = ii;
  if (j) *j = jj;
  return ii >= 0 && ii < height && jj >= 0 && jj < width;
}

double splat_radius(const world::BoxLabel& box, const BevGridSpec& grid, const HeatmapParams& params) {
  const double r = params.beta * std::min(box.w, box.l) / grid.cell_size;
  return std::max(params.r_min, r);
}

Heatmap gt_heatmap(const world::Scene& scene, const BevGridSpec& grid, std::int32_t num_classes,
                   const HeatmapParams& params) {
  grid.validate();
  Heatmap hm{grid, Tensor({num_classes, grid.height, grid.width})};
  for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
    const world::BoxLabel& box = scene.boxes[b];
    std::int64_t ci, cj;
    if (!grid.cell_of(box.x, box.y, &ci, &cj)) {
      std::ostringstream ss;
      ss << "box " << b << " center (" << box.x << ", " << box.y << ") outside grid";
      throw Error(ErrorKind::kRuntime, ss.str());
    }
    const double r = splat_radius(box, grid, params);
    const double sigma = r / 3.0;
    // Window wide enough that values below ~1e-4 are the only truncation.
    const std::int64_t win = static_cast<std::int64_t>(std::ceil(4.5 * sigma));
    for (std::int64_t i = std::max<std::int64_t>(0, ci - win);
         i <= std::min<std::int64_t>(grid.height - 1, ci + win); ++i) {
      for (std::int64_t j = std::max<std::int64_t>(0, cj - win);
           j <= std::min<std::int64_t>(grid.width - 1, cj + win); ++j) {
        const double d2 = static_cast<double>((i - ci) * (i - ci) + (j - cj) * (j - cj));
        const double v = std::exp(-d2 / (2.0 * sigma * sigma));
        double& cell = hm.data.at(box.class_id, i, j);
        cell = std::max(cell, v);
      }
    }
  }
  return hm;
}

ForegroundMask foreground_mask(const Heatmap& heatmap, double tau) {
  if (tau <= 0.0 || tau >= 1.0) throw Error(ErrorKind::kConfig, "tau must be in (0, 1)");
  const std::int64_t m = heatmap.data.size(0);
  const std::int64_t h = heatmap.data.size(1);
  const std::int64_t w = heatmap.data.size(2);
  ForegroundMask fg{heatmap.grid, Tensor({h, w}), 0};
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      double best = 0.0;
      for (std::int64_t c = 0; c < m; ++c) best = std::max(best, heatmap.data.at(c, i, j));
      if (best >= tau) {
        fg.mask.at(i, j) = 1.0;
        ++fg.n_p;
      }
    }
  }
  return fg;
}

std::vector<Cell> box_footprint(const world::BoxLabel& box, const BevGridSpec& grid) {
  std::vector<Cell> cells;
  const OrientedRect rect = box.rect();
  const auto corners = rect.corners();
  double min_x = corners[0].x, max_x = corners[0].x, min_y = corners[0].y, max_y = corners[0].y;
  for (const auto& c : corners) {
    min_x = std::min(min_x, c.x);
    max_x = std::max(max_x, c.x);
    min_y = std::min(min_y, c.y);
    max_y = std::max(max_y, c.y);
  }
  const std::int64_t j_lo = std::max<std::int64_t>(
      0, static_cast<std::int64_t>(std::floor((min_x - grid.origin_x) / grid.cell_size)));
  const std::int64_t j_hi = std::min<std::int64_t>(
      grid.width - 1, static_cast<std::int64_t>(std::floor((max_x - grid.origin_x) / grid.cell_size)));
  const std::int64_t i_lo = std::max<std::int64_t>(
      0, static_cast<std::int64_t>(std::floor((min_y - grid.origin_y) / grid.cell_size)));
  const std::int64_t i_hi = std::min<std::int64_t>(
      grid.height - 1, static_cast<std::int64_t>(std::floor((max_y - grid.origin_y) / grid.cell_size)));

  std::int64_t ci = -1, cj = -1;
  const bool center_in = grid.cell_of(box.x, box.y, &ci, &cj);
  bool center_covered = false;
  for (std::int64_t i = i_lo; i <= i_hi; ++i) {
    for (std::int64_t j = j_lo; j <= j_hi; ++j) {
      if (rect.contains({grid.cell_center_x(j), grid.cell_center_y(i)})) {
        cells.push_back({i, j});
        if (i == ci && j == cj) center_covered = true;
      }
    }
  }
  if (center_in && !center_covered) cells.push_back({ci, cj});
  return cells;
}

Tensor map_to_bev(const std::vector<Tensor>& per_object_vectors,
                  const std::vector<world::BoxLabel>& boxes, const BevGridSpec& grid,
                  std::vector<std::int32_t>* owner) {
  if (per_object_vectors.size() != boxes.size())
    throw Error(ErrorKind::kRuntime, "map_to_bev: vector/box count mismatch");
  const std::int64_t d = per_object_vectors.empty() ? 0 : per_object_vectors.front().numel();
  for (const Tensor& v : per_object_vectors)
    if (v.numel() != d) throw Error(ErrorKind::kRuntime, "map_to_bev: inconsistent vector widths");

  Tensor out({std::max<std::int64_t>(d, 0), grid.height, grid.width});
  if (owner) owner->assign(static_cast<std::size_t>(grid.height * grid.width), -1);
  if (boxes.empty()) return out;

  std::vector<std::vector<Cell>> footprints(boxes.size());
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t b = 0; b < boxes.size(); ++b) footprints[b] = box_footprint(boxes[b], grid);
  // Decreasing footprint area; later (smaller) boxes overwrite earlier ones.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return footprints[a].size() > footprints[b].size();
  });

  for (std::size_t b : order) {
    const Tensor& v = per_object_vectors[b];
    for (const Cell& cell : footprints[b]) {
      for (std::int64_t c = 0; c < d; ++c) out.at(c, cell.i, cell.j) = v[c];
      if (owner) (*owner)[static_cast<std::size_t>(cell.i * grid.width + cell.j)] =
          static_cast<std::int32_t>(b);
    }
  }
  return out;
}

}  // namespace bevkd::bev
