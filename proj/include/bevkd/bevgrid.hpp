#pragma once

#include <cstdint>
#include <vector>

#include "bevkd/synthworld.hpp"
#include "bevkd/tensor.hpp"

namespace bevkd::bev {

// BEV grid geometry. Cell (i, j) spans rows along y and columns along x;
// origin is the world coordinate of the (0, 0) cell corner.
struct BevGridSpec {
  std::int32_t height = 64;
  std::int32_t width = 64;
  double cell_size = 0.625;
  double origin_x = -20.0;
  double origin_y = 0.0;

  static BevGridSpec covering(const world::WorldSpec& world, std::int32_t cells);

  void validate() const;
  double cell_center_x(std::int64_t j) const { return origin_x + (j + 0.5) * cell_size; }
  double cell_center_y(std::int64_t i) const { return origin_y + (i + 0.5) * cell_size; }
  bool cell_of(double x, double y, std::int64_t* i, std::int64_t* j) const;

  bool operator==(const BevGridSpec&) const = default;
};

struct FeatureMap {
  BevGridSpec grid;
  Tensor data;  // [C, H, W]
  std::int64_t channels() const { return data.size(0); }
};

// Per-class center heatmap in [0, 1]; each object's center cell holds the
// per-object peak value 1 before overlaps are max-combined.
struct Heatmap {
  BevGridSpec grid;
  Tensor data;  // [m, H, W]
};

struct ForegroundMask {
  BevGridSpec grid;
  Tensor mask;           // [H, W], values 0 or 1
  std::int64_t n_p = 0;  // positive cell count
};

struct HeatmapParams {
  double beta = 0.5;   // radius scale on min(w, l)
  double r_min = 2.0;  // radius floor, cells
};

// Gaussian splat per object at its center cell, radius max(r_min,
// beta*min(w,l)/cell), sigma = radius/3; overlapping splats max-combined.
Heatmap gt_heatmap(const world::Scene& scene, const BevGridSpec& grid, std::int32_t num_classes,
                   const HeatmapParams& params);

double splat_radius(const world::BoxLabel& box, const BevGridSpec& grid, const HeatmapParams& params);

ForegroundMask foreground_mask(const Heatmap& heatmap, double tau);

struct Cell {
  std::int64_t i = 0;
  std::int64_t j = 0;
  bool operator==(const Cell&) const = default;
};

// Cells whose centers lie inside the box; never empty (the cell containing
// the box center is always included).
std::vector<Cell> box_footprint(const world::BoxLabel& box, const BevGridSpec& grid);

// The mapping function q: rasterize one feature vector per box into its
// footprint, rendering larger footprints first so smaller boxes win overlaps.
// `owner` (if non-null) records which box wrote each cell (-1 background),
// which the label-encoder backward uses to route gradients.
Tensor map_to_bev(const std::vector<Tensor>& per_object_vectors,
                  const std::vector<world::BoxLabel>& boxes, const BevGridSpec& grid,
                  std::vector<std::int32_t>* owner = nullptr);

}  // namespace bevkd::bev
