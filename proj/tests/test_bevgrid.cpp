#include <doctest.h>

#include <algorithm>
#include <set>

#include "bevkd/bevgrid.hpp"
#include "bevkd/util.hpp"
#include "test_support.hpp"

using namespace bevkd;
using namespace bevkd::bev;
using bevkd::world::BoxLabel;
using bevkd::world::Scene;

namespace {

BevGridSpec unit_grid(int cells, double cell = 1.0, double ox = 0.0, double oy = 0.0) {
  return {cells, cells, cell, ox, oy};
}

// Independent point-in-polygon via cross products on the corner loop.
bool in_polygon(const std::array<Vec2, 4>& poly, Vec2 p) {
  double sign = 0.0;
  for (int i = 0; i < 4; ++i) {
    const Vec2 a = poly[static_cast<std::size_t>(i)];
    const Vec2 b = poly[static_cast<std::size_t>((i + 1) % 4)];
    const double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    if (std::abs(cross) < 1e-12) continue;
    if (sign == 0.0)
      sign = cross > 0 ? 1.0 : -1.0;
    else if ((cross > 0 ? 1.0 : -1.0) != sign)
      return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("bevgrid") {

TEST_CASE("single object peaks at exactly one") {
  const BevGridSpec grid = unit_grid(16);
  Scene s;
  s.boxes = {{0, 8.5f, 8.5f, 2.0f, 2.0f, 0.0f}};
  const Heatmap hm = gt_heatmap(s, grid, 2, {});
  CHECK(hm.data.at(0, 8, 8) == 1.0);
  double max_other = 0.0;
  for (long i = 0; i < 16; ++i)
    for (long j = 0; j < 16; ++j)
      if (i != 8 || j != 8) max_other = std::max(max_other, hm.data.at(0, i, j));
  CHECK(max_other < 1.0);
  for (long i = 0; i < hm.data.numel(); ++i) {
    CHECK(hm.data[i] >= 0.0);
    CHECK(hm.data[i] <= 1.0);
  }
}

TEST_CASE("empty scene gives an all-zero heatmap") {
  Scene s;
  const Heatmap hm = gt_heatmap(s, unit_grid(8), 3, {});
  CHECK(hm.data.max_abs() == 0.0);
}

TEST_CASE("overlapping same-class splats combine by max") {
  const BevGridSpec grid = unit_grid(24);
  Scene s;
  s.boxes = {{0, 10.5f, 10.5f, 4.0f, 4.0f, 0.0f}, {0, 13.5f, 10.5f, 4.0f, 4.0f, 0.0f}};
  const HeatmapParams params{0.5, 2.0};
  const Heatmap hm = gt_heatmap(s, grid, 1, params);
  // Pointwise oracle: evaluate both gaussians directly.
  for (long i = 0; i < 24; ++i) {
    for (long j = 0; j < 24; ++j) {
      double expected = 0.0;
      for (const auto& b : s.boxes) {
        std::int64_t ci, cj;
        grid.cell_of(b.x, b.y, &ci, &cj);
        const double r = std::max(params.r_min, params.beta * std::min(b.w, b.l) / grid.cell_size);
        const double sigma = r / 3.0;
        const double d2 = static_cast<double>((i - ci) * (i - ci) + (j - cj) * (j - cj));
        const double v = std::exp(-d2 / (2.0 * sigma * sigma));
        if (v > 1e-4) expected = std::max(expected, v);
      }
      if (expected > 1e-4) CHECK(hm.data.at(0, i, j) == doctest::Approx(expected).epsilon(1e-9));
    }
  }
}

TEST_CASE("box center outside the grid is an error naming the box") {
  Scene s;
  s.boxes = {{0, 100.0f, 100.0f, 2.0f, 2.0f, 0.0f}};
  CHECK_THROWS_WITH_AS(gt_heatmap(s, unit_grid(8), 1, {}), doctest::Contains("box 0"), Error);
}

TEST_CASE("foreground mask counts cells above tau") {
  const BevGridSpec grid = unit_grid(32);
  Scene s;
  s.boxes = {{0, 16.5f, 16.5f, 3.0f, 3.0f, 0.0f}};
  const HeatmapParams params{0.5, 2.0};
  const Heatmap hm = gt_heatmap(s, grid, 1, params);
  const ForegroundMask mask = foreground_mask(hm, 0.1);

  // Enumeration oracle straight from the gaussian formula.
  const double r = std::max(params.r_min, params.beta * 3.0 / grid.cell_size);
  const double sigma = r / 3.0;
  long expected = 0;
  for (long i = 0; i < 32; ++i)
    for (long j = 0; j < 32; ++j) {
      const double d2 = static_cast<double>((i - 16) * (i - 16) + (j - 16) * (j - 16));
      if (std::exp(-d2 / (2.0 * sigma * sigma)) >= 0.1) ++expected;
    }
  CHECK(mask.n_p == expected);

  long recount = 0;
  for (long k = 0; k < mask.mask.numel(); ++k)
    if (mask.mask[k] != 0.0) ++recount;
  CHECK(recount == mask.n_p);
}

TEST_CASE("empty heatmap gives an empty mask") {
  Scene s;
  const Heatmap hm = gt_heatmap(s, unit_grid(8), 2, {});
  const ForegroundMask mask = foreground_mask(hm, 0.1);
  CHECK(mask.n_p == 0);
  CHECK(mask.mask.max_abs() == 0.0);
}

TEST_CASE("tau near one keeps only object centers") {
  const BevGridSpec grid = unit_grid(24);
  Scene s;
  s.boxes = {{0, 6.5f, 6.5f, 2.0f, 2.0f, 0.0f}, {0, 17.5f, 17.5f, 2.0f, 2.0f, 0.0f}};
  const Heatmap hm = gt_heatmap(s, grid, 1, {});
  const ForegroundMask mask = foreground_mask(hm, 1.0 - 1e-12);
  CHECK(mask.n_p == 2);
  CHECK(mask.mask.at(6, 6) == 1.0);
  CHECK(mask.mask.at(17, 17) == 1.0);
}

TEST_CASE("axis aligned box covering four cells") {
  const BevGridSpec grid = unit_grid(8);
  const BoxLabel box{0, 2.0f, 2.0f, 2.0f, 2.0f, 0.0f};
  const auto cells = box_footprint(box, grid);
  std::set<std::pair<long, long>> got;
  for (const auto& c : cells) got.insert({c.i, c.j});
  const std::set<std::pair<long, long>> want = {{1, 1}, {1, 2}, {2, 1}, {2, 2}};
  CHECK(got == want);
}

TEST_CASE("sub-cell box still owns its center cell") {
  const BevGridSpec grid = unit_grid(8);
  const BoxLabel box{0, 3.1f, 4.9f, 0.2f, 0.2f, 0.3f};
  const auto cells = box_footprint(box, grid);
  REQUIRE(cells.size() == 1);
  CHECK(cells[0].i == 4);
  CHECK(cells[0].j == 3);
}

TEST_CASE("rotated footprints match a point-in-polygon oracle") {
  const BevGridSpec grid = unit_grid(16, 0.5, -4.0, -4.0);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    BoxLabel box;
    box.class_id = 0;
    box.x = static_cast<float>(rng.uniform(-2.0, 2.0));
    box.y = static_cast<float>(rng.uniform(-2.0, 2.0));
    box.w = static_cast<float>(rng.uniform(0.4, 2.0));
    box.l = static_cast<float>(rng.uniform(0.4, 2.0));
    box.yaw = static_cast<float>(rng.uniform(-M_PI, M_PI));
    const auto cells = box_footprint(box, grid);
    std::set<std::pair<long, long>> got;
    for (const auto& c : cells) got.insert({c.i, c.j});

    const auto poly = box.rect().corners();
    std::int64_t ci, cj;
    grid.cell_of(box.x, box.y, &ci, &cj);
    for (long i = 0; i < 16; ++i) {
      for (long j = 0; j < 16; ++j) {
        const bool inside = in_polygon(poly, {grid.cell_center_x(j), grid.cell_center_y(i)});
        const bool is_center = i == ci && j == cj;
        if (inside || is_center)
          CHECK(got.count({i, j}) == 1);
        else
          CHECK(got.count({i, j}) == 0);
      }
    }
  }
}

TEST_CASE("map_to_bev duplicates the vector over the footprint") {
  const BevGridSpec grid = unit_grid(8);
  const BoxLabel box{0, 4.0f, 4.0f, 2.0f, 2.0f, 0.0f};
  Tensor v({3});
  v[0] = 1.5;
  v[1] = -2.0;
  v[2] = 0.25;
  const Tensor out = map_to_bev({v}, {box}, grid);
  const auto cells = box_footprint(box, grid);
  long nonzero_cells = 0;
  for (long i = 0; i < 8; ++i)
    for (long j = 0; j < 8; ++j) {
      const bool in_fp = std::any_of(cells.begin(), cells.end(),
                                     [&](const Cell& c) { return c.i == i && c.j == j; });
      for (long c = 0; c < 3; ++c) {
        if (in_fp)
          CHECK(out.at(c, i, j) == v[c]);
        else
          CHECK(out.at(c, i, j) == 0.0);
      }
      if (in_fp) ++nonzero_cells;
    }
  CHECK(nonzero_cells == static_cast<long>(cells.size()));
}

TEST_CASE("map_to_bev rejects count mismatches and handles zero boxes") {
  const BevGridSpec grid = unit_grid(8);
  CHECK_THROWS_AS(map_to_bev({Tensor({2})}, {}, grid), Error);
  const Tensor out = map_to_bev({}, {}, grid);
  CHECK(out.numel() == 0);
}

TEST_CASE("smaller boxes win overlaps") {
  const BevGridSpec grid = unit_grid(12);
  const BoxLabel big{0, 6.0f, 6.0f, 6.0f, 6.0f, 0.0f};
  const BoxLabel small{1, 6.0f, 6.0f, 1.5f, 1.5f, 0.0f};
  Tensor vb({1}), vs({1});
  vb[0] = 1.0;
  vs[0] = 2.0;
  SUBCASE("big first") {
    const Tensor out = map_to_bev({vb, vs}, {big, small}, grid);
    CHECK(out.at(0, 5, 5) == 2.0);
    CHECK(out.at(0, 3, 3) == 1.0);
  }
  SUBCASE("small first") {
    const Tensor out = map_to_bev({vs, vb}, {small, big}, grid);
    CHECK(out.at(0, 5, 5) == 2.0);
    CHECK(out.at(0, 3, 3) == 1.0);
  }
}

TEST_CASE("disjoint footprints are order independent") {
  const BevGridSpec grid = unit_grid(16);
  const BoxLabel a{0, 3.0f, 3.0f, 2.0f, 2.0f, 0.4f};
  const BoxLabel b{1, 11.0f, 11.0f, 2.5f, 1.5f, -0.9f};
  Tensor va({2}), vb({2});
  va[0] = 1.0;
  va[1] = 2.0;
  vb[0] = -1.0;
  vb[1] = 3.0;
  const Tensor o1 = map_to_bev({va, vb}, {a, b}, grid);
  const Tensor o2 = map_to_bev({vb, va}, {b, a}, grid);
  REQUIRE(o1.numel() == o2.numel());
  for (long i = 0; i < o1.numel(); ++i) CHECK(o1[i] == o2[i]);
}

TEST_CASE("heatmap is invariant to object order") {
  const BevGridSpec grid = unit_grid(24);
  Scene s1;
  s1.boxes = {{0, 5.0f, 5.0f, 2.0f, 3.0f, 0.2f},
              {1, 12.0f, 14.0f, 1.0f, 1.0f, -0.5f},
              {0, 19.0f, 7.0f, 2.5f, 4.0f, 1.1f}};
  Scene s2 = s1;
  std::rotate(s2.boxes.begin(), s2.boxes.begin() + 1, s2.boxes.end());
  const Heatmap h1 = gt_heatmap(s1, grid, 2, {});
  const Heatmap h2 = gt_heatmap(s2, grid, 2, {});
  for (long i = 0; i < h1.data.numel(); ++i) CHECK(h1.data[i] == h2.data[i]);
}

TEST_CASE("mask cells stay within the analytic gaussian radius of a center") {
  const auto cfg = oracle::tiny_config();
  const auto scenes = bevkd::world::make_dataset(cfg.world, 20, 3);
  const auto grid = cfg.grid();
  const double tau = 0.15;
  for (const auto& s : scenes) {
    const Heatmap hm = gt_heatmap(s, grid, cfg.world.num_classes, cfg.heatmap);
    const ForegroundMask mask = foreground_mask(hm, tau);
    for (long i = 0; i < grid.height; ++i) {
      for (long j = 0; j < grid.width; ++j) {
        if (mask.mask.at(i, j) == 0.0) continue;
        bool covered = false;
        for (const auto& b : s.boxes) {
          std::int64_t ci, cj;
          grid.cell_of(b.x, b.y, &ci, &cj);
          const double r = splat_radius(b, grid, cfg.heatmap);
          const double sigma = r / 3.0;
          const double bound = sigma * std::sqrt(2.0 * std::log(1.0 / tau)) + 1.0;
          const double d = std::hypot(static_cast<double>(i - ci), static_cast<double>(j - cj));
          if (d <= bound) covered = true;
        }
        CHECK(covered);
      }
    }
  }
}

}  // TEST_SUITE
