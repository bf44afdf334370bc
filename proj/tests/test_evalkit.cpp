#include <doctest.h>

#include <algorithm>

#include "bevkd/evalkit.hpp"
#include "test_support.hpp"

using namespace bevkd;
using namespace bevkd::evalkit;

namespace {

PredBox pred(int cls, double x, double y, double score, long scene, long id, double w = 2.0,
             double l = 4.0, double yaw = 0.0) {
  return {{cls, static_cast<float>(x), static_cast<float>(y), static_cast<float>(w),
           static_cast<float>(l), static_cast<float>(yaw)},
          score,
          scene,
          id};
}

GtBox gt(int cls, double x, double y, long scene, double w = 2.0, double l = 4.0,
         double yaw = 0.0) {
  return {{cls, static_cast<float>(x), static_cast<float>(y), static_cast<float>(w),
           static_cast<float>(l), static_cast<float>(yaw)},
          scene};
}

const std::vector<double> kThresholds = {0.5, 1.0, 2.0, 4.0};

}  // namespace

TEST_SUITE("evalkit") {

TEST_CASE("a prediction within threshold is a true positive") {
  const auto result = match({pred(0, 0.0, 5.3, 0.9, 0, 0)}, {gt(0, 0.0, 5.0, 0)}, 1, {0.5});
  REQUIRE(result.entries.size() == 1);
  REQUIRE(result.entries[0].tp_flags.size() == 1);
  CHECK(result.entries[0].tp_flags[0] == 1);
  CHECK(result.entries[0].tps[0].trans_err == doctest::Approx(0.3));
}

TEST_CASE("one gt can absorb only one of two nearby predictions") {
  const auto result = match({pred(0, 0.0, 5.1, 0.9, 0, 0), pred(0, 0.0, 4.9, 0.8, 0, 1)},
                            {gt(0, 0.0, 5.0, 0)}, 1, {2.0});
  REQUIRE(result.entries[0].tp_flags.size() == 2);
  CHECK(result.entries[0].tp_flags[0] == 1);
  CHECK(result.entries[0].tp_flags[1] == 0);
}

TEST_CASE("matching agrees with a brute-force oracle on random scenes") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<GtBox> gts;
    std::vector<PredBox> preds;
    std::vector<oracle::SimpleGt> sgts;
    std::vector<oracle::SimplePred> spreds;
    for (int i = 0; i < 20; ++i) {
      const int cls = static_cast<int>(rng.uniform_int(0, 2));
      const double x = rng.uniform(-15.0, 15.0), y = rng.uniform(0.0, 30.0);
      const double w = rng.uniform(0.5, 3.0), l = rng.uniform(0.5, 5.0);
      const double yaw = rng.uniform(-M_PI, M_PI);
      const long scene = rng.uniform_int(0, 2);
      gts.push_back(gt(cls, x, y, scene, w, l, yaw));
      const auto& gb = gts.back().box;
      sgts.push_back({cls, gb.x, gb.y, gb.w, gb.l, gb.yaw, scene});
      // Noisy matching prediction plus occasional false positive. The oracle
      // sees the same float32-rounded boxes the library stores.
      const double px = x + rng.normal(0.0, 1.0), py = y + rng.normal(0.0, 1.0);
      const double score = rng.uniform(0.1, 1.0);
      preds.push_back(pred(cls, px, py, score, scene, i, w + rng.normal(0.0, 0.2),
                           l + rng.normal(0.0, 0.2), yaw + rng.normal(0.0, 0.2)));
      const auto& pb = preds.back().box;
      spreds.push_back({cls, pb.x, pb.y, pb.w, pb.l, pb.yaw, score, scene, i});
      if (rng.uniform() < 0.3) {
        const double fx = rng.uniform(-15.0, 15.0), fy = rng.uniform(0.0, 30.0);
        const double fscore = rng.uniform(0.1, 1.0);
        preds.push_back(pred(cls, fx, fy, fscore, scene, 100 + i));
        const auto& fb = preds.back().box;
        spreds.push_back({cls, fb.x, fb.y, fb.w, fb.l, fb.yaw, fscore, scene, 100 + i});
      }
    }
    const Metrics mine = evaluate(preds, gts, 3, kThresholds, 2.0);
    const auto ref = oracle::naive_metrics(spreds, sgts, 3, kThresholds, 2.0);
    CHECK(mine.map == doctest::Approx(ref.map).epsilon(1e-12));
    CHECK(mine.errors.mate == doctest::Approx(ref.mate).epsilon(1e-12));
    CHECK(mine.errors.mase == doctest::Approx(ref.mase).epsilon(1e-12));
    CHECK(mine.errors.maoe == doctest::Approx(ref.maoe).epsilon(1e-12));
    CHECK(mine.nds == doctest::Approx(ref.nds).epsilon(1e-12));
  }
}

TEST_CASE("perfect predictions score perfectly") {
  std::vector<GtBox> gts;
  std::vector<PredBox> preds;
  Rng rng(5);
  for (int i = 0; i < 12; ++i) {
    const int cls = i % 3;
    const double x = rng.uniform(-10.0, 10.0), y = rng.uniform(2.0, 30.0);
    gts.push_back(gt(cls, x, y, i / 4));
    preds.push_back(pred(cls, x, y, 0.9, i / 4, i));
  }
  const Metrics m = evaluate(preds, gts, 3, kThresholds, 2.0);
  CHECK(m.map == doctest::Approx(1.0));
  CHECK(m.errors.mate == doctest::Approx(0.0));
  CHECK(m.errors.mase == doctest::Approx(0.0));
  CHECK(m.errors.maoe == doctest::Approx(0.0));
  CHECK(m.nds == doctest::Approx(1.0));
}

TEST_CASE("a pi yaw flip costs the full orientation error") {
  const auto m = evaluate({pred(0, 0.0, 5.0, 0.9, 0, 0, 2.0, 4.0, M_PI)},
                          {gt(0, 0.0, 5.0, 0, 2.0, 4.0, 0.0)}, 1, kThresholds, 2.0);
  CHECK(m.errors.maoe == doctest::Approx(M_PI));
}

TEST_CASE("no true positives reports worst-case errors") {
  const auto m = evaluate({pred(0, 0.0, 25.0, 0.9, 0, 0)}, {gt(0, 0.0, 5.0, 0)}, 1, kThresholds, 2.0);
  CHECK(m.errors.mate == 1.0);
  CHECK(m.errors.mase == 1.0);
  CHECK(m.errors.maoe == 1.0);
}

TEST_CASE("metric bounds hold on random inputs") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<GtBox> gts;
    std::vector<PredBox> preds;
    for (int i = 0; i < 15; ++i) {
      gts.push_back(gt(static_cast<int>(rng.uniform_int(0, 2)), rng.uniform(-10, 10),
                       rng.uniform(0, 30), 0, rng.uniform(0.5, 3), rng.uniform(0.5, 5),
                       rng.uniform(-M_PI, M_PI)));
      preds.push_back(pred(static_cast<int>(rng.uniform_int(0, 2)), rng.uniform(-10, 10),
                           rng.uniform(0, 30), rng.uniform(0, 1), 0, i, rng.uniform(0.5, 3),
                           rng.uniform(0.5, 5), rng.uniform(-M_PI, M_PI)));
    }
    const Metrics m = evaluate(preds, gts, 3, kThresholds, 2.0);
    CHECK(m.map >= 0.0);
    CHECK(m.map <= 1.0);
    CHECK(m.nds >= 0.0);
    CHECK(m.nds <= 1.0);
    CHECK(m.errors.mate >= 0.0);
    CHECK(m.errors.mase >= 0.0);
    CHECK(m.errors.mase <= 1.0);
    CHECK(m.errors.maoe >= 0.0);
    CHECK(m.errors.maoe <= M_PI + 1e-12);
  }
}

TEST_CASE("adding a duplicate false positive never increases AP") {
  Rng rng(9);
  std::vector<GtBox> gts = {gt(0, 0.0, 5.0, 0), gt(0, 3.0, 9.0, 0)};
  std::vector<PredBox> preds = {pred(0, 0.1, 5.0, 0.9, 0, 0), pred(0, 2.9, 9.0, 0.8, 0, 1)};
  const double base = evaluate(preds, gts, 1, kThresholds, 2.0).map;
  for (int i = 0; i < 5; ++i) {
    preds.push_back(pred(0, rng.uniform(-10, 10), rng.uniform(15, 30), rng.uniform(0, 1), 0,
                         10 + i));
    const double with_fp = evaluate(preds, gts, 1, kThresholds, 2.0).map;
    CHECK(with_fp <= base + 1e-12);
  }
}

TEST_CASE("equal-score shuffles are stable under the det_id tie break") {
  std::vector<GtBox> gts = {gt(0, 0.0, 5.0, 0), gt(0, 4.0, 9.0, 0)};
  std::vector<PredBox> preds = {pred(0, 0.1, 5.0, 0.7, 0, 0), pred(0, 4.1, 9.0, 0.7, 0, 1),
                                pred(0, -6.0, 20.0, 0.7, 0, 2)};
  const double base = evaluate(preds, gts, 1, kThresholds, 2.0).map;
  std::vector<PredBox> shuffled = {preds[2], preds[0], preds[1]};
  const double after = evaluate(shuffled, gts, 1, kThresholds, 2.0).map;
  CHECK(std::abs(base - after) < 1e-9);
}

TEST_CASE("composite score arithmetic") {
  CHECK(composite_score(1.0, {0.0, 0.0, 0.0}) == doctest::Approx(1.0));
  CHECK(composite_score(0.0, {4.0, 1.0, M_PI}) == doctest::Approx(0.0));
  CHECK(composite_score(0.5, {2.0, 0.5, M_PI / 2}) == doctest::Approx(0.5));
}

TEST_CASE("distance buckets partition the ground truth") {
  std::vector<GtBox> gts;
  std::vector<PredBox> preds;
  for (int i = 0; i < 6; ++i) {
    const double y = 2.0 + i * 5.0;
    gts.push_back(gt(0, 0.0, y, 0));
    preds.push_back(pred(0, 0.0, y + 0.2, 0.9, 0, i));
  }
  const auto buckets = bucket_by_distance(preds, gts, 1, kThresholds, 2.0, 15.0);
  CHECK(buckets.near_bucket.gt_count + buckets.far_bucket.gt_count ==
        static_cast<std::int64_t>(gts.size()));
  CHECK(buckets.near_bucket.gt_count == 3);
  CHECK(buckets.far_bucket.gt_count == 3);

  const auto all_near = bucket_by_distance(preds, gts, 1, kThresholds, 2.0, 1000.0);
  CHECK(all_near.far_bucket.gt_count == 0);
  CHECK(all_near.near_bucket.gt_count == 6);
}

TEST_CASE("far bucket errors reflect only far matches") {
  std::vector<GtBox> gts = {gt(0, 0.0, 5.0, 0, 2.0, 4.0), gt(0, 0.0, 25.0, 0, 2.0, 4.0)};
  // Near match is perfect, far match has a big size error.
  std::vector<PredBox> preds = {pred(0, 0.0, 5.0, 0.9, 0, 0, 2.0, 4.0),
                                pred(0, 0.0, 25.0, 0.9, 0, 1, 1.0, 2.0)};
  const auto buckets = bucket_by_distance(preds, gts, 1, kThresholds, 2.0, 15.0);
  CHECK(buckets.near_bucket.errors.mase == doctest::Approx(0.0));
  CHECK(buckets.far_bucket.errors.mase == doctest::Approx(0.75));
}

TEST_CASE("empty gt with no predictions is vacuously perfect") {
  const Metrics m = evaluate({}, {}, 2, kThresholds, 2.0);
  CHECK(m.map == 1.0);
  CHECK(m.nds == 1.0);
  const Metrics penalized = evaluate({pred(0, 0.0, 5.0, 0.9, 0, 0)}, {}, 2, kThresholds, 2.0);
  CHECK(penalized.map == 0.0);
}

}  // TEST_SUITE
