#include <doctest.h>

#include "bevkd/labelenc.hpp"
#include "bevkd/util.hpp"
#include "bevkd/pipeline.hpp"
#include "test_support.hpp"

using namespace bevkd;
using namespace bevkd::labelenc;
using bevkd::Error;

namespace {

const auto kCfg = oracle::tiny_config();

LabelEncoder fresh_encoder(std::uint64_t seed, bool position_blind = false) {
  Rng rng(seed);
  return LabelEncoder(kCfg.world.num_classes, kCfg.model.embed_dim, kCfg.model.teacher_channels,
                      kCfg.grid(), position_blind, rng);
}

}  // namespace

TEST_SUITE("labelenc") {

TEST_CASE("empty scenes all encode to the same refined zero map") {
  LabelEncoder enc = fresh_encoder(1);
  const auto grid = kCfg.grid();
  world::Scene e1, e2;
  e1.scene_id = 1;
  e2.scene_id = 2;
  const Tensor f1 = enc.forward({&e1}, grid, false, false);
  const Tensor f2 = enc.forward({&e2}, grid, false, false);
  REQUIRE(f1.numel() == f2.numel());
  for (std::int64_t i = 0; i < f1.numel(); ++i) CHECK(f1[i] == f2[i]);
  CHECK(f1.shape() == std::vector<std::int64_t>{1, kCfg.model.teacher_channels, 16, 16});
}

TEST_CASE("position-blind embeddings ignore location") {
  LabelEncoder enc = fresh_encoder(2, /*position_blind=*/true);
  world::BoxLabel a{1, -4.0f, 5.0f, 1.5f, 3.0f, 0.8f};
  world::BoxLabel b = a;
  b.x = 6.0f;
  b.y = 12.0f;
  const Tensor va = enc.object_vector(a);
  const Tensor vb = enc.object_vector(b);
  for (std::int64_t i = 0; i < va.numel(); ++i) CHECK(va[i] == vb[i]);

  LabelEncoder enc_pos = fresh_encoder(2, /*position_blind=*/false);
  const Tensor pa = enc_pos.object_vector(a);
  const Tensor pb = enc_pos.object_vector(b);
  double diff = 0.0;
  for (std::int64_t i = 0; i < pa.numel(); ++i) diff += std::abs(pa[i] - pb[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("embedded map composes object vectors with the mapping function") {
  LabelEncoder enc = fresh_encoder(3);
  const auto grid = kCfg.grid();
  world::Scene s;
  s.boxes = {{0, 2.0f, 8.0f, 1.8f, 3.5f, 0.4f}};
  const Tensor v = enc.object_vector(s.boxes[0]);
  const Tensor expected = bev::map_to_bev({v}, s.boxes, grid);

  // Verify the composition by checking footprint cells and the background
  // stay consistent through a forward pass with a zeroed conv block: instead
  // of exposing internals, check that footprint cells of the expected map
  // carry exactly the object vector.
  const auto cells = bev::box_footprint(s.boxes[0], grid);
  for (const auto& cell : cells)
    for (std::int64_t c = 0; c < kCfg.model.embed_dim; ++c)
      CHECK(expected.at(c, cell.i, cell.j) == v[c]);

  // Equal inputs produce equal vectors.
  const Tensor v2 = enc.object_vector(s.boxes[0]);
  for (std::int64_t i = 0; i < v.numel(); ++i) CHECK(v[i] == v2[i]);
}

TEST_CASE("disjoint scenes are permutation invariant") {
  LabelEncoder enc = fresh_encoder(4);
  const auto grid = kCfg.grid();
  world::Scene s1;
  s1.boxes = {{0, -5.0f, 4.0f, 1.5f, 3.0f, 0.1f},
              {1, 5.0f, 12.0f, 2.0f, 2.0f, -0.7f},
              {2, 0.0f, 16.0f, 0.7f, 0.7f, 1.2f}};
  world::Scene s2 = s1;
  std::swap(s2.boxes[0], s2.boxes[2]);
  const Tensor f1 = enc.forward({&s1}, grid, false, false);
  const Tensor f2 = enc.forward({&s2}, grid, false, false);
  for (std::int64_t i = 0; i < f1.numel(); ++i) CHECK(f1[i] == f2[i]);
}

TEST_CASE("encoder gradients match central differences through the full path") {
  LabelEncoder enc = fresh_encoder(5);
  const auto grid = kCfg.grid();
  world::Scene s;
  s.boxes = {{0, 2.0f, 8.0f, 1.8f, 3.5f, 0.4f}, {1, -4.0f, 13.0f, 2.2f, 2.2f, -0.3f}};

  Rng rng(6);
  Tensor co({1, kCfg.model.teacher_channels, grid.height, grid.width});
  for (std::int64_t i = 0; i < co.numel(); ++i) co[i] = rng.normal(0.0, 0.1);

  std::vector<nn::ParamRef> params;
  enc.params(params);
  auto loss = [&]() {
    const Tensor f = enc.forward({&s}, grid, true, false);
    double acc = 0.0;
    for (std::int64_t i = 0; i < f.numel(); ++i) acc += f[i] * co[i];
    return acc;
  };
  nn::zero_grads(params);
  const Tensor f = enc.forward({&s}, grid, true, true);
  (void)f;
  enc.backward(co);
  CHECK(oracle::finite_difference_check(params, loss, 24).max_rel_err < 1e-4);
}

TEST_CASE("training the inverse encoder freezes the teacher and reduces loss") {
  const auto cfg = kCfg;
  const auto grid = cfg.grid();
  const auto train = world::make_dataset(cfg.world, 16, 31);
  const auto val = world::make_dataset(cfg.world, 6, 33);

  Rng trng(7);
  auto teacher = det::TeacherModel(cfg.world.num_classes, cfg.model.teacher_channels,
                                   cfg.model.head_width, grid, trng);
  LabelEncoder enc = fresh_encoder(8);

  labelenc::EncoderTrainContext ctx;
  ctx.world = &cfg.world;
  ctx.grid = grid;
  ctx.heatmap = cfg.heatmap;
  ctx.weights = cfg.losses;
  ctx.tau = cfg.tau;
  ctx.head_width = cfg.model.head_width;

  TrainSchedule sched{4, 1e-3, 4, 0.01, {}, 0.1, 0};
  Rng rng(9);
  const auto result = train_label_encoder(enc, teacher, train, val, ctx, sched,
                                          EncoderVariant::kInverse, nullptr, rng);
  CHECK(result.teacher_hash_before == result.teacher_hash_after);
  REQUIRE(result.epoch_losses.size() == 4);
  CHECK(result.epoch_losses.back() < result.epoch_losses.front());
}

TEST_CASE("untrained encoder scores near zero autoencoder mAP") {
  const auto cfg = kCfg;
  const auto grid = cfg.grid();
  const auto val = world::make_dataset(cfg.world, 10, 35);
  Rng trng(10);
  auto teacher = det::TeacherModel(cfg.world.num_classes, cfg.model.teacher_channels,
                                   cfg.model.head_width, grid, trng);
  LabelEncoder enc = fresh_encoder(11);
  labelenc::EncoderTrainContext ctx;
  ctx.world = &cfg.world;
  ctx.grid = grid;
  ctx.heatmap = cfg.heatmap;
  ctx.weights = cfg.losses;
  const auto metrics = autoencoder_eval(enc, teacher.head(), val, ctx);
  CHECK(metrics.map < 0.2);
}

TEST_CASE("labelenc variant requires a baseline student") {
  const auto cfg = kCfg;
  const auto train = world::make_dataset(cfg.world, 4, 37);
  Rng trng(12);
  auto teacher = det::TeacherModel(cfg.world.num_classes, cfg.model.teacher_channels,
                                   cfg.model.head_width, cfg.grid(), trng);
  LabelEncoder enc = fresh_encoder(13);
  labelenc::EncoderTrainContext ctx;
  ctx.world = &cfg.world;
  ctx.grid = cfg.grid();
  TrainSchedule sched{1, 1e-3, 4, 0.01, {}, 0.1, 0};
  Rng rng(14);
  CHECK_THROWS_AS(train_label_encoder(enc, teacher, train, train, ctx, sched,
                                      EncoderVariant::kLabelEnc, nullptr, rng),
                  Error);
}

TEST_CASE("variant round trip through names") {
  CHECK(variant_from_string("inverse") == EncoderVariant::kInverse);
  CHECK(variant_from_string("autoencoder") == EncoderVariant::kAutoencoder);
  CHECK(variant_from_string("labelenc") == EncoderVariant::kLabelEnc);
  CHECK(to_string(EncoderVariant::kInverse) == "inverse");
  CHECK_THROWS_AS(variant_from_string("bogus"), Error);
}

}  // TEST_SUITE
