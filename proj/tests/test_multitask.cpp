#include <cmath>

#include "doctest.h"
#include "polyhistor/errors.hpp"
#include "polyhistor/gradcheck.hpp"
#include "polyhistor/multitask.hpp"
#include "polyhistor/ops.hpp"
#include "polyhistor/random.hpp"

using namespace polyhistor;

namespace {

const std::vector<double> kBaseline = {67.21, 61.93, 62.35, 17.97};
const std::vector<Direction> kDirections = {Direction::higher_better, Direction::higher_better,
                                            Direction::higher_better, Direction::lower_better};

RunResult make_result(std::vector<double> metrics) {
  RunResult r;
  r.method = "m";
  const char* names[] = {"a", "b", "c", "d"};
  for (std::size_t i = 0; i < metrics.size(); ++i) r.per_task.push_back({names[i], metrics[i], kDirections[i], 0.5});
  return r;
}

}  // namespace

TEST_CASE("cross entropy against a hand computation") {
  const Tensor logits = Tensor::matrix({{1.0, 2.0, 0.5}, {0.0, 0.0, 3.0}});
  const double l0 = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(0.5)));
  const double l1 = -std::log(std::exp(3.0) / (2.0 + std::exp(3.0)));
  CHECK(cross_entropy_loss(logits, {0, 2}).item() == doctest::Approx((l0 + l1) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy_loss(logits, {0, 3}), DimensionError);
  CHECK_THROWS_AS(cross_entropy_loss(logits, {0}), DimensionError);
}

TEST_CASE("l1 and balanced bce against hand computations") {
  const Tensor pred = Tensor::matrix({{1.0, -2.0}, {0.5, 0.0}});
  const Tensor target = Tensor::matrix({{0.0, 0.0}, {1.0, 1.0}});
  CHECK(l1_loss(pred, target).item() == doctest::Approx((1.0 + 2.0 + 0.5 + 1.0) / 4));

  const Tensor logits = Tensor::matrix({{0.3}, {-1.2}, {2.0}, {0.0}});
  const std::vector<double> y = {1, 0, 0, 0};
  const auto s = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  // one positive of four: positives weighted 3/4, negatives 1/4
  const double expect = (-0.75 * std::log(s(0.3)) - 0.25 * (std::log(1 - s(-1.2)) + std::log(1 - s(2.0)) + std::log(0.5))) / 4;
  CHECK(balanced_bce_loss(logits, y).item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(balanced_bce_loss(logits, {1, 0, 0.5, 0}), DimensionError);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(1);
  Tensor p = randn({5, 3}, 1.0, rng, true);
  CHECK(fd_check([&] { return cross_entropy_loss(p, {0, 1, 2, 1, 0}); }, {p}) < 1e-6);
  const Tensor t = randn({5, 3}, 1.0, rng);
  CHECK(fd_check([&] { return l1_loss(p, t); }, {p}) < 1e-6);
  Tensor b = randn({5, 1}, 1.0, rng, true);
  CHECK(fd_check([&] { return balanced_bce_loss(b, {1, 0, 0, 1, 0}); }, {b}) < 1e-6);
}

TEST_CASE("bilinear interpolation matrix") {
  const Tensor same = bilinear_matrix(3, 3, 3, 3);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) CHECK(same(i, j) == (i == j ? 1.0 : 0.0));

  const Tensor up = bilinear_matrix(2, 2, 4, 4);
  REQUIRE(up.shape() == Shape{16, 4});
  for (std::size_t i = 0; i < 16; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 4; ++j) row += up(i, j);
    CHECK(row == doctest::Approx(1.0));
  }
  // half-pixel centres: output (0,1) sits at input x = 0.25 -> clamped row 0, weights 0.75/0.25
  CHECK(up(1, 0) == doctest::Approx(0.75));
  CHECK(up(1, 1) == doctest::Approx(0.25));
}

TEST_CASE("decoder output covers the first stage grid") {
  const auto c = BackboneConfig::from_preset("toy");
  const HvtModel model = build(c, 1, true);
  TrainableSet set;
  ParamFactory f(set, true, 2);
  const DecoderHead head = make_head(c, 5, 16, f, 0);
  Rng rng(3);
  const FeaturePyramid pyr = forward(model, randn({c.input_height, c.input_width, c.in_channels}, 1.0, rng));
  const Tensor out = decode(pyr, head);
  CHECK(out.shape() == Shape{pyr[0].height, pyr[0].width, 5});
  for (const auto& e : set.entries()) CHECK(e.partition == Partition::head);
}

TEST_CASE("delta_up reproduces the reference rows") {
  CHECK(delta_up({70.24, 59.12, 64.75, 17.40}, kBaseline, kDirections) == doctest::Approx(1.748).epsilon(1e-3));
  CHECK(delta_up({70.87, 59.54, 65.47, 17.47}, kBaseline, kDirections) == doctest::Approx(2.343).epsilon(1e-3));
  CHECK(delta_up(kBaseline, kBaseline, kDirections) == 0.0);
  // a lower error counts as an improvement
  CHECK(delta_up({1.0}, {2.0}, {Direction::lower_better}) == doctest::Approx(50.0));
  CHECK_THROWS_AS(delta_up({1.0, 2.0}, {1.0}, {Direction::higher_better}), DimensionError);
}

TEST_CASE("run results round-trip through JSON") {
  RunResult r = make_result({70.123456789012345, 59.1, 64.75, 17.4});
  r.seed = 42;
  r.delta_up = 1.2345678901234567;
  const RunResult back = RunResult::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  CHECK(back.per_task[0].metric == r.per_task[0].metric);
  CHECK(*back.delta_up == *r.delta_up);
  CHECK(back.per_task[3].direction == Direction::lower_better);
  CHECK(delta_up(back, back) == 0.0);

  CHECK_THROWS_AS(RunResult::from_json("{\"per_task\": [{\"name\": \"a\", \"metric\": 1}], \"extra\": 1}"), ConfigError);
  CHECK_THROWS_AS(RunResult::from_json("not json"), ConfigError);

  RunResult other = make_result({1, 2, 3, 4});
  other.per_task[1].name = "renamed";
  CHECK_THROWS_AS(delta_up(r, other), ConfigError);
}

TEST_CASE("task specs must agree with their losses") {
  for (const auto& t : synthetic_tasks()) CHECK_NOTHROW(t.validate());
  TaskSpec t{"normals", LossKind::cross_entropy, 3, Direction::higher_better, LabelSource::surface_normal};
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {"fg", LossKind::balanced_bce, 1, Direction::lower_better, LabelSource::foreground};
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("synthetic data is deterministic and well formed") {
  const auto tasks = synthetic_tasks();
  const Dataset a = synth_tasks(5, 32, 4, tasks, 4, 2);
  const Dataset b = synth_tasks(5, 32, 4, tasks, 4, 2);
  const Dataset c = synth_tasks(6, 32, 4, tasks, 4, 2);
  REQUIRE(a.train.size() == 4);
  REQUIRE(a.val.size() == 2);
  CHECK(a.label_height == 8);
  CHECK(a.label_width == 8);
  const auto x = a.train[0].image.data();
  const auto y = b.train[0].image.data();
  CHECK(std::equal(x.begin(), x.end(), y.begin()));
  CHECK_FALSE(std::equal(x.begin(), x.end(), c.train[0].image.data().begin()));

  const Sample& s = a.train[0];
  CHECK(s.image.shape() == Shape{32, 32, 3});
  REQUIRE(s.targets.size() == 4);
  CHECK(s.targets[0].classes.size() == 64);
  for (auto k : s.targets[0].classes) CHECK(k < 4);
  for (auto k : s.targets[1].classes) CHECK(k < 3);
  for (double v : s.targets[2].binary) CHECK((v == 0.0 || v == 1.0));
  CHECK(s.targets[3].values.shape() == Shape{64, 3});
  for (std::size_t p = 0; p < 64; ++p) {
    double norm = 0.0;
    for (std::size_t ch = 0; ch < 3; ++ch) norm += s.targets[3].values(p, ch) * s.targets[3].values(p, ch);
    CHECK(norm == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(synth_tasks(0, 30, 4, tasks, 1, 1), ConfigError);
}

TEST_CASE("short training keeps the backbone frozen and is reproducible") {
  const auto c = BackboneConfig::from_preset("toy");
  const HvtModel model = build(c, 1, true);
  const auto tasks = synthetic_tasks();
  const Dataset data = synth_tasks(3, c.input_height, c.patch_size, tasks, 8, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 9;
  auto m = MethodConfig::defaults(Method::polyhistor_lite);
  m.task_embedding_k = 8;

  const auto run = [&] { return train(model, build_method(m, model, tasks.size(), 9), tasks, data, cfg, "lite"); };
  const TrainReport a = run();
  const TrainReport b = run();
  CHECK(a.frozen_checksum_before == a.frozen_checksum_after);
  CHECK(a.frozen_checksum_after == model.checksum());
  CHECK(a.result.to_json() == b.result.to_json());
  CHECK(a.epoch_losses.size() == 2);
  CHECK(a.trainable_encoder > 0);
  CHECK(a.trainable_head > 0);
  REQUIRE(a.result.per_task.size() == 4);
  for (const auto& t : a.result.per_task) CHECK(std::isfinite(t.metric));
}

TEST_CASE("divergent training reports a numerical failure") {
  const auto c = BackboneConfig::from_preset("toy");
  const HvtModel model = build(c, 1, true);
  const auto tasks = synthetic_tasks();
  const Dataset data = synth_tasks(3, c.input_height, c.patch_size, tasks, 8, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.optimizer = Optimizer::sgd;
  cfg.lr = 1e200;
  const auto b = build_method(MethodConfig::defaults(Method::adapter), model, tasks.size(), 0);
  CHECK_THROWS_AS(train(model, b, tasks, data, cfg, "adapter"), NumericalError);
}
