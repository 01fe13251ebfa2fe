#include "doctest.h"
#include "polyhistor/backbone.hpp"
#include "polyhistor/errors.hpp"
#include "polyhistor/random.hpp"

using namespace polyhistor;

namespace {

Tensor random_image(const BackboneConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return randn({c.input_height, c.input_width, c.in_channels}, 1.0, rng);
}

bool bit_equal(const FeaturePyramid& a, const FeaturePyramid& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].tokens.shape() != b[i].tokens.shape()) return false;
    auto x = a[i].tokens.data();
    auto y = b[i].tokens.data();
    for (std::size_t j = 0; j < x.size(); ++j)
      if (x[j] != y[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("presets") {
  const auto tiny = BackboneConfig::from_preset("swin_tiny");
  CHECK(tiny.dims() == std::vector<std::size_t>{96, 192, 384, 768});
  CHECK(tiny.depths == std::vector<std::size_t>{2, 2, 6, 2});
  CHECK(tiny.scales() == std::vector<std::size_t>{1, 2, 4, 8});

  const auto pvt = BackboneConfig::from_preset("pvt_small_like");
  CHECK(pvt.dims() == std::vector<std::size_t>{64, 128, 320, 512});
  CHECK(pvt.scales() == std::vector<std::size_t>{1, 2, 5, 8});

  CHECK_THROWS_AS(BackboneConfig::from_preset("resnet"), ConfigError);
}

TEST_CASE("config validation") {
  BackboneConfig c = BackboneConfig::from_preset("toy");
  c.depths = {1};
  c.num_heads = {1};
  CHECK_NOTHROW(build(c, 0));

  BackboneConfig bad = BackboneConfig::from_preset("pvt_small_like");
  bad.block_dims = {64, 96, 320, 512};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  BackboneConfig odd = BackboneConfig::from_preset("swin_tiny");
  odd.input_height = 100;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("swin_tiny parameter total is near 27.5M") {
  const HvtModel m = build(BackboneConfig::from_preset("swin_tiny"), 0, false);
  const double millions = static_cast<double>(m.parameter_count()) / 1e6;
  CHECK(millions == doctest::Approx(27.51).epsilon(0.03));
}

TEST_CASE("insertion points") {
  const HvtModel m = build(BackboneConfig::from_preset("swin_tiny"), 0, false);
  const auto points = insertion_points(m);
  std::vector<std::size_t> widths;
  for (const auto& p : points) {
    CHECK(p.width == 96 * p.scale);
    if (p.position == Position::post_mlp) widths.push_back(p.width);
  }
  CHECK(widths == std::vector<std::size_t>{96, 96, 192, 192, 384, 384, 384, 384, 384, 384, 768, 768});
  for (std::size_t i = 1; i < points.size(); ++i) CHECK(points[i - 1].layer_index <= points[i].layer_index);

  BackboneConfig c = BackboneConfig::from_preset("toy");
  c.depths = {3};
  c.num_heads = {1};
  for (const auto& p : insertion_points(build(c, 0, false))) CHECK(p.scale == 1);
}

TEST_CASE("pyramid shapes at 64px") {
  BackboneConfig c = BackboneConfig::from_preset("swin_tiny");
  c.input_height = c.input_width = 64;
  c.depths = {1, 1, 1, 1};  // shapes only depend on widths and strides
  const HvtModel m = build(c, 3);
  const auto pyr = forward(m, random_image(c, 1));
  REQUIRE(pyr.size() == 4);
  CHECK(pyr[0].shape() == Shape{16, 16, 96});
  CHECK(pyr[1].shape() == Shape{8, 8, 192});
  CHECK(pyr[2].shape() == Shape{4, 4, 384});
  CHECK(pyr[3].shape() == Shape{2, 2, 768});
}

TEST_CASE("forward determinism and zero-up adapters") {
  const BackboneConfig c = BackboneConfig::from_preset("toy");
  const HvtModel m = build(c, 5);
  const Tensor img = random_image(c, 2);
  const auto base = forward(m, img);
  CHECK(bit_equal(base, forward(m, img)));

  Rng rng(9);
  ResolvedAttachments att;
  for (const auto& l : m.layers()) {
    for (auto pos : {Position::post_attention, Position::post_mlp}) {
      AdapterWeights w;
      w.down = randn({l.width, 3}, 1.0, rng);
      w.up = Tensor::zeros({3, l.width});
      w.down_bias = randn({3}, 1.0, rng);
      w.up_bias = Tensor::zeros({l.width});
      att.adapters[{l.index, pos}] = w;
    }
  }
  CHECK(bit_equal(base, forward(m, img, att)));

  att.adapters.begin()->second.up = randn({3, m.layers()[0].width}, 1.0, rng);
  CHECK_FALSE(bit_equal(base, forward(m, img, att)));
}

TEST_CASE("forward rejects mismatched inputs") {
  const BackboneConfig c = BackboneConfig::from_preset("toy");
  const HvtModel m = build(c, 5);
  CHECK_THROWS_AS(forward(m, Tensor::zeros({16, 16, 3})), DimensionError);

  Rng rng(1);
  ResolvedAttachments att;
  AdapterWeights w;
  w.down = randn({12, 2}, 1.0, rng);
  w.up = randn({2, 12}, 1.0, rng);
  att.adapters[{0, Position::post_mlp}] = w;
  CHECK_THROWS_AS(forward(m, random_image(c, 0), att), DimensionError);

  CHECK_THROWS_AS(forward(build(c, 5, false), random_image(c, 0)), ConfigError);
}

TEST_CASE("prompts change outputs and are stripped before merging") {
  const BackboneConfig c = BackboneConfig::from_preset("toy");
  const HvtModel m = build(c, 5);
  Rng rng(4);
  ResolvedAttachments att;
  att.prompts[0] = randn({3, 8}, 1.0, rng);
  att.prompts[1] = randn({3, 16}, 1.0, rng);
  const auto pyr = forward(m, random_image(c, 0), att);
  CHECK(pyr[0].shape() == Shape{8, 8, 8});
  CHECK(pyr[1].shape() == Shape{4, 4, 16});
  CHECK_FALSE(bit_equal(pyr, forward(m, random_image(c, 0))));
}

TEST_CASE("checksum reflects values") {
  const BackboneConfig c = BackboneConfig::from_preset("toy");
  CHECK(build(c, 1).checksum() == build(c, 1).checksum());
  CHECK(build(c, 1).checksum() != build(c, 2).checksum());
}
