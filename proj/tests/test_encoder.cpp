#include <catch2/catch_amalgamated.hpp>

#include "apn/augment.hpp"
#include "apn/encoder.hpp"

using apn::Encoder;
using apn::EncoderConfig;
using apn::NormKind;
using apn::Rng;
using apn::Shape;
using apn::Tensor;
using D = Tensor<double>;

TEST_CASE("stage channels come out as configured") {
  EncoderConfig cfg;
  cfg.stage_channels = {8, 16, 32};
  cfg.blocks_per_stage = {1, 1, 1};
  cfg.input_channels = 3;
  Encoder<double> enc(cfg, Rng(1));
  Rng rng(2);
  auto set = enc.encode(D::uniform({3, 32, 32}, rng, -1, 1));
  REQUIRE(set.depth() == 3);
  CHECK(set.maps[0].shape()[0] == 8);
  CHECK(set.maps[1].shape()[0] == 16);
  CHECK(set.maps[2].shape()[0] == 32);
  CHECK(enc.parameter_count() > 0);
}

TEST_CASE("identical config and seed give identical parameters") {
  EncoderConfig cfg;
  cfg.stage_channels = {4, 8};
  cfg.blocks_per_stage = {2, 1};
  cfg.norm = NormKind::layer;
  Encoder<double> a(cfg, Rng(7)), b(cfg, Rng(7));
  auto sa = a.state_dict(), sb = b.state_dict();
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    CHECK(sa[i].first == sb[i].first);
    CHECK(sa[i].second.value() == sb[i].second.value());
  }
  Encoder<double> c(cfg, Rng(8));
  CHECK(c.state_dict()[0].second.value() != sa[0].second.value());
}

TEST_CASE("padding off shrinks extents by two per conv") {
  EncoderConfig cfg;
  cfg.stage_channels = {4, 4, 4};
  cfg.blocks_per_stage = {1, 1, 1};
  cfg.use_padding = false;
  Encoder<double> enc(cfg, Rng(3));
  Rng rng(4);
  auto set = enc.encode(D::uniform({3, 32, 32}, rng, -1, 1));
  CHECK(set.maps[0].shape() == Shape{4, 30, 30});
  CHECK(set.maps[1].shape() == Shape{4, 28, 28});
  CHECK(set.maps[2].shape() == Shape{4, 26, 26});
}

TEST_CASE("all-zero input with zero biases and no norm gives all-zero maps") {
  EncoderConfig cfg;
  cfg.stage_channels = {4, 8};
  cfg.blocks_per_stage = {1, 1};
  cfg.norm = NormKind::none;
  Encoder<double> enc(cfg, Rng(5));
  auto set = enc.encode(D::zeros({3, 16, 16}));
  for (double v : set.maps.back().value()) CHECK(v == 0.0);
}

TEST_CASE("49 patches assemble into a 7x7 grid of pooled vectors") {
  EncoderConfig cfg;
  cfg.stage_channels = {8, 32};
  cfg.blocks_per_stage = {1, 1};
  cfg.stage_strides = {1, 2};
  Encoder<double> enc(cfg, Rng(6));
  Rng rng(7);
  auto patched = D::uniform({49, 3, 16, 16}, rng, -1, 1);
  auto set = enc.encode(patched);
  REQUIRE(set.depth() == 1);
  CHECK(set.maps[0].shape() == Shape{32, 7, 7});
}

TEST_CASE("non-square patch counts need explicit grid rows") {
  EncoderConfig cfg;
  cfg.stage_channels = {4};
  cfg.blocks_per_stage = {1};
  Encoder<double> enc(cfg, Rng(8));
  Rng rng(9);
  auto patched = D::uniform({6, 3, 8, 8}, rng, -1, 1);
  CHECK_THROWS_AS(enc.encode(patched), std::invalid_argument);
  auto set = enc.encode(patched, /*grid_rows=*/2);
  CHECK(set.maps[0].shape() == Shape{4, 2, 3});
}

TEST_CASE("perturbing one patch changes exactly one grid cell") {
  for (NormKind norm : {NormKind::none, NormKind::layer}) {
    EncoderConfig cfg;
    cfg.stage_channels = {8, 16};
    cfg.blocks_per_stage = {1, 1};
    cfg.use_padding = false;
    cfg.norm = norm;
    Encoder<double> enc(cfg, Rng(10));
    Rng rng(11);
    auto patched = D::uniform({9, 3, 12, 12}, rng, -1, 1);

    std::vector<double> bumped = patched.value();
    const std::size_t patch_elems = 3 * 12 * 12, target = 4;
    for (std::size_t i = 0; i < patch_elems; ++i) bumped[target * patch_elems + i] += 0.5;

    auto base = enc.encode(patched).maps[0];
    auto poked = enc.encode(D::from_data(patched.shape(), std::move(bumped))).maps[0];
    const std::size_t c = base.shape()[0];
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t cell = 0; cell < 9; ++cell) {
        const bool differs = base.value()[ch * 9 + cell] != poked.value()[ch * 9 + cell];
        if (cell == target)
          CHECK(differs);
        else
          CHECK_FALSE(differs);
      }
  }
}

TEST_CASE("encode is deterministic given parameters and input") {
  EncoderConfig cfg;
  cfg.stage_channels = {4, 8};
  cfg.blocks_per_stage = {1, 1};
  cfg.norm = NormKind::layer;
  Encoder<double> enc(cfg, Rng(12));
  Rng rng(13);
  auto x = D::uniform({3, 16, 16}, rng, -1, 1);
  CHECK(enc.encode(x).maps.back().value() == enc.encode(x).maps.back().value());
}

TEST_CASE("invalid configs are rejected with the offending field") {
  EncoderConfig cfg;
  cfg.stage_channels = {};
  CHECK_THROWS_WITH((Encoder<double>(cfg, Rng(0))),
                    Catch::Matchers::ContainsSubstring("stage_channels"));
  cfg.stage_channels = {4};
  cfg.blocks_per_stage = {1, 2};
  CHECK_THROWS_WITH((Encoder<double>(cfg, Rng(0))),
                    Catch::Matchers::ContainsSubstring("blocks_per_stage"));
}

TEST_CASE("spatial underflow names the failing stage") {
  EncoderConfig cfg;
  cfg.stage_channels = {4, 4, 4, 4};
  cfg.blocks_per_stage = {1, 1, 1, 1};
  cfg.use_padding = false;
  cfg.stage_strides = {2, 2, 2, 2};
  Encoder<double> enc(cfg, Rng(14));
  Rng rng(15);
  // 16 -> 7 -> 3 -> 1, then stage 3 cannot fit a 3x3 kernel.
  CHECK_THROWS_WITH(enc.encode(D::uniform({3, 16, 16}, rng, -1, 1)),
                    Catch::Matchers::ContainsSubstring("stage 3"));
}

TEST_CASE("state dict round trips through the checkpoint format") {
  EncoderConfig cfg;
  cfg.stage_channels = {4, 8};
  cfg.blocks_per_stage = {1, 2};
  cfg.norm = NormKind::batch;
  Encoder<double> enc(cfg, Rng(16));
  apn::save_checkpoint("enc_test.bin", enc.state_dict());
  auto loaded_state = apn::load_checkpoint<double>("enc_test.bin");
  CHECK(loaded_state[0].first == "stage0.block0.kernel");

  Encoder<double> other(cfg, Rng(99));
  other.load_state_dict(loaded_state);
  Rng rng(17);
  auto x = D::uniform({3, 12, 12}, rng, -1, 1);
  CHECK(other.encode(x).maps.back().value() == enc.encode(x).maps.back().value());
}

TEST_CASE("width multiplier scales stage widths") {
  EncoderConfig cfg;
  cfg.stage_channels = {8, 16};
  cfg.blocks_per_stage = {1, 1};
  cfg.width_multiplier = 2.0;
  Encoder<double> enc(cfg, Rng(18));
  Rng rng(19);
  auto set = enc.encode(D::uniform({3, 8, 8}, rng, -1, 1));
  CHECK(set.maps[0].shape()[0] == 16);
  CHECK(set.maps[1].shape()[0] == 32);
}
