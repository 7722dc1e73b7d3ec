#include <catch2/catch_amalgamated.hpp>

#include "apn/augment.hpp"
#include "apn/oracles.hpp"

using apn::Pipeline;
using apn::Rng;
using apn::Shape;
using apn::Stage;
using apn::Tensor;
using D = Tensor<double>;

namespace {

D random_image(std::size_t d, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  return D::uniform({d, h, w}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("z_normalize alone yields zero mean unit std per channel") {
  Pipeline pipe({Stage::z_normalize()});
  auto out = apn::apply(pipe, random_image(3, 12, 10, 1), Rng(0));
  REQUIRE(out.shape() == Shape{3, 12, 10});
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 120; ++i) mean += out.value()[c * 120 + i];
    mean /= 120;
    for (std::size_t i = 0; i < 120; ++i) {
      double e = out.value()[c * 120 + i] - mean;
      var += e * e;
    }
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(var / 120) - 1.0) < 1e-6);
  }
}

TEST_CASE("patchify with q equal to the extent is the identity tiling") {
  auto img = random_image(2, 8, 8, 2);
  Pipeline pipe({Stage::patchify(8, 0)});
  auto out = apn::apply(pipe, img, Rng(0));
  REQUIRE(out.shape() == Shape{1, 2, 8, 8});
  CHECK(out.value() == img.value());
}

TEST_CASE("patchify 256/64/32 produces the 7x7 grid of 49 patches") {
  auto img = random_image(3, 256, 256, 3);
  Pipeline pipe({Stage::patchify(64, 32)});
  auto out = apn::apply(pipe, img, Rng(0));
  CHECK(out.shape() == Shape{49, 3, 64, 64});
}

TEST_CASE("patchify patch count matches the tiling formula on random configs") {
  Rng rng(11);
  int tested = 0;
  while (tested < 50) {
    const std::size_t q = std::size_t(rng.uniform_int(2, 24));
    const std::size_t overlap = std::size_t(rng.uniform_int(0, std::int64_t(q) - 1));
    const std::size_t step = q - overlap;
    const std::size_t ny = std::size_t(rng.uniform_int(1, 6));
    const std::size_t nx = std::size_t(rng.uniform_int(1, 6));
    const std::size_t h = q + step * (ny - 1), w = q + step * (nx - 1);
    if (h > 64 || w > 64) continue;
    ++tested;
    auto img = random_image(1, h, w, 100 + std::uint64_t(tested));
    auto out = apn::apply(Pipeline({Stage::patchify(q, overlap)}), img, Rng(0));
    CHECK(out.shape()[0] == apn::oracle::patch_count(h, w, q, overlap));
    CHECK(out.shape()[0] == ny * nx);
  }
}

TEST_CASE("patchify reports stride violations with extents") {
  auto img = random_image(1, 10, 10, 4);
  Pipeline pipe({Stage::patchify(5, 1)});  // step 4 does not divide 10-5
  try {
    apn::apply(pipe, img, Rng(0));
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stride 4") != std::string::npos);
    CHECK(msg.find("10x10") != std::string::npos);
  }
}

TEST_CASE("patchify must be the final stage") {
  CHECK_THROWS_AS(Pipeline({Stage::patchify(4, 0), Stage::z_normalize()}), std::invalid_argument);
}

TEST_CASE("all-zero probabilities make anchor and positive identical") {
  Pipeline pipe({Stage::random_flip(0.0), Stage::image_jitter(0.0), Stage::color_jitter(0.0),
                 Stage::random_grayscale(0.0), Stage::z_normalize()});
  auto img = random_image(3, 16, 16, 5);
  auto triplet = apn::sample_triplet<double>(pipe, img, {random_image(3, 16, 16, 6)}, Rng(9));
  CHECK(triplet.anchor_view.value() == triplet.positive_view.value());

  // And the degenerate pipeline is the identity up to z-normalization.
  auto direct = apn::apply(Pipeline({Stage::z_normalize()}), img, Rng(1));
  CHECK(triplet.anchor_view.value() == direct.value());
}

TEST_CASE("same seed gives byte-identical triplets") {
  Pipeline pipe({Stage::random_flip(0.5), Stage::image_jitter(3), Stage::color_jitter(0.4),
                 Stage::random_grayscale(0.3), Stage::z_normalize()});
  auto img = random_image(3, 16, 16, 7);
  std::vector<D> negs = {random_image(3, 16, 16, 8), random_image(3, 16, 16, 9)};
  auto t1 = apn::sample_triplet(pipe, img, negs, Rng(33));
  auto t2 = apn::sample_triplet(pipe, img, negs, Rng(33));
  CHECK(t1.anchor_view.value() == t2.anchor_view.value());
  CHECK(t1.positive_view.value() == t2.positive_view.value());
  REQUIRE(t1.negative_views.size() == 2);
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(t1.negative_views[i].value() == t2.negative_views[i].value());

  auto t3 = apn::sample_triplet(pipe, img, negs, Rng(34));
  CHECK(t1.anchor_view.value() != t3.anchor_view.value());
}

TEST_CASE("union pipeline on 64x64 with q=16 overlap=8 yields 49 16x16 patch views") {
  Pipeline pipe({Stage::random_flip(0.5), Stage::image_jitter(2), Stage::color_jitter(0.3),
                 Stage::random_grayscale(0.2), Stage::z_normalize(), Stage::patchify(16, 8)});
  auto img = random_image(3, 64, 64, 10);
  auto triplet = apn::sample_triplet<double>(pipe, img, {random_image(3, 64, 64, 11)}, Rng(12));
  CHECK(triplet.anchor_view.shape() == Shape{49, 3, 16, 16});
  CHECK(triplet.positive_view.shape() == Shape{49, 3, 16, 16});
}

TEST_CASE("adding a stage does not perturb the draws of other stages") {
  auto img = random_image(3, 16, 16, 13);
  Pipeline with({Stage::image_jitter(3), Stage::z_normalize()});
  Pipeline without({Stage::random_flip(0.0), Stage::image_jitter(3), Stage::z_normalize()});
  // flip with p=0 is a no-op but shares the same seed; jitter must not shift.
  auto a = apn::apply(with, img, Rng(21));
  auto b = apn::apply(without, img, Rng(21));
  CHECK(a.value() == b.value());
}

TEST_CASE("sample_triplet rejects an empty negative pool") {
  Pipeline pipe({Stage::z_normalize()});
  auto img = random_image(3, 8, 8, 14);
  CHECK_THROWS_AS(apn::sample_triplet(pipe, img, std::vector<D>{}, Rng(0)),
                  std::invalid_argument);
}
