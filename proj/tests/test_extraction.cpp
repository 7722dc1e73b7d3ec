#include <catch2/catch_amalgamated.hpp>

#include "apn/extraction.hpp"
#include "apn/oracles.hpp"
#include "apn/simloss.hpp"

using apn::ComparisonSpec;
using apn::ContextEncoder;
using apn::FeatureMapSet;
using apn::PredictionMatrices;
using apn::ProjectionHead;
using apn::Rng;
using apn::Shape;
using apn::Tensor;
using D = Tensor<double>;

namespace {

FeatureMapSet<double> map_set(std::vector<D> maps) {
  FeatureMapSet<double> s;
  s.maps = std::move(maps);
  return s;
}

}  // namespace

TEST_CASE("comparison spec keywords") {
  auto last = apn::parse_comparison_spec("last_only");
  REQUIRE(last.pairs.size() == 1);
  CHECK(last.pairs[0].anchor_layer == -1);
  CHECK(last.pairs[0].target_layer == -1);

  auto amdim = apn::parse_comparison_spec("amdim");
  REQUIRE(amdim.pairs.size() == 3);
  CHECK(amdim.pairs[0].anchor_layer == -1);
  CHECK(amdim.pairs[0].target_layer == -2);
  CHECK(amdim.pairs[1].anchor_layer == -1);
  CHECK(amdim.pairs[1].target_layer == -3);
  CHECK(amdim.pairs[2].anchor_layer == -2);
  CHECK(amdim.pairs[2].target_layer == -2);

  auto same = apn::parse_comparison_spec("same_level");
  REQUIRE(same.pairs.size() == 3);
  for (int k = 0; k < 3; ++k) {
    CHECK(same.pairs[std::size_t(k)].anchor_layer == -(k + 1));
    CHECK(same.pairs[std::size_t(k)].target_layer == -(k + 1));
  }
}

TEST_CASE("comparison spec explicit pairs and mixing") {
  auto spec = apn::parse_comparison_spec("-1:-1,-2:-2");
  REQUIRE(spec.pairs.size() == 2);
  CHECK(spec.pairs[0].anchor_layer == -1);
  CHECK(spec.pairs[1].anchor_layer == -2);

  auto mixed = apn::parse_comparison_spec(" last_only , -3:-1 ");
  REQUIRE(mixed.pairs.size() == 2);
  CHECK(mixed.pairs[1].anchor_layer == -3);
  CHECK(mixed.pairs[1].target_layer == -1);
}

TEST_CASE("comparison spec random target resolves deterministically in range") {
  auto spec = apn::parse_comparison_spec("last_random(7)");
  REQUIRE(spec.pairs.size() == 1);
  CHECK(spec.has_random());
  auto a = spec.materialize(4);
  auto b = spec.materialize(4);
  CHECK(a[0].target_layer == b[0].target_layer);
  CHECK(a[0].anchor_layer == -1);
  CHECK(a[0].target_layer >= -4);
  CHECK(a[0].target_layer <= -1);
}

TEST_CASE("comparison spec parse errors carry positions") {
  for (const char* bad : {"", "-1", "-1:", "-1:-2,", "1:-2", "bogus", "-1;-2"}) {
    try {
      apn::parse_comparison_spec(bad);
      FAIL("expected throw for " << bad);
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("position") != std::string::npos);
    }
  }
  CHECK_THROWS_AS(apn::parse_comparison_spec("amdim").materialize(2), std::invalid_argument);
}

TEST_CASE("extract_amdim counts grid cells and negatives") {
  Rng rng(1);
  const std::size_t c = 6;
  auto view = [&](std::uint64_t seed) {
    Rng r(seed);
    return map_set({D::uniform({c, 4, 4}, r, -1, 1), D::uniform({c, 2, 2}, r, -1, 1)});
  };
  auto spec = apn::parse_comparison_spec("-1:-2");
  auto batches = apn::extract_amdim(view(1), view(2), {view(3), view(4)}, spec);
  REQUIRE(batches.size() == 1);
  const auto& b = batches[0];
  CHECK(b.anchors.size() == 4);            // 2x2 anchor map
  CHECK(b.positives[0].size() == 16);      // 4x4 positive map
  CHECK(b.negatives.size() == 2 * 16);     // all cells of every negative's map
}

TEST_CASE("extract_amdim negative counts match brute-force counting") {
  Rng rng(2);
  for (std::size_t negatives : {1u, 3u, 5u}) {
    const std::size_t c = 4, grid = 3;
    auto mk = [&] {
      return map_set({D::uniform({c, grid, grid}, rng, -1, 1)});
    };
    std::vector<FeatureMapSet<double>> negs;
    for (std::size_t i = 0; i < negatives; ++i) negs.push_back(mk());
    auto batches = apn::extract_amdim(mk(), mk(), negs, apn::parse_comparison_spec("last_only"));
    std::size_t brute = 0;
    for (std::size_t i = 0; i < negatives; ++i) brute += grid * grid;
    CHECK(batches[0].negatives.size() == brute);
  }
}

TEST_CASE("extract_amdim with 1x1 maps degrades to one vector per image") {
  Rng rng(3);
  auto mk = [&] { return map_set({D::uniform({5, 1, 1}, rng, -1, 1)}); };
  auto batches = apn::extract_amdim(mk(), mk(), {mk()}, apn::parse_comparison_spec("last_only"));
  CHECK(batches[0].anchors.size() == 1);
  CHECK(batches[0].positives[0].size() == 1);
  CHECK(batches[0].negatives.size() == 1);
}

TEST_CASE("extract_amdim amdim spec yields three batches") {
  Rng rng(4);
  auto mk = [&] {
    return map_set({D::uniform({4, 8, 8}, rng, -1, 1), D::uniform({4, 4, 4}, rng, -1, 1),
                    D::uniform({4, 2, 2}, rng, -1, 1)});
  };
  auto batches = apn::extract_amdim(mk(), mk(), {mk()}, apn::parse_comparison_spec("amdim"));
  CHECK(batches.size() == 3);
}

TEST_CASE("extract_amdim errors on depth overflow and channel mismatch") {
  Rng rng(5);
  auto shallow = map_set({D::uniform({4, 2, 2}, rng, -1, 1)});
  CHECK_THROWS_AS(
      apn::extract_amdim(shallow, shallow, {shallow}, apn::parse_comparison_spec("-1:-2")),
      std::invalid_argument);

  auto uneven = map_set({D::uniform({3, 4, 4}, rng, -1, 1), D::uniform({5, 2, 2}, rng, -1, 1)});
  CHECK_THROWS_WITH(
      apn::extract_amdim(uneven, uneven, {uneven}, apn::parse_comparison_spec("-1:-2")),
      Catch::Matchers::ContainsSubstring("dimensionality"));
}

TEST_CASE("extract_amdim sampling mode draws one anchor") {
  Rng rng(6);
  auto mk = [&] { return map_set({D::uniform({4, 3, 3}, rng, -1, 1)}); };
  apn::AmdimExtractOptions opt;
  opt.sample_single_anchor = true;
  opt.sample_seed = 11;
  auto a = apn::extract_amdim(mk(), mk(), {mk()}, apn::parse_comparison_spec("last_only"), opt);
  CHECK(a[0].anchors.size() == 1);
}

TEST_CASE("cpc labels reproduce the b=1 h=3 w=2 worked example") {
  auto labels = apn::cpc_labels(1, 3, 2, 1);
  CHECK(labels == std::vector<std::size_t>{2, 3, 4, 5});
}

TEST_CASE("cpc labels equal the nested-loop enumeration oracle") {
  for (std::size_t b = 1; b <= 3; ++b)
    for (std::size_t h = 1; h <= 3; ++h)
      for (std::size_t w = 1; w <= 3; ++w)
        for (std::size_t k = 1; k < h; ++k) {
          INFO("b=" << b << " h=" << h << " w=" << w << " k=" << k);
          CHECK(apn::cpc_labels(b, h, w, k) == apn::oracle::reference_cpc_labels(b, h, w, k));
        }
}

TEST_CASE("extract_cpc emits one prediction per valid cell and offset") {
  Rng rng(7);
  const std::size_t b = 2, c = 4, h = 3, w = 2;
  auto grids = D::uniform({b, c, h, w}, rng, -1, 1);
  ContextEncoder<double> ctx(c, Rng(8));
  auto predict = PredictionMatrices<double>::init(c, 2, Rng(9));
  auto batch = apn::extract_cpc(grids, ctx, predict);

  const std::size_t expect = b * ((h - 1) * w + (h - 2) * w);
  CHECK(batch.anchors.size() == expect);
  CHECK(batch.negatives.size() == b * h * w);
  REQUIRE(batch.labels.has_value());
  std::vector<std::size_t> want = apn::oracle::reference_cpc_labels(b, h, w, 1);
  auto second = apn::oracle::reference_cpc_labels(b, h, w, 2);
  want.insert(want.end(), second.begin(), second.end());
  CHECK(*batch.labels == want);
  // The labelled positive is the stored positive vector.
  for (std::size_t i : {std::size_t(0), expect - 1})
    CHECK(batch.positives[i][0].value() == batch.negatives[(*batch.labels)[i]].value());
}

TEST_CASE("extract_cpc skips oversized offsets and rejects empty grids") {
  Rng rng(10);
  const std::size_t c = 3;
  ContextEncoder<double> ctx(c, Rng(11));
  auto predict = PredictionMatrices<double>::init(c, 5, Rng(12));

  auto grids = D::uniform({1, c, 2, 2}, rng, -1, 1);
  auto batch = apn::extract_cpc(grids, ctx, predict);  // only offset 1 fits
  CHECK(batch.anchors.size() == 2);

  auto flat = D::uniform({1, c, 1, 3}, rng, -1, 1);
  CHECK_THROWS_WITH(apn::extract_cpc(flat, ctx, predict),
                    Catch::Matchers::ContainsSubstring("no prediction targets"));
}

TEST_CASE("context encoder causality holds for random parameter draws") {
  Rng rng(13);
  const std::size_t c = 3, h = 4, w = 3;
  for (int draw = 0; draw < 100; ++draw) {
    ContextEncoder<double> ctx(c, Rng(1000 + std::uint64_t(draw)));
    auto grid = D::uniform({1, c, h, w}, rng, -1, 1);
    const std::size_t keep_rows = 1 + std::size_t(rng.uniform_int(0, h - 2));

    std::vector<double> zeroed = grid.value();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = keep_rows; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) zeroed[(ch * h + y) * w + x] = 0.0;

    auto base = ctx.context(grid);
    auto cut = ctx.context(D::from_data(grid.shape(), std::move(zeroed)));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < keep_rows; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          REQUIRE(base.at({0, ch, y, x}) == cut.at({0, ch, y, x}));
        }
  }
}

TEST_CASE("cpc predictions for surviving rows ignore zeroed rows below") {
  Rng rng(14);
  const std::size_t c = 3, h = 4, w = 2;
  ContextEncoder<double> ctx(c, Rng(15));
  auto predict = PredictionMatrices<double>::init(c, 1, Rng(16));
  auto grid = D::uniform({1, c, h, w}, rng, -1, 1);

  std::vector<double> zeroed = grid.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t x = 0; x < w; ++x) zeroed[(ch * h + 3) * w + x] = 0.0;  // zero row 3 (> i=2)

  auto base = apn::extract_cpc(grid, ctx, predict);
  auto cut = apn::extract_cpc(D::from_data(grid.shape(), std::move(zeroed)), ctx, predict);
  // offset 1: prediction rows cover grid rows 0..2; all are unchanged.
  for (std::size_t i = 0; i < base.anchors.size(); ++i)
    CHECK(base.anchors[i].value() == cut.anchors[i].value());
}

TEST_CASE("embed_scale scales predictions linearly") {
  Rng rng(17);
  const std::size_t c = 3;
  ContextEncoder<double> ctx(c, Rng(18));
  auto predict = PredictionMatrices<double>::init(c, 1, Rng(19));
  auto grid = D::uniform({1, c, 3, 2}, rng, -1, 1);
  auto a = apn::extract_cpc(grid, ctx, predict, 0.1);
  auto b = apn::extract_cpc(grid, ctx, predict, 0.2);
  for (std::size_t i = 0; i < a.anchors.size(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      CHECK(b.anchors[i].value()[j] == Catch::Approx(2.0 * a.anchors[i].value()[j]).margin(1e-12));
}

TEST_CASE("extract_simclr flattens the deepest map") {
  Rng rng(20);
  auto mk = [&] { return map_set({D::uniform({8, 2, 2}, rng, -1, 1)}); };
  std::vector<FeatureMapSet<double>> a = {mk(), mk()}, b = {mk(), mk()};
  ProjectionHead<double> head(32, Rng(21));  // 8*2*2 flattened
  auto ext = apn::extract_simclr(a, b, head);
  CHECK(ext.z1.shape() == Shape{2, 32});
  CHECK(ext.z2.shape() == Shape{2, 32});
}

TEST_CASE("extract_simclr pairing counts for a 2-image batch") {
  Rng rng(22);
  auto mk = [&] { return map_set({D::uniform({4, 1, 1}, rng, -1, 1)}); };
  std::vector<FeatureMapSet<double>> a = {mk(), mk()}, b = {mk(), mk()};
  auto ext = apn::extract_simclr(a, b, ProjectionHead<double>::identity());
  const auto& batch = ext.batch;
  REQUIRE(batch.anchors.size() == 4);
  REQUIRE(batch.labels.has_value());
  CHECK((*batch.labels) == std::vector<std::size_t>{2, 3, 0, 1});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(batch.positives[i].size() == 1);  // one positive each
    // effective negatives: the shared pool minus self and partner
    CHECK(batch.negatives.size() - 2 == 2);
  }
}

TEST_CASE("identity head on already-unit vectors is a no-op") {
  auto m1 = map_set({D::from_data({2, 1, 1}, {1, 0})});
  auto m2 = map_set({D::from_data({2, 1, 1}, {0, 1})});
  auto ext = apn::extract_simclr({m1}, {m2}, ProjectionHead<double>::identity());
  CHECK(ext.z1.value() == std::vector<double>{1, 0});
  CHECK(ext.z2.value() == std::vector<double>{0, 1});
}

TEST_CASE("extract_simclr is permutation-equivariant") {
  Rng rng(23);
  auto mk = [&] { return map_set({D::uniform({3, 2, 2}, rng, -1, 1)}); };
  std::vector<FeatureMapSet<double>> a = {mk(), mk(), mk()}, b = {mk(), mk(), mk()};
  ProjectionHead<double> head(12, Rng(24));
  auto base = apn::extract_simclr(a, b, head);

  std::vector<std::size_t> perm = {2, 0, 1};
  std::vector<FeatureMapSet<double>> pa, pb;
  for (std::size_t i : perm) {
    pa.push_back(a[i]);
    pb.push_back(b[i]);
  }
  auto permuted = apn::extract_simclr(pa, pb, head);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(permuted.z1.at({i, 0}) == base.z1.at({perm[i], 0}));
}

TEST_CASE("cpc batch feeds the labelled softmax loss") {
  Rng rng(25);
  const std::size_t c = 4;
  ContextEncoder<double> ctx(c, Rng(26));
  auto predict = PredictionMatrices<double>::init(c, 2, Rng(27));
  auto grids = D::uniform({2, c, 3, 3}, rng, -1, 1);
  auto batch = apn::extract_cpc(grids, ctx, predict);

  const auto sim = apn::Similarity<double>::dot_product();
  auto anchors = apn::stack_rows(batch.anchors);
  auto pool = apn::stack_rows(batch.negatives);
  auto batched = apn::info_nce_labeled_mean(anchors, pool, *batch.labels, sim);

  double expect = 0;
  for (std::size_t i = 0; i < batch.anchors.size(); ++i) {
    std::vector<D> negs;
    for (std::size_t j = 0; j < batch.negatives.size(); ++j)
      if (j != (*batch.labels)[i]) negs.push_back(batch.negatives[j]);
    expect += apn::info_nce(batch.anchors[i], batch.positives[i][0], negs, sim).item();
  }
  CHECK(batched.item() == Catch::Approx(expect / double(batch.anchors.size())).margin(1e-9));
}
