#pragma once

#include <cctype>
#include <string>
#include <vector>

#include "apn/checkpoint.hpp"
#include "apn/encoder.hpp"
#include "apn/ops.hpp"
#include "apn/representation.hpp"
#include "apn/rng.hpp"
#include "apn/tensor.hpp"

// Representation-extraction strategies: multiscale feature-map triplets,
// spatial prediction over a patch grid with a causally masked context
// encoder, and flattened-final-map projection.

namespace apn {

// ---------------------------------------------------------------------------
// Comparison specs
// ---------------------------------------------------------------------------

// (anchor_layer : target_layer) pairs with negative layer indices, -1 being
// the deepest map. target_layer == kRandomLayer defers the choice to
// materialize(), drawn uniformly over the available depth.
struct ComparisonSpec {
  static constexpr int kRandomLayer = 1;  // impossible as a real index

  struct Pair {
    int anchor_layer;
    int target_layer;
  };

  std::vector<Pair> pairs;
  std::uint64_t random_seed = 0;

  bool has_random() const {
    for (const auto& p : pairs)
      if (p.target_layer == kRandomLayer) return true;
    return false;
  }

  // Resolves random targets and validates every index against the depth.
  std::vector<Pair> materialize(std::size_t depth) const {
    Rng rng = Rng(random_seed).fork("last_random");
    std::vector<Pair> out;
    for (const auto& p : pairs) {
      Pair q = p;
      if (q.target_layer == kRandomLayer)
        q.target_layer = int(rng.uniform_int(-std::int64_t(depth), -1));
      for (int idx : {q.anchor_layer, q.target_layer})
        detail::check(idx >= -int(depth) && idx < 0,
                      "comparison spec: layer " + std::to_string(idx) +
                          " out of range for encoder depth " + std::to_string(depth));
      out.push_back(q);
    }
    return out;
  }

  std::string str() const {
    std::string s;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(pairs[i].anchor_layer) + ":";
      s += pairs[i].target_layer == kRandomLayer ? "?" : std::to_string(pairs[i].target_layer);
    }
    return s;
  }
};

namespace detail {

[[noreturn]] inline void spec_error(const std::string& text, std::size_t pos,
                                    const std::string& why) {
  throw std::invalid_argument("comparison spec \"" + text + "\": parse error at position " +
                              std::to_string(pos) + ": " + why);
}

}  // namespace detail

// Grammar: item(,item)* where item is "j:k" with signed integers, or one of
// the keywords last_only, amdim, same_level, last_random, last_random(<seed>).
inline ComparisonSpec parse_comparison_spec(const std::string& text) {
  ComparisonSpec spec;
  std::size_t i = 0;
  auto skip_ws = [&] {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  };
  auto parse_int = [&]() -> int {
    skip_ws();
    const std::size_t start = i;
    if (i < text.size() && (text[i] == '-' || text[i] == '+')) ++i;
    while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
    if (i == start || (i == start + 1 && !std::isdigit(static_cast<unsigned char>(text[start]))))
      detail::spec_error(text, start, "expected an integer");
    return std::stoi(text.substr(start, i - start));
  };

  bool first = true;
  while (true) {
    skip_ws();
    if (i >= text.size()) {
      if (first) detail::spec_error(text, i, "empty spec");
      detail::spec_error(text, i, "trailing comma");
    }
    first = false;
    const std::size_t item_start = i;
    if (std::isalpha(static_cast<unsigned char>(text[i])) || text[i] == '_') {
      std::size_t j = i;
      while (j < text.size() &&
             (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == '_'))
        ++j;
      const std::string word = text.substr(i, j - i);
      i = j;
      if (word == "last_only") {
        spec.pairs.push_back({-1, -1});
      } else if (word == "amdim") {
        spec.pairs.push_back({-1, -2});
        spec.pairs.push_back({-1, -3});
        spec.pairs.push_back({-2, -2});
      } else if (word == "same_level") {
        spec.pairs.push_back({-1, -1});
        spec.pairs.push_back({-2, -2});
        spec.pairs.push_back({-3, -3});
      } else if (word == "last_random") {
        skip_ws();
        if (i < text.size() && text[i] == '(') {
          ++i;
          spec.random_seed = std::uint64_t(parse_int());
          skip_ws();
          if (i >= text.size() || text[i] != ')')
            detail::spec_error(text, i, "expected ')' after last_random seed");
          ++i;
        }
        spec.pairs.push_back({-1, ComparisonSpec::kRandomLayer});
      } else {
        detail::spec_error(text, item_start, "unknown keyword '" + word + "'");
      }
    } else {
      const int anchor = parse_int();
      skip_ws();
      if (i >= text.size() || text[i] != ':')
        detail::spec_error(text, i, "expected ':' between layer indices");
      ++i;
      const int target = parse_int();
      if (anchor >= 0 || target >= 0)
        detail::spec_error(text, item_start, "layer indices must be negative (-1 = deepest)");
      spec.pairs.push_back({anchor, target});
    }
    skip_ws();
    if (i >= text.size()) break;
    if (text[i] != ',') detail::spec_error(text, i, "expected ',' between items");
    ++i;
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Grid-cell views of feature maps
// ---------------------------------------------------------------------------

// (c, h, w) map -> (h*w, c) matrix of grid-cell vectors, row-major cells.
template <class T>
Tensor<T> grid_cell_matrix(const Tensor<T>& map) {
  detail::check(map.rank() == 3, "grid_cell_matrix: expected (c,h,w), got " +
                                     shape_str(map.shape()));
  const Shape& s = map.shape();
  return permute(reshape(map, {s[0], s[1] * s[2]}), {1, 0});
}

template <class T>
std::vector<Tensor<T>> grid_cells(const Tensor<T>& map) {
  auto m = grid_cell_matrix(map);
  std::vector<Tensor<T>> cells;
  cells.reserve(m.shape()[0]);
  for (std::size_t i = 0; i < m.shape()[0]; ++i) cells.push_back(nth_row(m, i));
  return cells;
}

// ---------------------------------------------------------------------------
// Multiscale triplet extraction
// ---------------------------------------------------------------------------

struct AmdimExtractOptions {
  // Every anchor-map grid cell becomes an anchor by default, which keeps the
  // loss deterministic. Sampling mode draws a single cell instead.
  bool sample_single_anchor = false;
  std::uint64_t sample_seed = 0;
};

// One batch per comparison pair: anchors from the anchor view's map j,
// positives all cells of the positive view's map k, negatives all cells of
// every negative view's map k.
template <class T>
std::vector<RepresentationBatch<T>> extract_amdim(const FeatureMapSet<T>& anchor_maps,
                                                  const FeatureMapSet<T>& positive_maps,
                                                  const std::vector<FeatureMapSet<T>>& negative_maps,
                                                  const ComparisonSpec& spec,
                                                  const AmdimExtractOptions& opt = {}) {
  const auto pairs = spec.materialize(anchor_maps.depth());
  std::vector<RepresentationBatch<T>> batches;
  for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
    const auto [j, k] = pairs[pi];
    const auto& amap = anchor_maps.map(j);
    const auto& pmap = positive_maps.map(k);
    detail::check(amap.shape()[0] == pmap.shape()[0],
                  "extract_amdim: map " + std::to_string(j) + " has " +
                      std::to_string(amap.shape()[0]) + " channels but map " + std::to_string(k) +
                      " has " + std::to_string(pmap.shape()[0]) +
                      "; compared maps must share dimensionality");
    RepresentationBatch<T> batch;
    if (opt.sample_single_anchor) {
      auto cells = grid_cell_matrix(amap);
      Rng rng = Rng(opt.sample_seed).fork("anchor_cell").fork(pi);
      const std::size_t pick = std::size_t(rng.uniform_int(0, std::int64_t(cells.shape()[0]) - 1));
      batch.anchors.push_back(nth_row(cells, pick));
    } else {
      batch.anchors = grid_cells(amap);
    }
    auto positive_cells = grid_cells(pmap);
    batch.positives.assign(batch.anchors.size(), positive_cells);
    for (const auto& neg : negative_maps) {
      auto cells = grid_cells(neg.map(k));
      batch.negatives.insert(batch.negatives.end(), cells.begin(), cells.end());
    }
    batch.validate();
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Spatial prediction over a patch grid
// ---------------------------------------------------------------------------

// Two stacked masked 3x3 convolutions. The below-center kernel row is forced
// to zero, so output cell (i, j) depends only on input rows <= i.
template <class T>
class ContextEncoder {
public:
  ContextEncoder() = default;

  ContextEncoder(std::size_t channels, Rng rng) : channels_(channels) {
    const double bound = 1.0 / std::sqrt(double(channels * 9));
    Rng r1 = rng.fork("context.conv0"), r2 = rng.fork("context.conv1");
    kernel0_ = Tensor<T>::uniform({channels, channels, 3, 3}, r1, T(-bound), T(bound));
    kernel0_.set_requires_grad(true);
    bias0_ = Tensor<T>::zeros({channels}).set_requires_grad(true);
    kernel1_ = Tensor<T>::uniform({channels, channels, 3, 3}, r2, T(-bound), T(bound));
    kernel1_.set_requires_grad(true);
    bias1_ = Tensor<T>::zeros({channels}).set_requires_grad(true);
    std::vector<T> m(9, T(1));
    m[6] = m[7] = m[8] = T(0);  // bottom kernel row
    mask_ = Tensor<T>::from_data({1, 1, 3, 3}, std::move(m));
  }

  std::size_t channels() const { return channels_; }

  // (b, c, h, w) grid -> context of the same shape.
  Tensor<T> context(const Tensor<T>& grid) const {
    detail::check(grid.rank() == 4 && grid.shape()[1] == channels_,
                  "context encoder: expected (b," + std::to_string(channels_) +
                      ",h,w) grid, got " + shape_str(grid.shape()));
    auto x = conv2d(grid, mul(kernel0_, mask_), std::optional<Tensor<T>>{bias0_}, 1, 1);
    x = relu(x);
    return conv2d(x, mul(kernel1_, mask_), std::optional<Tensor<T>>{bias1_}, 1, 1);
  }

  std::vector<Tensor<T>*> parameters() {
    return {&kernel0_, &bias0_, &kernel1_, &bias1_};
  }

  StateDict<T> state_dict(const std::string& prefix) const {
    return {{prefix + "conv0.kernel", kernel0_},
            {prefix + "conv0.bias", bias0_},
            {prefix + "conv1.kernel", kernel1_},
            {prefix + "conv1.bias", bias1_}};
  }

  void load_state_dict(const StateDict<T>& state, const std::string& prefix) {
    kernel0_ = checkpoint_get(state, prefix + "conv0.kernel").detach().set_requires_grad(true);
    bias0_ = checkpoint_get(state, prefix + "conv0.bias").detach().set_requires_grad(true);
    kernel1_ = checkpoint_get(state, prefix + "conv1.kernel").detach().set_requires_grad(true);
    bias1_ = checkpoint_get(state, prefix + "conv1.bias").detach().set_requires_grad(true);
  }

private:
  std::size_t channels_ = 0;
  Tensor<T> kernel0_, bias0_, kernel1_, bias1_, mask_;
};

// One (c, c) matrix per row offset k >= 1; the prediction for a context cell
// is W_k applied to its context vector.
template <class T>
struct PredictionMatrices {
  std::vector<Tensor<T>> weights;  // weights[k-1] predicts k rows below

  static PredictionMatrices init(std::size_t channels, std::size_t max_offset, Rng rng) {
    detail::check(max_offset >= 1, "prediction matrices: need at least offset 1");
    PredictionMatrices pm;
    const double bound = 1.0 / std::sqrt(double(channels));
    for (std::size_t k = 1; k <= max_offset; ++k) {
      Rng r = rng.fork("predict.w").fork(k);
      pm.weights.push_back(
          Tensor<T>::uniform({channels, channels}, r, T(-bound), T(bound)).set_requires_grad(true));
    }
    return pm;
  }

  std::size_t max_offset() const { return weights.size(); }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> ps;
    for (auto& w : weights) ps.push_back(&w);
    return ps;
  }

  StateDict<T> state_dict(const std::string& prefix) const {
    StateDict<T> s;
    for (std::size_t k = 0; k < weights.size(); ++k)
      s.emplace_back(prefix + "w" + std::to_string(k + 1), weights[k]);
    return s;
  }

  void load_state_dict(const StateDict<T>& state, const std::string& prefix) {
    for (std::size_t k = 0; k < weights.size(); ++k)
      weights[k] = checkpoint_get(state, prefix + "w" + std::to_string(k + 1))
                       .detach()
                       .set_requires_grad(true);
  }
};

// Labels for offset k on a (b, h, w) grid: prediction row g (flat over
// (batch, row, col) with row < h-k) targets the cell k rows below inside the
// flattened (b*h*w) target matrix.
inline std::vector<std::size_t> cpc_labels(std::size_t batch, std::size_t h, std::size_t w,
                                           std::size_t offset) {
  const std::size_t rows = h - offset;
  std::vector<std::size_t> labels(batch * rows * w);
  for (std::size_t g = 0; g < labels.size(); ++g) {
    const std::size_t batch_index = g / (rows * w);
    const std::size_t flat_in_batch = g % (rows * w);
    labels[g] = batch_index * h * w + offset * w + flat_in_batch;
  }
  return labels;
}

// Predict grid cells spatially below each context cell. anchors hold the
// scaled predictions for every valid (cell, offset); the target pool is every
// grid vector in the batch, and labels select each prediction's true target.
// Offsets taller than the grid are skipped; an empty result is an error.
template <class T>
RepresentationBatch<T> extract_cpc(const Tensor<T>& grids, const ContextEncoder<T>& ctx,
                                   const PredictionMatrices<T>& predict, T embed_scale = T(0.1)) {
  detail::check(grids.rank() == 4, "extract_cpc: expected (b,c,h,w) grids, got " +
                                       shape_str(grids.shape()));
  const std::size_t b = grids.shape()[0], c = grids.shape()[1], h = grids.shape()[2],
                    w = grids.shape()[3];

  auto context = ctx.context(grids);  // (b, c, h, w)
  auto target_pool = reshape(permute(grids, {0, 2, 3, 1}), {b * h * w, c});

  std::vector<Tensor<T>> anchor_parts;
  std::vector<std::size_t> labels;
  for (std::size_t k = 1; k <= predict.max_offset(); ++k) {
    if (k >= h) continue;  // no cell has a target k rows below
    auto ctx_rows = slice(context, 2, 0, h - k);                       // (b, c, h-k, w)
    auto ctx_mat = reshape(permute(ctx_rows, {0, 2, 3, 1}), {b * (h - k) * w, c});
    auto preds = mul_scalar(matmul(ctx_mat, transpose2d(predict.weights[k - 1])), embed_scale);
    anchor_parts.push_back(preds);
    const auto part = cpc_labels(b, h, w, k);
    labels.insert(labels.end(), part.begin(), part.end());
  }
  if (anchor_parts.empty())
    throw std::invalid_argument("extract_cpc: no prediction targets (grid height " +
                                std::to_string(h) + " leaves every offset empty)");

  auto anchors = concat(anchor_parts, 0);
  RepresentationBatch<T> batch;
  for (std::size_t i = 0; i < anchors.shape()[0]; ++i) batch.anchors.push_back(nth_row(anchors, i));
  batch.positives.resize(batch.anchors.size());
  for (std::size_t i = 0; i < batch.anchors.size(); ++i)
    batch.positives[i].push_back(nth_row(target_pool, labels[i]));
  for (std::size_t i = 0; i < b * h * w; ++i) batch.negatives.push_back(nth_row(target_pool, i));
  batch.labels = labels;
  batch.validate();
  return batch;
}

// ---------------------------------------------------------------------------
// Flattened-map projection
// ---------------------------------------------------------------------------

// Two-layer MLP mapping representation vectors to the projection space, same
// width in and out; an identity mode passes vectors through untouched.
template <class T>
class ProjectionHead {
public:
  ProjectionHead() = default;

  ProjectionHead(std::size_t dim, Rng rng) : dim_(dim), identity_(false) {
    const double bound = 1.0 / std::sqrt(double(dim));
    Rng r1 = rng.fork("head.fc0"), r2 = rng.fork("head.fc1");
    w0_ = Tensor<T>::uniform({dim, dim}, r1, T(-bound), T(bound)).set_requires_grad(true);
    b0_ = Tensor<T>::zeros({dim}).set_requires_grad(true);
    w1_ = Tensor<T>::uniform({dim, dim}, r2, T(-bound), T(bound)).set_requires_grad(true);
    b1_ = Tensor<T>::zeros({dim}).set_requires_grad(true);
  }

  static ProjectionHead identity() { return ProjectionHead(); }

  bool is_identity() const { return identity_; }
  std::size_t dim() const { return dim_; }

  Tensor<T> project(const Tensor<T>& rows) const {
    detail::check(rows.rank() == 2, "projection head: expected (n, d) rows, got " +
                                        shape_str(rows.shape()));
    if (identity_) return rows;
    detail::check(rows.shape()[1] == dim_, "projection head: rows have width " +
                                               std::to_string(rows.shape()[1]) + ", head expects " +
                                               std::to_string(dim_));
    return linear(relu(linear(rows, w0_, b0_)), w1_, b1_);
  }

  std::vector<Tensor<T>*> parameters() {
    if (identity_) return {};
    return {&w0_, &b0_, &w1_, &b1_};
  }

  StateDict<T> state_dict(const std::string& prefix) const {
    if (identity_) return {};
    return {{prefix + "fc0.weight", w0_},
            {prefix + "fc0.bias", b0_},
            {prefix + "fc1.weight", w1_},
            {prefix + "fc1.bias", b1_}};
  }

  void load_state_dict(const StateDict<T>& state, const std::string& prefix) {
    if (identity_) return;
    w0_ = checkpoint_get(state, prefix + "fc0.weight").detach().set_requires_grad(true);
    b0_ = checkpoint_get(state, prefix + "fc0.bias").detach().set_requires_grad(true);
    w1_ = checkpoint_get(state, prefix + "fc1.weight").detach().set_requires_grad(true);
    b1_ = checkpoint_get(state, prefix + "fc1.bias").detach().set_requires_grad(true);
  }

private:
  std::size_t dim_ = 0;
  bool identity_ = true;
  Tensor<T> w0_, b0_, w1_, b1_;
};

template <class T>
struct SimclrExtraction {
  Tensor<T> z1, z2;  // (n, c) unit rows, index-aligned positive pairs
  RepresentationBatch<T> batch;
};

// Flatten each image's deepest map, project, L2-normalize. Anchors are all 2n
// projected views; the shared pool holds the same 2n rows, labels point at
// each anchor's partner, and an anchor's effective negatives are the pool
// minus itself and its partner (2n - 2 vectors).
template <class T>
SimclrExtraction<T> extract_simclr(const std::vector<FeatureMapSet<T>>& anchor_maps,
                                   const std::vector<FeatureMapSet<T>>& positive_maps,
                                   const ProjectionHead<T>& head) {
  detail::check(!anchor_maps.empty(), "extract_simclr: empty batch");
  detail::check(anchor_maps.size() == positive_maps.size(),
                "extract_simclr: mismatched view counts");
  const std::size_t n = anchor_maps.size();

  auto flatten_batch = [&](const std::vector<FeatureMapSet<T>>& sets) {
    std::vector<Tensor<T>> rows;
    for (const auto& set : sets) {
      const auto& deepest = set.map(-1);
      rows.push_back(reshape(deepest, {deepest.size()}));
    }
    return stack_rows(rows);
  };

  auto h1 = flatten_batch(anchor_maps);
  auto h2 = flatten_batch(positive_maps);
  SimclrExtraction<T> out;
  out.z1 = l2_normalize(head.project(h1), std::size_t(1));
  out.z2 = l2_normalize(head.project(h2), std::size_t(1));

  auto all = concat({out.z1, out.z2}, 0);
  std::vector<std::size_t> labels(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    out.batch.anchors.push_back(nth_row(all, i));
    labels[i] = i < n ? i + n : i - n;
  }
  out.batch.positives.resize(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i)
    out.batch.positives[i].push_back(nth_row(all, labels[i]));
  for (std::size_t i = 0; i < 2 * n; ++i) out.batch.negatives.push_back(nth_row(all, i));
  out.batch.labels = std::move(labels);
  out.batch.validate();
  return out;
}

}  // namespace apn
