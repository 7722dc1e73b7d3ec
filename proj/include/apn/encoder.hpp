#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "apn/checkpoint.hpp"
#include "apn/ops.hpp"
#include "apn/rng.hpp"
#include "apn/tensor.hpp"

// Configurable convolutional encoder producing one feature map per stage.
// Design knobs: per-stage widths (plus a global width multiplier), padding
// on/off, and the normalization kind. 3x3 kernels throughout; the first
// block of a stage may downsample via its stride.

namespace apn {

enum class NormKind { none, batch, layer };

inline const char* norm_name(NormKind n) {
  switch (n) {
    case NormKind::none: return "none";
    case NormKind::batch: return "batch";
    case NormKind::layer: return "layer";
  }
  return "?";
}

struct EncoderConfig {
  std::vector<std::size_t> stage_channels = {32, 64, 128};
  std::vector<std::size_t> blocks_per_stage = {1, 1, 1};
  // Stride of the first conv in each stage; empty means all 1 (no downsampling).
  std::vector<std::size_t> stage_strides = {};
  bool use_padding = true;
  NormKind norm = NormKind::none;
  std::size_t input_channels = 3;
  double width_multiplier = 1.0;

  void validate() const {
    detail::check(!stage_channels.empty(), "encoder config: stage_channels is empty");
    for (std::size_t c : stage_channels)
      detail::check(c > 0, "encoder config: stage_channels entries must be positive");
    detail::check(blocks_per_stage.size() == stage_channels.size(),
                  "encoder config: blocks_per_stage length differs from stage_channels");
    for (std::size_t b : blocks_per_stage)
      detail::check(b > 0, "encoder config: blocks_per_stage entries must be positive");
    detail::check(stage_strides.empty() || stage_strides.size() == stage_channels.size(),
                  "encoder config: stage_strides length differs from stage_channels");
    for (std::size_t s : stage_strides)
      detail::check(s > 0, "encoder config: stage_strides entries must be positive");
    detail::check(input_channels > 0, "encoder config: input_channels must be positive");
    detail::check(width_multiplier > 0, "encoder config: width_multiplier must be positive");
  }

  std::size_t scaled_channels(std::size_t stage) const {
    return std::max<std::size_t>(1, std::size_t(std::lround(double(stage_channels[stage]) *
                                                            width_multiplier)));
  }
};

// Per-layer encoder outputs for one input; maps.back() is the deepest.
template <class T>
struct FeatureMapSet {
  std::vector<Tensor<T>> maps;  // maps[l]: (channels_l, h_l, w_l)

  std::size_t depth() const { return maps.size(); }

  // Negative indexing, -1 = deepest.
  const Tensor<T>& map(int index) const {
    const int L = int(maps.size());
    detail::check(index >= -L && index < 0,
                  "feature map index " + std::to_string(index) + " out of range for depth " +
                      std::to_string(L));
    return maps[std::size_t(L + index)];
  }
};

template <class T>
class Encoder {
public:
  Encoder() = default;

  Encoder(EncoderConfig cfg, Rng rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::size_t in_ch = cfg_.input_channels;
    for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
      const std::size_t out_ch = cfg_.scaled_channels(s);
      std::vector<Block> stage;
      for (std::size_t b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
        Block blk;
        blk.stride = (b == 0 && !cfg_.stage_strides.empty()) ? cfg_.stage_strides[s] : 1;
        const std::size_t cin = (b == 0) ? in_ch : out_ch;
        Rng init = rng.fork("stage" + std::to_string(s) + ".block" + std::to_string(b));
        const double bound = 1.0 / std::sqrt(double(cin * 9));
        blk.kernel = Tensor<T>::uniform({out_ch, cin, 3, 3}, init, T(-bound), T(bound));
        blk.kernel.set_requires_grad(true);
        blk.bias = Tensor<T>::zeros({out_ch}).set_requires_grad(true);
        if (cfg_.norm != NormKind::none) {
          blk.norm_scale = Tensor<T>::ones({out_ch}).set_requires_grad(true);
          blk.norm_shift = Tensor<T>::zeros({out_ch}).set_requires_grad(true);
        }
        stage.push_back(std::move(blk));
      }
      stages_.push_back(std::move(stage));
      in_ch = out_ch;
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t depth() const { return stages_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& stage : stages_)
      for (const auto& blk : stage) {
        n += blk.kernel.size() + blk.bias.size();
        if (blk.norm_scale.defined()) n += blk.norm_scale.size() + blk.norm_shift.size();
      }
    return n;
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> ps;
    for (auto& stage : stages_)
      for (auto& blk : stage) {
        ps.push_back(&blk.kernel);
        ps.push_back(&blk.bias);
        if (blk.norm_scale.defined()) {
          ps.push_back(&blk.norm_scale);
          ps.push_back(&blk.norm_shift);
        }
      }
    return ps;
  }

  StateDict<T> state_dict() const {
    StateDict<T> state;
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        const auto& blk = stages_[s][b];
        const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".";
        state.emplace_back(prefix + "kernel", blk.kernel);
        state.emplace_back(prefix + "bias", blk.bias);
        if (blk.norm_scale.defined()) {
          state.emplace_back(prefix + "norm_scale", blk.norm_scale);
          state.emplace_back(prefix + "norm_shift", blk.norm_shift);
        }
      }
    return state;
  }

  void load_state_dict(const StateDict<T>& state) {
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        auto& blk = stages_[s][b];
        const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".";
        blk.kernel = load_param(state, prefix + "kernel", blk.kernel.shape());
        blk.bias = load_param(state, prefix + "bias", blk.bias.shape());
        if (blk.norm_scale.defined()) {
          blk.norm_scale = load_param(state, prefix + "norm_scale", blk.norm_scale.shape());
          blk.norm_shift = load_param(state, prefix + "norm_shift", blk.norm_shift.shape());
        }
      }
  }

  // Per-layer maps for a whole (N, C, H, W) batch; index l is the stage.
  std::vector<Tensor<T>> encode_batch(const Tensor<T>& batch) const {
    detail::check(batch.rank() == 4,
                  "encode_batch: expected rank 4 input, got " + shape_str(batch.shape()));
    std::vector<Tensor<T>> outs;
    Tensor<T> x = batch;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        const auto& blk = stages_[s][b];
        try {
          x = conv2d(x, blk.kernel, std::optional<Tensor<T>>{blk.bias}, blk.stride,
                     cfg_.use_padding ? 1 : 0);
        } catch (const std::invalid_argument& e) {
          throw std::invalid_argument("encoder stage " + std::to_string(s) + " block " +
                                      std::to_string(b) + ": " + e.what());
        }
        x = normalize(x, blk);
        x = relu(x);
      }
      outs.push_back(x);
    }
    return outs;
  }

  // Rank-3 (d, h, w) single view -> multiscale maps. Rank-4 (patches, d, q, q)
  // patched view -> each patch encoded independently, its deepest map mean
  // pooled to one vector, and the vectors reassembled into a (c, rows, cols)
  // grid; the returned set holds that grid as its only map. grid_rows = 0
  // infers a square grid and rejects non-square patch counts.
  FeatureMapSet<T> encode(const Tensor<T>& view, std::size_t grid_rows = 0) const {
    FeatureMapSet<T> set;
    if (view.rank() == 3) {
      const Shape s = view.shape();
      auto maps = encode_batch(reshape(view, {1, s[0], s[1], s[2]}));
      for (auto& m : maps) {
        const Shape ms = m.shape();
        set.maps.push_back(reshape(m, {ms[1], ms[2], ms[3]}));
      }
      return set;
    }
    detail::check(view.rank() == 4, "encode: expected rank 3 or 4 input, got " +
                                        shape_str(view.shape()));
    const std::size_t patches = view.shape()[0];
    std::size_t rows = grid_rows;
    if (rows == 0) {
      rows = std::size_t(std::lround(std::sqrt(double(patches))));
      detail::check(rows * rows == patches,
                    "encode: patch count " + std::to_string(patches) +
                        " is not a perfect square; pass grid_rows explicitly");
    }
    detail::check(patches % rows == 0, "encode: patch count " + std::to_string(patches) +
                                           " not divisible by grid_rows " + std::to_string(rows));
    const std::size_t cols = patches / rows;
    auto maps = encode_batch(view);
    auto pooled = global_mean_pool(maps.back());        // (patches, c)
    auto grid = permute(pooled, {1, 0});                // (c, patches)
    set.maps.push_back(reshape(grid, {pooled.shape()[1], rows, cols}));
    return set;
  }

private:
  struct Block {
    Tensor<T> kernel, bias, norm_scale, norm_shift;
    std::size_t stride = 1;
  };

  static Tensor<T> load_param(const StateDict<T>& state, const std::string& name,
                              const Shape& expect) {
    Tensor<T> t = checkpoint_get(state, name).detach();
    detail::check(t.shape() == expect, "load_state_dict: '" + name + "' has shape " +
                                           shape_str(t.shape()) + ", expected " +
                                           shape_str(expect));
    t.set_requires_grad(true);
    return t;
  }

  Tensor<T> normalize(const Tensor<T>& x, const Block& blk) const {
    if (cfg_.norm == NormKind::none) return x;
    constexpr T eps = T(1e-5);
    const std::size_t C = x.shape()[1];
    // batch: statistics per channel over (N, H, W); layer: per sample over (C, H, W).
    const std::vector<std::size_t> axes =
        cfg_.norm == NormKind::batch ? std::vector<std::size_t>{0, 2, 3}
                                     : std::vector<std::size_t>{1, 2, 3};
    auto mu = mean(x, axes, /*keepdims=*/true);
    auto centered = sub(x, mu);
    auto var = mean(mul(centered, centered), axes, /*keepdims=*/true);
    auto normed = div(centered, sqrt(add_scalar(var, eps)));
    auto scale = reshape(blk.norm_scale, {1, C, 1, 1});
    auto shift = reshape(blk.norm_shift, {1, C, 1, 1});
    return add(mul(normed, scale), shift);
  }

  EncoderConfig cfg_;
  std::vector<std::vector<Block>> stages_;
};

// Builds an encoder with parameters drawn deterministically from the seed.
template <class T>
Encoder<T> build_encoder(const EncoderConfig& cfg, Rng rng) {
  return Encoder<T>(cfg, rng);
}

}  // namespace apn
