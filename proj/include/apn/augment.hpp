#pragma once

#include <string>
#include <vector>

#include "apn/rng.hpp"
#include "apn/tensor.hpp"

// Stochastic augmentation pipelines producing anchor / positive / negative
// views. A pipeline applied to a (d, h, w) image stays rank 3 unless it ends
// with a patchify stage, which emits (patches, d, q, q) in row-major patch
// order (top-left to bottom-right).
//
// Every stage draws from its own forked stream keyed by stage kind (plus an
// occurrence counter for repeated kinds), so inserting a new stage leaves the
// draws of the other stages untouched.

namespace apn {

struct PatchifyConfig {
  std::size_t patch = 0;    // q, patch side length in pixels
  std::size_t overlap = 0;  // pixels shared between adjacent patches
};

enum class StageKind { random_flip, image_jitter, color_jitter, random_grayscale, z_normalize, patchify };

inline const char* stage_name(StageKind k) {
  switch (k) {
    case StageKind::random_flip: return "random_flip";
    case StageKind::image_jitter: return "image_jitter";
    case StageKind::color_jitter: return "color_jitter";
    case StageKind::random_grayscale: return "random_grayscale";
    case StageKind::z_normalize: return "z_normalize";
    case StageKind::patchify: return "patchify";
  }
  return "?";
}

struct Stage {
  StageKind kind;
  double probability = 0.0;  // random_flip, random_grayscale
  double magnitude = 0.0;    // image_jitter: max shift in px; color_jitter: strength
  PatchifyConfig patchify_cfg;

  static Stage random_flip(double p = 0.5) { return {StageKind::random_flip, p, 0, {}}; }
  static Stage image_jitter(double max_shift_px) {
    return {StageKind::image_jitter, 0, max_shift_px, {}};
  }
  static Stage color_jitter(double strength) { return {StageKind::color_jitter, 0, strength, {}}; }
  static Stage random_grayscale(double p = 0.25) {
    return {StageKind::random_grayscale, p, 0, {}};
  }
  static Stage z_normalize() { return {StageKind::z_normalize, 0, 0, {}}; }
  static Stage patchify(std::size_t q, std::size_t overlap) {
    return {StageKind::patchify, 0, 0, {q, overlap}};
  }

  void validate() const {
    switch (kind) {
      case StageKind::random_flip:
      case StageKind::random_grayscale:
        detail::check(probability >= 0.0 && probability <= 1.0,
                      std::string(stage_name(kind)) + ": probability must be in [0, 1]");
        break;
      case StageKind::image_jitter:
      case StageKind::color_jitter:
        detail::check(magnitude >= 0.0,
                      std::string(stage_name(kind)) + ": magnitude must be >= 0");
        break;
      case StageKind::z_normalize:
        break;
      case StageKind::patchify:
        detail::check(patchify_cfg.patch > 0, "patchify: patch side must be positive");
        detail::check(patchify_cfg.overlap < patchify_cfg.patch,
                      "patchify: overlap must be smaller than the patch side");
        break;
    }
  }
};

struct Pipeline {
  std::vector<Stage> stages;

  Pipeline() = default;
  explicit Pipeline(std::vector<Stage> s) : stages(std::move(s)) { validate(); }

  void validate() const {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      stages[i].validate();
      if (stages[i].kind == StageKind::patchify)
        detail::check(i + 1 == stages.size(), "pipeline: patchify must be the final stage");
    }
  }

  bool has_patchify() const {
    return !stages.empty() && stages.back().kind == StageKind::patchify;
  }

  // Deterministic-only subset (normalization and patchify): what evaluation
  // and probing apply so features match the training input format.
  Pipeline deterministic() const {
    std::vector<Stage> kept;
    for (const auto& s : stages)
      if (s.kind == StageKind::z_normalize || s.kind == StageKind::patchify) kept.push_back(s);
    return Pipeline(std::move(kept));
  }
};

template <class T>
struct ViewTriplet {
  Tensor<T> anchor_view;
  Tensor<T> positive_view;
  std::vector<Tensor<T>> negative_views;
};

namespace detail {

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const std::ptrdiff_t len = std::ptrdiff_t(n);
  if (i < 0) i = -i - 1;
  if (i >= len) i = 2 * len - 1 - i;
  return std::size_t(i);
}

template <class T>
void flip_horizontal(std::vector<T>& img, std::size_t d, std::size_t h, std::size_t w) {
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t y = 0; y < h; ++y) {
      T* row = img.data() + (c * h + y) * w;
      for (std::size_t x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
}

template <class T>
void translate_reflect(std::vector<T>& img, std::size_t d, std::size_t h, std::size_t w,
                       std::ptrdiff_t dy, std::ptrdiff_t dx) {
  if (dy == 0 && dx == 0) return;
  std::vector<T> src = img;
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = reflect_index(std::ptrdiff_t(y) + dy, h);
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sx = reflect_index(std::ptrdiff_t(x) + dx, w);
        img[(c * h + y) * w + x] = src[(c * h + sy) * w + sx];
      }
    }
}

template <class T>
void z_normalize_channels(std::vector<T>& img, std::size_t d, std::size_t hw) {
  for (std::size_t c = 0; c < d; ++c) {
    T* ch = img.data() + c * hw;
    double mean = 0;
    for (std::size_t i = 0; i < hw; ++i) mean += double(ch[i]);
    mean /= double(hw);
    double var = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double e = double(ch[i]) - mean;
      var += e * e;
    }
    const double stddev = std::sqrt(var / double(hw));
    const double denom = std::max(stddev, 1e-8);
    for (std::size_t i = 0; i < hw; ++i) ch[i] = T((double(ch[i]) - mean) / denom);
  }
}

}  // namespace detail

// Patch grid extents for an (h, w) image; throws if the stride does not tile
// the image exactly.
inline std::pair<std::size_t, std::size_t> patch_grid(std::size_t h, std::size_t w,
                                                      const PatchifyConfig& cfg) {
  const std::size_t q = cfg.patch, step = q - cfg.overlap;
  detail::check(q <= h && q <= w, "patchify: patch side " + std::to_string(q) +
                                      " exceeds image extents " + std::to_string(h) + "x" +
                                      std::to_string(w));
  if ((h - q) % step != 0 || (w - q) % step != 0)
    throw std::invalid_argument("patchify: stride " + std::to_string(step) +
                                " does not tile extents " + std::to_string(h) + "x" +
                                std::to_string(w) + " with patch side " + std::to_string(q));
  return {(h - q) / step + 1, (w - q) / step + 1};
}

// One stochastic draw of the pipeline. Pure function of (pipeline, image, rng).
template <class T>
Tensor<T> apply(const Pipeline& pipeline, const Tensor<T>& image, Rng rng) {
  pipeline.validate();
  detail::check(image.rank() == 3,
                "apply: image must be rank 3 (d,h,w), got " + shape_str(image.shape()));
  const std::size_t d = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  std::vector<T> img = image.value();

  std::size_t occurrence = 0;
  StageKind prev = StageKind::z_normalize;
  bool first = true;
  for (const auto& stage : pipeline.stages) {
    occurrence = (!first && stage.kind == prev) ? occurrence + 1 : 0;
    prev = stage.kind;
    first = false;
    Rng draw = rng.fork(std::string(stage_name(stage.kind)) + "#" + std::to_string(occurrence));
    switch (stage.kind) {
      case StageKind::random_flip:
        if (draw.bernoulli(stage.probability)) detail::flip_horizontal(img, d, h, w);
        break;
      case StageKind::image_jitter: {
        const std::ptrdiff_t m = std::ptrdiff_t(stage.magnitude);
        const std::ptrdiff_t dy = draw.uniform_int(-m, m);
        const std::ptrdiff_t dx = draw.uniform_int(-m, m);
        detail::translate_reflect(img, d, h, w, dy, dx);
        break;
      }
      case StageKind::color_jitter: {
        for (std::size_t c = 0; c < d; ++c) {
          const double scale = draw.uniform(1.0 - stage.magnitude, 1.0 + stage.magnitude);
          const double shift = draw.uniform(-stage.magnitude, stage.magnitude);
          T* ch = img.data() + c * h * w;
          for (std::size_t i = 0; i < h * w; ++i) ch[i] = T(double(ch[i]) * scale + shift);
        }
        break;
      }
      case StageKind::random_grayscale:
        if (draw.bernoulli(stage.probability)) {
          for (std::size_t i = 0; i < h * w; ++i) {
            double g = 0;
            for (std::size_t c = 0; c < d; ++c) g += double(img[c * h * w + i]);
            g /= double(d);
            for (std::size_t c = 0; c < d; ++c) img[c * h * w + i] = T(g);
          }
        }
        break;
      case StageKind::z_normalize:
        detail::z_normalize_channels(img, d, h * w);
        break;
      case StageKind::patchify: {
        const auto& cfg = stage.patchify_cfg;
        const auto [rows, cols] = patch_grid(h, w, cfg);
        const std::size_t q = cfg.patch, step = q - cfg.overlap;
        std::vector<T> patches(rows * cols * d * q * q);
        std::size_t at = 0;
        for (std::size_t py = 0; py < rows; ++py)
          for (std::size_t px = 0; px < cols; ++px)
            for (std::size_t c = 0; c < d; ++c)
              for (std::size_t y = 0; y < q; ++y)
                for (std::size_t x = 0; x < q; ++x)
                  patches[at++] = img[(c * h + py * step + y) * w + px * step + x];
        return Tensor<T>::from_data({rows * cols, d, q, q}, std::move(patches));
      }
    }
  }
  return Tensor<T>::from_data({d, h, w}, std::move(img));
}

// Anchor and positive from two independent pipeline draws on the same image;
// one draw per negative source. Streams are forked per view so adding a
// negative does not change the anchor or positive views.
template <class T>
ViewTriplet<T> sample_triplet(const Pipeline& pipeline, const Tensor<T>& image,
                              const std::vector<Tensor<T>>& negative_sources, Rng rng) {
  detail::check(!negative_sources.empty(), "sample_triplet: negative source list is empty");
  for (const auto& n : negative_sources)
    detail::check(n.shape() == image.shape(), "sample_triplet: negative source shape " +
                                                  shape_str(n.shape()) + " differs from image " +
                                                  shape_str(image.shape()));
  ViewTriplet<T> t;
  t.anchor_view = apply(pipeline, image, rng.fork("anchor"));
  t.positive_view = apply(pipeline, image, rng.fork("positive"));
  t.negative_views.reserve(negative_sources.size());
  for (std::size_t i = 0; i < negative_sources.size(); ++i)
    t.negative_views.push_back(apply(pipeline, negative_sources[i], rng.fork("negative").fork(i)));
  return t;
}

}  // namespace apn
