#pragma once

#include <optional>
#include <vector>

#include "apn/tensor.hpp"

namespace apn {

// The anchor/positive/negative vectors a loss consumes, with the negatives
// shared by every anchor. Tensor handles share storage, so per-anchor
// positive lists that repeat the same pool cost only pointer copies.
template <class T>
struct RepresentationBatch {
  std::vector<Tensor<T>> anchors;                  // each (c,)
  std::vector<std::vector<Tensor<T>>> positives;   // positive set per anchor
  std::vector<Tensor<T>> negatives;                // shared pool
  // When present, labels[i] is the row of anchor i's positive inside the
  // score-matrix target pool (softmax-over-targets losses).
  std::optional<std::vector<std::size_t>> labels;

  void validate() const {
    detail::check(anchors.size() == positives.size(),
                  "representation batch: positives list does not match anchor count");
    if (anchors.empty()) return;
    const std::size_t c = anchors[0].size();
    auto check_vec = [&](const Tensor<T>& v) {
      detail::check(v.rank() == 1 && v.size() == c,
                    "representation batch: vector shape " + shape_str(v.shape()) +
                        " does not match dimensionality " + std::to_string(c));
    };
    for (const auto& a : anchors) check_vec(a);
    for (const auto& ps : positives)
      for (const auto& p : ps) check_vec(p);
    for (const auto& n : negatives) check_vec(n);
    if (labels) {
      detail::check(labels->size() == anchors.size(),
                    "representation batch: label count does not match anchor count");
    }
  }
};

}  // namespace apn
