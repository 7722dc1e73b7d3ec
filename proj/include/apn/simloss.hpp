#pragma once

#include <optional>
#include <string>
#include <vector>

#include "apn/representation.hpp"
#include "apn/tensor.hpp"

// Similarity measures and the contrastive losses built on them, plus the
// shard-invariant negative aggregation. All exponentials go through
// max-subtracted log-sum-exp; losses stay finite for scores up to +-500.

namespace apn {

// Added to masked score-matrix entries before a log-sum-exp: exp(x - max)
// underflows to exactly 0 for such entries, so they contribute nothing to
// either the value or the gradient while everything stays finite.
template <class T>
constexpr T kMaskedScore = T(-1e30);

enum class SimilarityKind { dot, bilinear, cosine };

inline const char* similarity_name(SimilarityKind k) {
  switch (k) {
    case SimilarityKind::dot: return "dot";
    case SimilarityKind::bilinear: return "bilinear";
    case SimilarityKind::cosine: return "cosine";
  }
  return "?";
}

template <class T>
struct Similarity {
  SimilarityKind kind = SimilarityKind::dot;
  Tensor<T> weight;  // (c, c), bilinear only

  static Similarity dot_product() { return {SimilarityKind::dot, {}}; }
  static Similarity cosine() { return {SimilarityKind::cosine, {}}; }
  static Similarity bilinear(Tensor<T> w) {
    detail::check(w.rank() == 2 && w.shape()[0] == w.shape()[1],
                  "bilinear similarity: weight must be square, got " + shape_str(w.shape()));
    return {SimilarityKind::bilinear, std::move(w)};
  }
};

namespace detail {

template <class T>
void check_nonzero_rows(const Tensor<T>& m, const char* who) {
  const std::size_t n = m.shape()[0], c = m.shape()[1];
  for (std::size_t i = 0; i < n; ++i) {
    double norm2 = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = double(m.value()[i * c + j]);
      norm2 += v * v;
    }
    if (norm2 == 0.0)
      throw std::invalid_argument(std::string(who) + ": cosine similarity of a zero vector");
  }
}

}  // namespace detail

// Pairwise scores between row sets: (n, c) x (m, c) -> (n, m).
template <class T>
Tensor<T> score_matrix(const Similarity<T>& sim, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rank() == 2 && b.rank() == 2, "score_matrix: expected row matrices, got " +
                                                    shape_str(a.shape()) + " and " +
                                                    shape_str(b.shape()));
  detail::check(a.shape()[1] == b.shape()[1], "score_matrix: dimensionality mismatch " +
                                                  shape_str(a.shape()) + " vs " +
                                                  shape_str(b.shape()));
  switch (sim.kind) {
    case SimilarityKind::dot:
      return matmul(a, transpose2d(b));
    case SimilarityKind::bilinear:
      detail::check(sim.weight.defined() && sim.weight.shape()[0] == a.shape()[1],
                    "score_matrix: bilinear weight does not match dimensionality");
      return matmul(matmul(a, sim.weight), transpose2d(b));
    case SimilarityKind::cosine:
      detail::check_nonzero_rows(a, "score_matrix");
      detail::check_nonzero_rows(b, "score_matrix");
      return matmul(l2_normalize(a, std::size_t(1)), transpose2d(l2_normalize(b, std::size_t(1))));
  }
  throw std::invalid_argument("score_matrix: unknown similarity kind");
}

// Scalar score between two vectors.
template <class T>
Tensor<T> similarity(const Similarity<T>& sim, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rank() == 1 && b.rank() == 1 && a.size() == b.size(),
                "similarity: expected equal-length vectors, got " + shape_str(a.shape()) +
                    " and " + shape_str(b.shape()));
  auto s = score_matrix(sim, reshape(a, {1, a.size()}), reshape(b, {1, b.size()}));
  return reshape(s, {});
}

namespace detail {

template <class T>
Tensor<T> stack_scalars(const std::vector<Tensor<T>>& xs) {
  std::vector<Tensor<T>> shaped;
  shaped.reserve(xs.size());
  for (const auto& x : xs) shaped.push_back(reshape(x, {1}));
  return concat(shaped, 0);
}

// (1, k) score row -> scalar log-sum-exp.
template <class T>
Tensor<T> lse_row(const Tensor<T>& row) {
  return reshape(logsumexp(row, 1), {});
}

}  // namespace detail

struct LossConfig {
  enum class Kind { nce_amdim, info_nce, nt_xent };
  Kind kind = Kind::nce_amdim;
  double temperature = 0.5;  // nt_xent only
  // Whether the softmax denominator also holds the positive scores. Defaults
  // per loss: false for nce_amdim, true for info_nce.
  std::optional<bool> include_positive_in_denominator;

  bool include_positive() const {
    if (include_positive_in_denominator) return *include_positive_in_denominator;
    return kind == Kind::info_nce;
  }

  void validate() const {
    detail::check(temperature > 0, "loss config: temperature must be positive");
  }
};

inline const char* loss_name(LossConfig::Kind k) {
  switch (k) {
    case LossConfig::Kind::nce_amdim: return "nce_amdim";
    case LossConfig::Kind::info_nce: return "info_nce";
    case LossConfig::Kind::nt_xent: return "nt_xent";
  }
  return "?";
}

// -log( sum_pos exp s / sum_neg exp s ) for one anchor. The denominator holds
// only the negatives unless include_positive is set; at uniform scores the
// value is ln(|neg| / |pos|), which goes negative when positives outnumber
// negatives.
template <class T>
Tensor<T> nce_amdim(const Tensor<T>& anchor, const std::vector<Tensor<T>>& positives,
                    const std::vector<Tensor<T>>& negatives, const Similarity<T>& sim,
                    bool include_positive = false) {
  detail::check(!positives.empty(), "nce_amdim: empty positive set");
  detail::check(!negatives.empty(), "nce_amdim: empty negative set");
  auto a = reshape(anchor, {1, anchor.size()});
  auto pos_scores = score_matrix(sim, a, stack_rows(positives));  // (1, P)
  auto neg_scores = score_matrix(sim, a, stack_rows(negatives));  // (1, N)
  auto numerator = detail::lse_row(pos_scores);
  auto denominator = include_positive
                         ? detail::lse_row(concat({neg_scores, pos_scores}, 1))
                         : detail::lse_row(neg_scores);
  return sub(denominator, numerator);
}

// -log( exp s+ / (exp s+ + sum_neg exp s) ) for one anchor; equivalently
// softmax cross-entropy over [positive; negatives] with label 0.
template <class T>
Tensor<T> info_nce(const Tensor<T>& anchor, const Tensor<T>& positive,
                   const std::vector<Tensor<T>>& negatives, const Similarity<T>& sim,
                   bool include_positive = true) {
  detail::check(!negatives.empty(), "info_nce: empty negative set");
  auto a = reshape(anchor, {1, anchor.size()});
  auto pos_score = reshape(score_matrix(sim, a, stack_rows<T>({positive})), {});
  auto neg_scores = score_matrix(sim, a, stack_rows(negatives));
  auto denominator =
      include_positive
          ? detail::lse_row(concat({neg_scores, reshape(pos_score, {1, 1})}, 1))
          : detail::lse_row(neg_scores);
  return sub(denominator, pos_score);
}

// Mean per-anchor NCE over a representation batch. When every anchor shares
// the whole positive pool the scores reduce to two matmuls; otherwise each
// anchor's positive subset is scored separately.
template <class T>
Tensor<T> nce_amdim_mean(const RepresentationBatch<T>& batch, const Similarity<T>& sim,
                         bool include_positive = false) {
  batch.validate();
  detail::check(!batch.anchors.empty(), "nce_amdim_mean: no anchors");
  detail::check(!batch.negatives.empty(), "nce_amdim_mean: empty negative set");
  for (const auto& ps : batch.positives)
    detail::check(!ps.empty(), "nce_amdim_mean: anchor with empty positive set");

  bool uniform = true;
  for (const auto& ps : batch.positives) {
    uniform = uniform && ps.size() == batch.positives[0].size();
    if (!uniform) break;
    for (std::size_t i = 0; i < ps.size(); ++i)
      uniform = uniform && ps[i].node() == batch.positives[0][i].node();
  }

  auto anchors = stack_rows(batch.anchors);                        // (A, c)
  auto neg_scores = score_matrix(sim, anchors, stack_rows(batch.negatives));  // (A, N)
  Tensor<T> pos_lse, neg_lse;
  neg_lse = logsumexp(neg_scores, 1);  // (A,)
  if (uniform) {
    auto pos_scores = score_matrix(sim, anchors, stack_rows(batch.positives[0]));
    pos_lse = logsumexp(pos_scores, 1);
    if (include_positive)
      neg_lse = logsumexp(concat({neg_scores, pos_scores}, 1), 1);
  } else {
    std::vector<Tensor<T>> pos_parts, den_parts;
    for (std::size_t i = 0; i < batch.anchors.size(); ++i) {
      auto a = reshape(batch.anchors[i], {1, batch.anchors[i].size()});
      auto ps = score_matrix(sim, a, stack_rows(batch.positives[i]));
      pos_parts.push_back(detail::lse_row(ps));
      if (include_positive) {
        auto row = slice(neg_scores, 0, i, 1);
        den_parts.push_back(detail::lse_row(concat({row, ps}, 1)));
      }
    }
    pos_lse = detail::stack_scalars(pos_parts);
    if (include_positive) neg_lse = detail::stack_scalars(den_parts);
  }
  return mean(sub(neg_lse, pos_lse));
}

// Eq.-style three-term total: the mean of the three per-batch mean NCE
// losses (one third weight each). Errors unless exactly three batches are
// supplied, which in turn requires at least three encoder feature maps.
template <class T>
Tensor<T> amdim_total(const std::vector<RepresentationBatch<T>>& batches, const Similarity<T>& sim,
                      bool include_positive = false) {
  detail::check(batches.size() == 3,
                "amdim_total: expected exactly 3 representation batches (the encoder must output "
                "at least three feature maps), got " +
                    std::to_string(batches.size()));
  std::vector<Tensor<T>> terms;
  for (const auto& b : batches) terms.push_back(nce_amdim_mean(b, sim, include_positive));
  return mean(detail::stack_scalars(terms));
}

// Softmax cross-entropy over a shared target pool, labels picking the
// positive row per anchor. This is the batched info_nce with the positive
// inside the denominator.
template <class T>
Tensor<T> info_nce_labeled_mean(const Tensor<T>& anchors, const Tensor<T>& target_pool,
                                const std::vector<std::size_t>& labels, const Similarity<T>& sim) {
  auto logits = score_matrix(sim, anchors, target_pool);
  const std::size_t m = logits.shape()[1];
  std::vector<std::size_t> flat(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    detail::check(labels[i] < m, "info_nce_labeled_mean: label " + std::to_string(labels[i]) +
                                     " out of range " + std::to_string(m));
    flat[i] = i * m + labels[i];
  }
  return neg(mean(take(log_softmax(logits, 1), flat)));
}

// NT-Xent over two batches of projected views; rows are expected unit-norm.
// Follows the masked similarity-matrix formulation: out = [Z1; Z2], the
// denominator for row i sums exp(out_i . out_j / t) over all j != i (the
// positive pair's term stays in), the numerator is the paired similarity.
template <class T>
Tensor<T> nt_xent(const Tensor<T>& z1, const Tensor<T>& z2, T temperature) {
  if (!(temperature > T(0)))
    throw std::invalid_argument("nt_xent: temperature must be positive");
  detail::check(z1.rank() == 2 && z2.rank() == 2 && z1.shape() == z2.shape(),
                "nt_xent: expected matching (n, c) batches, got " + shape_str(z1.shape()) +
                    " and " + shape_str(z2.shape()));
  const std::size_t n = z1.shape()[0];
  detail::check(n >= 1, "nt_xent: empty batch");

  auto out = concat({z1, z2}, 0);                                    // (2n, c)
  auto scores = mul_scalar(matmul(out, transpose2d(out)), T(1) / temperature);
  std::vector<T> diag(4 * n * n, T(0));
  for (std::size_t i = 0; i < 2 * n; ++i) diag[i * 2 * n + i] = kMaskedScore<T>;
  auto masked = add(scores, Tensor<T>::from_data({2 * n, 2 * n}, std::move(diag)));
  auto denominator = logsumexp(masked, 1);                           // (2n,)

  auto paired = mul_scalar(sum(mul(z1, z2), {1}), T(1) / temperature);  // (n,)
  auto numerator = concat({paired, paired}, 0);                         // (2n,)
  return mean(sub(denominator, numerator));
}

// ---------------------------------------------------------------------------
// Shard-invariant negative aggregation
// ---------------------------------------------------------------------------

// One shard's slice of a global row pool. Global indices exist to detect
// overlapping shards; the union of slices must be the full pool.
template <class T>
struct ShardSlice {
  Tensor<T> rows;                           // (k, c)
  std::vector<std::size_t> global_indices;  // size k
};

namespace detail {

template <class T>
void check_disjoint(const std::vector<ShardSlice<T>>& shards) {
  std::vector<std::size_t> seen;
  for (const auto& s : shards) {
    check(s.rows.rank() == 2 && s.rows.shape()[0] == s.global_indices.size(),
          "sharded loss: slice rows do not match its index list");
    for (std::size_t g : s.global_indices) {
      if (std::find(seen.begin(), seen.end(), g) != seen.end())
        throw std::invalid_argument("sharded loss: overlapping shards (index " +
                                    std::to_string(g) + " appears twice)");
      seen.push_back(g);
    }
  }
}

}  // namespace detail

// Per-shard log-sum-exp partials for one softmax. Partials merge by a further
// log-sum-exp, which is associative and commutative over the union of terms.
template <class T>
struct ShardedScores {
  std::vector<Tensor<T>> numerator_partials;
  std::vector<Tensor<T>> denominator_partials;
  std::size_t shard_count = 0;

  Tensor<T> merged_numerator() const {
    detail::check(!numerator_partials.empty(), "sharded scores: no numerator partials");
    return reshape(logsumexp(detail::stack_scalars(numerator_partials), 0), Shape{});
  }
  Tensor<T> merged_denominator() const {
    detail::check(!denominator_partials.empty(), "sharded scores: no denominator partials");
    return reshape(logsumexp(detail::stack_scalars(denominator_partials), 0), Shape{});
  }
  // -log(numerator / denominator), both already in log space.
  Tensor<T> loss() const { return sub(merged_denominator(), merged_numerator()); }
};

// Phase 1: shard-local partials for one anchor against its negative slices.
template <class T>
ShardedScores<T> shard_partials(const Tensor<T>& anchor, const std::vector<Tensor<T>>& positives,
                                const std::vector<ShardSlice<T>>& negative_shards,
                                const Similarity<T>& sim, bool include_positive) {
  detail::check(!negative_shards.empty(), "sharded loss: no shards");
  detail::check_disjoint(negative_shards);
  ShardedScores<T> out;
  out.shard_count = negative_shards.size();
  auto a = reshape(anchor, {1, anchor.size()});
  auto pos_scores = score_matrix(sim, a, stack_rows(positives));
  out.numerator_partials.push_back(detail::lse_row(pos_scores));
  for (const auto& shard : negative_shards)
    out.denominator_partials.push_back(detail::lse_row(score_matrix(sim, a, shard.rows)));
  if (include_positive) out.denominator_partials.push_back(detail::lse_row(pos_scores));
  return out;
}

// Loss over sharded negatives; returns exactly what a single shard holding
// the whole pool would return (up to floating-point summation order).
template <class T>
Tensor<T> sharded_nce_amdim(const Tensor<T>& anchor, const std::vector<Tensor<T>>& positives,
                            const std::vector<ShardSlice<T>>& negative_shards,
                            const Similarity<T>& sim, bool include_positive = false) {
  detail::check(!positives.empty(), "sharded_nce_amdim: empty positive set");
  return shard_partials(anchor, positives, negative_shards, sim, include_positive).loss();
}

template <class T>
Tensor<T> sharded_info_nce(const Tensor<T>& anchor, const Tensor<T>& positive,
                           const std::vector<ShardSlice<T>>& negative_shards,
                           const Similarity<T>& sim, bool include_positive = true) {
  return shard_partials(anchor, std::vector<Tensor<T>>{positive}, negative_shards, sim,
                        include_positive)
      .loss();
}

// NT-Xent with the similarity columns split into contiguous shards of the
// given sizes (sizes must sum to 2n).
template <class T>
Tensor<T> sharded_nt_xent(const Tensor<T>& z1, const Tensor<T>& z2, T temperature,
                          const std::vector<std::size_t>& shard_sizes) {
  if (!(temperature > T(0)))
    throw std::invalid_argument("nt_xent: temperature must be positive");
  const std::size_t n = z1.shape()[0];
  std::size_t covered = 0;
  for (std::size_t s : shard_sizes) covered += s;
  detail::check(covered == 2 * n, "sharded_nt_xent: shard sizes sum to " + std::to_string(covered) +
                                      ", expected " + std::to_string(2 * n));

  auto out = concat({z1, z2}, 0);
  auto scores = mul_scalar(matmul(out, transpose2d(out)), T(1) / temperature);
  std::vector<T> diag(4 * n * n, T(0));
  for (std::size_t i = 0; i < 2 * n; ++i) diag[i * 2 * n + i] = kMaskedScore<T>;
  auto masked = add(scores, Tensor<T>::from_data({2 * n, 2 * n}, std::move(diag)));

  std::vector<Tensor<T>> partials;  // each (2n, 1): per-shard denominator LSE
  std::size_t at = 0;
  for (std::size_t s : shard_sizes) {
    partials.push_back(logsumexp(slice(masked, 1, at, s), 1, /*keepdims=*/true));
    at += s;
  }
  auto denominator = logsumexp(concat(partials, 1), 1);  // merge shards

  auto paired = mul_scalar(sum(mul(z1, z2), {1}), T(1) / temperature);
  auto numerator = concat({paired, paired}, 0);
  return mean(sub(denominator, numerator));
}

// Kind-dispatched wrapper over the sharded paths for batch-style inputs.
template <class T>
Tensor<T> sharded_negatives(const LossConfig& cfg, const Tensor<T>& anchor,
                            const std::vector<Tensor<T>>& positives,
                            const std::vector<ShardSlice<T>>& negative_shards,
                            const Similarity<T>& sim) {
  cfg.validate();
  switch (cfg.kind) {
    case LossConfig::Kind::nce_amdim:
      return sharded_nce_amdim(anchor, positives, negative_shards, sim, cfg.include_positive());
    case LossConfig::Kind::info_nce:
      detail::check(positives.size() == 1, "sharded info_nce expects one positive per anchor");
      return sharded_info_nce(anchor, positives[0], negative_shards, sim, cfg.include_positive());
    case LossConfig::Kind::nt_xent:
      throw std::invalid_argument(
          "sharded_negatives: nt_xent shards whole batches; use sharded_nt_xent");
  }
  throw std::invalid_argument("sharded_negatives: unknown loss kind");
}

}  // namespace apn
