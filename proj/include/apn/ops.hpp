#pragma once

#include <optional>

#include "apn/tensor.hpp"

// Convolution and the few composite ops the encoders and losses are built from.

namespace apn {

namespace detail {

// col(c*KH*KW + ky*KW + kx, oy*OW + ox) = in(c, oy*s - p + ky, ox*s - p + kx), 0 outside.
template <class T>
void im2col(const T* in, std::size_t C, std::size_t H, std::size_t W, std::size_t KH,
            std::size_t KW, std::size_t stride, std::size_t pad, std::size_t OH, std::size_t OW,
            T* col) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < KH; ++ky)
      for (std::size_t kx = 0; kx < KW; ++kx) {
        T* row = col + ((c * KH + ky) * KW + kx) * OH * OW;
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
          for (std::size_t ox = 0; ox < OW; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
            row[oy * OW + ox] =
                (iy >= 0 && iy < std::ptrdiff_t(H) && ix >= 0 && ix < std::ptrdiff_t(W))
                    ? in[(c * H + std::size_t(iy)) * W + std::size_t(ix)]
                    : T(0);
          }
        }
      }
}

template <class T>
void col2im_accum(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t KH,
                  std::size_t KW, std::size_t stride, std::size_t pad, std::size_t OH,
                  std::size_t OW, T* in_grad) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < KH; ++ky)
      for (std::size_t kx = 0; kx < KW; ++kx) {
        const T* row = col + ((c * KH + ky) * KW + kx) * OH * OW;
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(pad);
          if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
          for (std::size_t ox = 0; ox < OW; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(pad);
            if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
            in_grad[(c * H + std::size_t(iy)) * W + std::size_t(ix)] += row[oy * OW + ox];
          }
        }
      }
}

}  // namespace detail

// 2-D convolution. input (N, Cin, H, W), kernel (Cout, Cin, KH, KW), optional
// bias (Cout). Zero padding; padding = 0 disables it. Output extent follows
// floor((in + 2*pad - k) / stride) + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const std::optional<Tensor<T>>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
  detail::check(input.rank() == 4, "conv2d: input must be rank 4 (N,C,H,W), got " +
                                       shape_str(input.shape()));
  detail::check(kernel.rank() == 4, "conv2d: kernel must be rank 4 (Cout,Cin,KH,KW), got " +
                                        shape_str(kernel.shape()));
  detail::check(stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t N = input.shape()[0], C = input.shape()[1], H = input.shape()[2],
                    W = input.shape()[3];
  const std::size_t Cout = kernel.shape()[0], KC = kernel.shape()[1], KH = kernel.shape()[2],
                    KW = kernel.shape()[3];
  detail::check(KC == C, "conv2d: input channels " + std::to_string(C) +
                             " do not match kernel channels " + std::to_string(KC));
  if (H + 2 * padding < KH || W + 2 * padding < KW)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) +
                                " larger than padded input " + std::to_string(H + 2 * padding) +
                                "x" + std::to_string(W + 2 * padding));
  if (bias) {
    detail::check(bias->rank() == 1 && bias->shape()[0] == Cout,
                  "conv2d: bias shape " + shape_str(bias->shape()) + " must be (" +
                      std::to_string(Cout) + ")");
  }
  const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
  const std::size_t OW = (W + 2 * padding - KW) / stride + 1;
  const std::size_t CKK = C * KH * KW, L = OH * OW;

  std::vector<T> v(N * Cout * L, T(0));
  std::vector<T> col(CKK * L);
  const T* in = input.value().data();
  const T* km = kernel.value().data();
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(in + n * C * H * W, C, H, W, KH, KW, stride, padding, OH, OW, col.data());
    detail::mat_mul_accum(km, col.data(), v.data() + n * Cout * L, Cout, CKK, L);
  }
  if (bias) {
    const T* b = bias->value().data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < Cout; ++c) {
        T* o = v.data() + (n * Cout + c) * L;
        for (std::size_t l = 0; l < L; ++l) o[l] += b[c];
      }
  }

  std::vector<Tensor<T>> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  auto in_node = input.node();
  auto k_node = kernel.node();
  auto b_node = bias ? bias->node() : nullptr;

  return make_op<T>(
      "conv2d", {N, Cout, OH, OW}, std::move(v), parents,
      [=](TensorNode<T>& self) {
        std::vector<T> col(CKK * L);
        std::vector<T> colT(L * CKK);
        std::vector<T> kmT;
        std::vector<T> dcol(CKK * L);
        if (in_node->requires_grad) {
          in_node->ensure_grad();
          kmT.resize(CKK * Cout);
          for (std::size_t c = 0; c < Cout; ++c)
            for (std::size_t q = 0; q < CKK; ++q) kmT[q * Cout + c] = k_node->value[c * CKK + q];
        }
        if (k_node->requires_grad) k_node->ensure_grad();
        if (b_node && b_node->requires_grad) b_node->ensure_grad();

        for (std::size_t n = 0; n < N; ++n) {
          const T* dout = self.grad.data() + n * Cout * L;
          if (k_node->requires_grad) {
            detail::im2col(in_node->value.data() + n * C * H * W, C, H, W, KH, KW, stride, padding,
                           OH, OW, col.data());
            for (std::size_t q = 0; q < CKK; ++q)
              for (std::size_t l = 0; l < L; ++l) colT[l * CKK + q] = col[q * L + l];
            detail::mat_mul_accum(dout, colT.data(), k_node->grad.data(), Cout, L, CKK);
          }
          if (in_node->requires_grad) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            detail::mat_mul_accum(kmT.data(), dout, dcol.data(), CKK, Cout, L);
            detail::col2im_accum(dcol.data(), C, H, W, KH, KW, stride, padding, OH, OW,
                                 in_node->grad.data() + n * C * H * W);
          }
          if (b_node && b_node->requires_grad) {
            for (std::size_t c = 0; c < Cout; ++c) {
              T s = T(0);
              for (std::size_t l = 0; l < L; ++l) s += dout[c * L + l];
              b_node->grad[c] += s;
            }
          }
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1,
                 std::size_t padding = 0) {
  return conv2d(input, kernel, std::optional<Tensor<T>>{}, stride, padding);
}

// Mean negative log-likelihood of the given class per row. logits (n, k).
template <class T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  detail::check(logits.rank() == 2, "cross_entropy_rows: logits must be rank 2, got " +
                                        shape_str(logits.shape()));
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  detail::check(labels.size() == n, "cross_entropy_rows: " + std::to_string(labels.size()) +
                                        " labels for " + std::to_string(n) + " rows");
  std::vector<std::size_t> flat(n);
  for (std::size_t i = 0; i < n; ++i) {
    detail::check(labels[i] < k, "cross_entropy_rows: label " + std::to_string(labels[i]) +
                                     " out of range " + std::to_string(k));
    flat[i] = i * k + labels[i];
  }
  return neg(mean(take(log_softmax(logits, 1), flat)));
}

// y = x @ W^T + b for row-major batches. x (n, in), W (out, in), b (out).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  auto y = matmul(x, transpose2d(weight));
  return add(y, reshape(bias, {1, bias.size()}));
}

// Global mean over the two trailing spatial axes: (N, C, H, W) -> (N, C).
template <class T>
Tensor<T> global_mean_pool(const Tensor<T>& x) {
  detail::check(x.rank() == 4, "global_mean_pool: expected rank 4, got " + shape_str(x.shape()));
  return mean(x, {2, 3});
}

}  // namespace apn
