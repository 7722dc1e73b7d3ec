#pragma once

#include <cstddef>
#include <string>
#include <vector>

// Independent reference implementations used to cross-check the library.
// Everything in here is deliberately written the slow, obvious way and must
// not call into the code paths it verifies.

namespace apn::oracle {

// Direct-summation 2-D convolution on raw buffers. input (N,C,H,W),
// kernel (Cout,C,KH,KW), optional bias. Returns row-major (N,Cout,OH,OW).
template <class T>
std::vector<T> reference_conv2d(const std::vector<T>& input, std::size_t N, std::size_t C,
                                std::size_t H, std::size_t W, const std::vector<T>& kernel,
                                std::size_t Cout, std::size_t KH, std::size_t KW,
                                const std::vector<T>& bias, std::size_t stride,
                                std::size_t padding, std::size_t& OH, std::size_t& OW) {
  OH = (H + 2 * padding - KH) / stride + 1;
  OW = (W + 2 * padding - KW) / stride + 1;
  std::vector<T> out(N * Cout * OH * OW, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          T acc = bias.empty() ? T(0) : bias[co];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < KH; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(padding);
                const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(padding);
                if (iy < 0 || iy >= std::ptrdiff_t(H) || ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                acc += input[((n * C + c) * H + std::size_t(iy)) * W + std::size_t(ix)] *
                       kernel[((co * C + c) * KH + ky) * KW + kx];
              }
          out[((n * Cout + co) * OH + oy) * OW + ox] = acc;
        }
  return out;
}

// Patch count for tiling an (h, w) image with q x q patches at the given
// overlap, straight from the tiling arithmetic.
inline std::size_t patch_count(std::size_t h, std::size_t w, std::size_t q, std::size_t overlap) {
  const std::size_t step = q - overlap;
  return ((h - q) / step + 1) * ((w - q) / step + 1);
}

// Prediction labels enumerated the direct way: walk (batch, row, col), and
// for every cell with a target `offset` rows below, record that target's
// position in the flattened (batch*h*w) pool.
inline std::vector<std::size_t> reference_cpc_labels(std::size_t batch, std::size_t h,
                                                     std::size_t w, std::size_t offset) {
  std::vector<std::size_t> labels;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t row = 0; row + offset < h; ++row)
      for (std::size_t col = 0; col < w; ++col)
        labels.push_back(b * h * w + (row + offset) * w + col);
  return labels;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Losses by naive exponent summation, no log-sum-exp. Only trustworthy at
// moderate score magnitudes, which is the point: an independent route.
inline double reference_nce(const std::vector<double>& positive_scores,
                            const std::vector<double>& negative_scores, bool include_positive) {
  double num = 0, den = 0;
  for (double s : positive_scores) num += std::exp(s);
  for (double s : negative_scores) den += std::exp(s);
  if (include_positive) den += num;
  return -std::log(num / den);
}

inline double reference_info_nce(double positive_score, const std::vector<double>& negative_scores,
                                 bool include_positive) {
  double den = 0;
  for (double s : negative_scores) den += std::exp(s);
  if (include_positive) den += std::exp(positive_score);
  return -std::log(std::exp(positive_score) / den);
}

// NT-Xent per the masked similarity-matrix recipe, row by row. z1, z2 are
// (n, c) row-major unit vectors.
inline double reference_nt_xent(const std::vector<double>& z1, const std::vector<double>& z2,
                                std::size_t n, std::size_t c, double temperature) {
  auto row = [&](std::size_t i) {
    const std::vector<double>& src = i < n ? z1 : z2;
    const std::size_t r = i < n ? i : i - n;
    return std::vector<double>(src.begin() + std::ptrdiff_t(r * c),
                               src.begin() + std::ptrdiff_t((r + 1) * c));
  };
  double loss = 0;
  for (std::size_t i = 0; i < 2 * n; ++i) {
    double neg = 0;
    for (std::size_t j = 0; j < 2 * n; ++j) {
      if (j == i) continue;
      neg += std::exp(dot(row(i), row(j)) / temperature);
    }
    const std::size_t partner = i < n ? i + n : i - n;
    const double pos = std::exp(dot(row(i), row(partner)) / temperature);
    loss += -std::log(pos / neg);
  }
  return loss / double(2 * n);
}

}  // namespace apn::oracle
