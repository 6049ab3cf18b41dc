#pragma once

#include <cstddef>
#include <vector>

// Naive 64-bit reference loops on flat row-major arrays.
namespace mhc::oracle {

// u: [B, T, D], kernel: [D, k].
inline std::vector<double> causal_conv(const std::vector<double>& u, const std::vector<double>& kernel,
                                       std::size_t B, std::size_t T, std::size_t D, std::size_t k) {
  std::vector<double> out(B * T * D, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          const long src = static_cast<long>(t) - static_cast<long>(k - 1) + static_cast<long>(j);
          if (src < 0) continue;
          acc += kernel[d * k + j] * u[(b * T + static_cast<std::size_t>(src)) * D + d];
        }
        out[(b * T + t) * D + d] = acc;
      }
  return out;
}

// s_t = a s_{t-1} + b u_t, z_t = c s_t + d u_t, s_0 = 0.
inline std::vector<double> diagonal_scan(const std::vector<double>& u, const std::vector<double>& a,
                                         const std::vector<double>& bv, const std::vector<double>& c,
                                         const std::vector<double>& d, std::size_t B, std::size_t T,
                                         std::size_t D) {
  std::vector<double> out(B * T * D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ch = 0; ch < D; ++ch) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double x = u[(b * T + t) * D + ch];
        s = a[ch] * s + bv[ch] * x;
        out[(b * T + t) * D + ch] = c[ch] * s + d[ch] * x;
      }
    }
  return out;
}

// x: [rows, in], w: [in, out].
inline std::vector<double> matmul(const std::vector<double>& x, const std::vector<double>& w,
                                  std::size_t rows, std::size_t in, std::size_t out) {
  std::vector<double> y(rows * out, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t o = 0; o < out; ++o) y[r * out + o] += x[r * in + i] * w[i * out + o];
  return y;
}

}  // namespace mhc::oracle
