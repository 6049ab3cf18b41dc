#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "mhc/autograd.hpp"

namespace mhc {

using Rng = std::mt19937_64;
using TokenId = std::int32_t;

/// Rounds a float to the nearest IEEE binary16 value (ties to even),
/// overflowing to infinity. Used to emulate reduced-precision activations.
float round_to_half(float x);

/// Thread-local switch for emulated half-precision activations. When on,
/// linear-layer outputs and the gradients they send back are rounded to
/// binary16. Only affects float tensors.
class HalfPrecision {
 public:
  static bool enabled() noexcept;
  static void set(bool on) noexcept;
};

class HalfPrecisionGuard {
 public:
  explicit HalfPrecisionGuard(bool on) : prev_(HalfPrecision::enabled()) { HalfPrecision::set(on); }
  ~HalfPrecisionGuard() { HalfPrecision::set(prev_); }
  HalfPrecisionGuard(const HalfPrecisionGuard&) = delete;
  HalfPrecisionGuard& operator=(const HalfPrecisionGuard&) = delete;

 private:
  bool prev_;
};

namespace ops {

// Elementwise, same shape.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);

/// x + y where y's shape equals the trailing axes of x.
template <typename T> Var<T> add_broadcast(const Var<T>& x, const Var<T>& y);

/// First `count` rows of a [R, C] matrix.
template <typename T> Var<T> take_rows(const Var<T>& m, std::size_t count);

/// Row gather: out[b, t, :] = table[ids[b*T + t], :]. Shape {B, T, D}.
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const TokenId> ids, std::size_t batch,
                 std::size_t time);

/// x[..., in] @ w[in, out] (+ bias[out]). `bias` may be undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

/// x[..., in] @ w[out, in]^T. Used by the tied vocabulary head.
template <typename T> Var<T> linear_nt(const Var<T>& x, const Var<T>& w);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

/// x[..., start:start+len] along the trailing axis.
template <typename T> Var<T> split_last(const Var<T>& x, std::size_t start, std::size_t len);

/// x / sqrt(mean(x^2) + eps) * gain over the trailing axis.
template <typename T> Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps);

template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);

/// Clamp with zero gradient outside [lo, hi].
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);

/// Inverted dropout; identity when `!training` or `rate == 0`.
template <typename T> Var<T> dropout(const Var<T>& x, T rate, Rng& rng, bool training);

/// Depthwise causal convolution over time. u: [B, T, D], kernel: [D, k].
/// out[t] = sum_j kernel[:, j] * u[t - (k-1) + j], zeros before t = 0.
template <typename T> Var<T> causal_depthwise_conv(const Var<T>& u, const Var<T>& kernel);

/// Diagonal linear recurrence over time with s_0 = 0:
///   s_t = a * s_{t-1} + b * u_t,   z_t = c * s_t + d * u_t.
/// u: [B, T, D]; a, b, c, d: [D].
template <typename T>
Var<T> diagonal_scan(const Var<T>& u, const Var<T>& a, const Var<T>& b, const Var<T>& c,
                     const Var<T>& d);

/// Softmax over the trailing axis.
template <typename T> Var<T> softmax(const Var<T>& x);

/// Divide each row (resp. column) of a square matrix by its sum.
template <typename T> Var<T> normalize_rows(const Var<T>& m);
template <typename T> Var<T> normalize_cols(const Var<T>& m);

/// sum_i w[i] * x[..., i, :]. x: [..., n, D], w: [n] -> [..., D].
template <typename T> Var<T> stream_weighted_sum(const Var<T>& x, const Var<T>& w);

/// out[..., i, :] = w[i] * y[..., :]. y: [..., D] -> [..., n, D].
template <typename T> Var<T> stream_scatter(const Var<T>& y, const Var<T>& w);

/// out[..., i, :] = w[i] * y[..., i, :]. y: [..., n, D].
template <typename T> Var<T> stream_scatter_each(const Var<T>& y, const Var<T>& w);

/// out[..., i, :] = sum_j h[i, j] * x[..., j, :]. x: [..., n, D], h: [n, n].
template <typename T> Var<T> stream_mix(const Var<T>& x, const Var<T>& h);

/// out[..., i, :] = h[..., i, :] * gamma[i, :]. h: [..., n, r], gamma: [n, r].
template <typename T> Var<T> stream_scale(const Var<T>& h, const Var<T>& gamma);

/// out[..., i, :] = h[..., :] * gamma[i, :]. h: [..., r] -> [..., n, r].
template <typename T> Var<T> stream_broadcast_scale(const Var<T>& h, const Var<T>& gamma);

/// out[..., i, :] = y[..., :] + delta[..., i, :]. y: [..., D], delta: [..., n, D].
template <typename T> Var<T> stream_broadcast_add(const Var<T>& y, const Var<T>& delta);

/// Mean token cross-entropy. logits: [..., V]; one target per row.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const TokenId> targets);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> sum_squares(const Var<T>& x);

}  // namespace ops
}  // namespace mhc
