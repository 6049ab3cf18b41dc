#pragma once

#include <functional>
#include <string>
#include <utility>

#include "mhc/numerics.hpp"

namespace mhc {

/// Margin keeping the decay coefficients strictly inside (0, 1).
inline constexpr double kDecayClampMargin = 1e-4;
inline constexpr std::size_t kDefaultConvKernel = 4;

template <typename T>
struct SsmBlockParams {
  RmsNormParams<T> norm;
  Var<T> in_proj_weight;   // [D, 2D]
  Var<T> in_proj_bias;     // [2D]
  Var<T> conv_kernel;      // [D, k], depthwise
  Var<T> a_logits;         // [D]; a = clamp(sigmoid(a_logits))
  Var<T> b;                // [D]
  Var<T> c;                // [D]
  Var<T> d;                // [D]
  Var<T> out_proj_weight;  // [D, D]
  Var<T> out_proj_bias;    // [D]
  T dropout_rate{0};

  /// Decay rates spread evenly over [0.5, 0.99], b and c small Gaussian,
  /// d = 1, projections uniform in +-1/sqrt(D), unit norm gain.
  static SsmBlockParams init(std::size_t d_model, std::size_t kernel, T dropout, Rng& rng);

  std::size_t d_model() const { return d.size(); }
  std::size_t kernel_size() const { return conv_kernel.shape()[1]; }

  /// Visits every parameter with its local name, in a fixed order.
  void visit(const std::function<void(const std::string&, Var<T>&)>& fn);
};

/// One affine map to 2D channels, split into (u, g).
template <typename T>
std::pair<Var<T>, Var<T>> gated_projection(const Var<T>& h_norm, const SsmBlockParams<T>& p);

template <typename T>
Var<T> causal_depthwise_conv(const Var<T>& u, const Var<T>& kernel) {
  return ops::causal_depthwise_conv(u, kernel);
}

/// clamp(sigmoid(a_logits), margin, 1 - margin).
template <typename T>
Var<T> decay_coefficients(const Var<T>& a_logits);

template <typename T>
Var<T> diagonal_scan(const Var<T>& u, const Var<T>& a, const Var<T>& b, const Var<T>& c,
                     const Var<T>& d) {
  return ops::diagonal_scan(u, a, b, c, d);
}

/// norm -> gated projection -> causal conv -> SiLU -> diagonal scan ->
/// sigmoid gate -> output projection -> dropout (training only).
template <typename T>
Var<T> ssm_block_forward(const Var<T>& h, const SsmBlockParams<T>& p, bool training, Rng& rng);

}  // namespace mhc
