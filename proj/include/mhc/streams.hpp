#pragma once

#include <functional>
#include <string>

#include "mhc/numerics.hpp"

namespace mhc {

/// Multi-stream residual activation, shape [B, T, n, D].
template <typename T>
struct StreamState {
  Var<T> x;

  std::size_t streams() const { return x.shape().at(2); }
  std::size_t d_model() const { return x.shape().at(3); }
};

/// Static per-layer stream mappings: pre/post simplex logits and the
/// residual mixing logits projected by Sinkhorn on every forward pass.
template <typename T>
struct StreamLayerParams {
  Var<T> pre_logits;   // [n]
  Var<T> post_logits;  // [n]
  Var<T> res_logits;   // [n, n]

  /// All-zero logits: uniform pre/post weights, uniform mixing.
  static StreamLayerParams init(std::size_t n);
  void visit(const std::function<void(const std::string&, Var<T>&)>& fn);
};

template <typename T>
struct ExpanderParams {
  Var<T> weight;  // [D, n*D]
  Var<T> bias;    // [n*D]

  /// n stacked identities plus N(0, noise^2); zero bias.
  static ExpanderParams replicate(std::size_t d_model, std::size_t n, double noise, Rng& rng);
  void visit(const std::function<void(const std::string&, Var<T>&)>& fn);
};

inline constexpr double kExpanderInitNoise = 1e-3;

/// Affine map h[B,T,D] -> [B,T,n*D], viewed as [B,T,n,D].
template <typename T>
StreamState<T> expand(const Var<T>& h, const ExpanderParams<T>& p, std::size_t n);

/// u = sum_i w_i X_i.
template <typename T>
Var<T> pre_mix(const StreamState<T>& x, const SimplexWeights<T>& w_pre);

/// Delta X_i = w_i y for a single-stream y [B,T,D] broadcast over streams.
template <typename T>
StreamState<T> scatter(const Var<T>& y, const SimplexWeights<T>& w_post);

/// Delta X_i = w_i y_i for a per-stream y [B,T,n,D] (adapter output).
template <typename T>
StreamState<T> scatter_streams(const Var<T>& y_streams, const SimplexWeights<T>& w_post);

/// X_i <- sum_j H_ij X_j.
template <typename T>
StreamState<T> residual_mix(const StreamState<T>& x, const DoublyStochasticMatrix<T>& h);

/// X+ = residual_mix(X, H) + Delta X.
template <typename T>
StreamState<T> layer_update(const StreamState<T>& x, const StreamState<T>& delta,
                            const DoublyStochasticMatrix<T>& h);

/// h_out = sum_i w_i X_i; same kernel as pre_mix.
template <typename T>
Var<T> aggregate(const StreamState<T>& x, const SimplexWeights<T>& w_agg);

}  // namespace mhc
