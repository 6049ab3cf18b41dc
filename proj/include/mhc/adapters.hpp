#pragma once

#include <functional>
#include <string>

#include "mhc/streams.hpp"

namespace mhc {

inline constexpr std::size_t kDefaultAdapterRank = 16;

/// Bottleneck shared across streams with a per-stream scaling row in the
/// bottleneck. No biases, so gamma = 0 or w_up = 0 makes it an identity.
template <typename T>
struct AdapterParams {
  RmsNormParams<T> norm;  // gain [D]
  Var<T> w_down;          // [D, r]
  Var<T> w_up;            // [r, D]
  Var<T> gamma;           // [n, r]
  T dropout_rate{0};

  /// w_down uniform in +-1/sqrt(D), w_up zero, gamma one, unit gain.
  static AdapterParams init(std::size_t d_model, std::size_t rank, std::size_t n, T dropout,
                            Rng& rng);
  std::size_t rank() const { return w_down.shape()[1]; }
  std::size_t streams() const { return gamma.shape()[0]; }
  void visit(const std::function<void(const std::string&, Var<T>&)>& fn);
};

/// X_i <- X_i + Drop(W_up(silu(W_down Norm(X_i)) * gamma_i)).
template <typename T>
StreamState<T> pre_adapter(const StreamState<T>& x, const AdapterParams<T>& p, bool training,
                           Rng& rng);

/// y_i = y + Drop(W_up(silu(W_down Norm(y)) * gamma_i)) -> [B, T, n, D].
/// Norm(y) and the down projection are computed once for all streams.
template <typename T>
Var<T> post_adapter(const Var<T>& y, const AdapterParams<T>& p, bool training, Rng& rng);

}  // namespace mhc
