#include "mhc/adapters.hpp"

#include <cmath>

#include "mhc/init.hpp"

namespace mhc {

template <typename T>
AdapterParams<T> AdapterParams<T>::init(std::size_t d_model, std::size_t rank, std::size_t n,
                                        T dropout, Rng& rng) {
  MHC_CHECK(rank >= 1, ConfigError, "adapter: rank must be >= 1");
  MHC_CHECK(n >= 1, ConfigError, "adapter: stream count must be >= 1");
  MHC_CHECK(dropout >= T{0} && dropout < T{1}, ConfigError, "adapter: dropout must be in [0, 1)");
  AdapterParams p;
  p.norm.gain = parameter(Tensor<T>({d_model}, T{1}));
  p.norm.epsilon = static_cast<T>(kRmsNormEpsilon);
  p.w_down = parameter(init::uniform<T>({d_model, rank}, 1.0 / std::sqrt(static_cast<double>(d_model)), rng));
  p.w_up = parameter(Tensor<T>({rank, d_model}));
  p.gamma = parameter(Tensor<T>({n, rank}, T{1}));
  p.dropout_rate = dropout;
  return p;
}

template <typename T>
void AdapterParams<T>::visit(const std::function<void(const std::string&, Var<T>&)>& fn) {
  fn("norm.gain", norm.gain);
  fn("w_down", w_down);
  fn("w_up", w_up);
  fn("gamma", gamma);
}

template <typename T>
StreamState<T> pre_adapter(const StreamState<T>& x, const AdapterParams<T>& p, bool training,
                           Rng& rng) {
  MHC_CHECK(x.x.shape().size() == 4 && x.streams() == p.streams(), ShapeError,
            "pre_adapter: gamma has " + std::to_string(p.streams()) + " rows for " +
                shape_str(x.x.shape()));
  Var<T> bottleneck = ops::silu(ops::linear(rms_norm(x.x, p.norm), p.w_down, Var<T>{}));
  Var<T> up = ops::linear(ops::stream_scale(bottleneck, p.gamma), p.w_up, Var<T>{});
  return {ops::add(x.x, ops::dropout(up, p.dropout_rate, rng, training))};
}

template <typename T>
Var<T> post_adapter(const Var<T>& y, const AdapterParams<T>& p, bool training, Rng& rng) {
  MHC_CHECK(y.shape().size() == 3, ShapeError, "post_adapter: expected [B, T, D], got " + shape_str(y.shape()));
  Var<T> bottleneck = ops::silu(ops::linear(rms_norm(y, p.norm), p.w_down, Var<T>{}));
  Var<T> up = ops::linear(ops::stream_broadcast_scale(bottleneck, p.gamma), p.w_up, Var<T>{});
  return ops::stream_broadcast_add(y, ops::dropout(up, p.dropout_rate, rng, training));
}

template struct AdapterParams<float>;
template struct AdapterParams<double>;
template StreamState<float> pre_adapter(const StreamState<float>&, const AdapterParams<float>&, bool, Rng&);
template StreamState<double> pre_adapter(const StreamState<double>&, const AdapterParams<double>&, bool, Rng&);
template Var<float> post_adapter(const Var<float>&, const AdapterParams<float>&, bool, Rng&);
template Var<double> post_adapter(const Var<double>&, const AdapterParams<double>&, bool, Rng&);

}  // namespace mhc
