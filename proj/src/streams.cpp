#include "mhc/streams.hpp"

#include "mhc/init.hpp"

namespace mhc {

template <typename T>
StreamLayerParams<T> StreamLayerParams<T>::init(std::size_t n) {
  MHC_CHECK(n >= 1, ConfigError, "stream layer: n must be >= 1");
  return {parameter(Tensor<T>({n})), parameter(Tensor<T>({n})), parameter(Tensor<T>({n, n}))};
}

template <typename T>
void StreamLayerParams<T>::visit(const std::function<void(const std::string&, Var<T>&)>& fn) {
  fn("pre_logits", pre_logits);
  fn("post_logits", post_logits);
  fn("res_logits", res_logits);
}

template <typename T>
ExpanderParams<T> ExpanderParams<T>::replicate(std::size_t d_model, std::size_t n, double noise,
                                               Rng& rng) {
  MHC_CHECK(n >= 1 && d_model >= 1, ConfigError, "expander: n and d_model must be >= 1");
  Tensor<T> w = noise > 0.0 ? init::normal<T>({d_model, n * d_model}, noise, rng)
                            : Tensor<T>({d_model, n * d_model});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d_model; ++k) w.at(k, i * d_model + k) += T{1};
  }
  return {parameter(std::move(w)), parameter(Tensor<T>({n * d_model}))};
}

template <typename T>
void ExpanderParams<T>::visit(const std::function<void(const std::string&, Var<T>&)>& fn) {
  fn("weight", weight);
  fn("bias", bias);
}

template <typename T>
StreamState<T> expand(const Var<T>& h, const ExpanderParams<T>& p, std::size_t n) {
  MHC_CHECK(h.shape().size() == 3, ShapeError, "expand: expected [B, T, D], got " + shape_str(h.shape()));
  const std::size_t D = h.shape()[2];
  MHC_CHECK(p.weight.shape() == Shape({D, n * D}), ShapeError,
            "expand: weight " + shape_str(p.weight.shape()) + " for D = " + std::to_string(D) +
                ", n = " + std::to_string(n));
  Var<T> flat = ops::linear(h, p.weight, p.bias);
  return {ops::reshape(flat, {h.shape()[0], h.shape()[1], n, D})};
}

template <typename T>
Var<T> pre_mix(const StreamState<T>& x, const SimplexWeights<T>& w_pre) {
  return ops::stream_weighted_sum(x.x, w_pre.w);
}

template <typename T>
StreamState<T> scatter(const Var<T>& y, const SimplexWeights<T>& w_post) {
  return {ops::stream_scatter(y, w_post.w)};
}

template <typename T>
StreamState<T> scatter_streams(const Var<T>& y_streams, const SimplexWeights<T>& w_post) {
  return {ops::stream_scatter_each(y_streams, w_post.w)};
}

template <typename T>
StreamState<T> residual_mix(const StreamState<T>& x, const DoublyStochasticMatrix<T>& h) {
  return {ops::stream_mix(x.x, h.h)};
}

template <typename T>
StreamState<T> layer_update(const StreamState<T>& x, const StreamState<T>& delta,
                            const DoublyStochasticMatrix<T>& h) {
  MHC_CHECK(x.x.shape() == delta.x.shape(), ShapeError,
            "layer_update: " + shape_str(x.x.shape()) + " vs " + shape_str(delta.x.shape()));
  return {ops::add(residual_mix(x, h).x, delta.x)};
}

template <typename T>
Var<T> aggregate(const StreamState<T>& x, const SimplexWeights<T>& w_agg) {
  return ops::stream_weighted_sum(x.x, w_agg.w);
}

#define MHC_INSTANTIATE_STREAMS(T)                                                          \
  template struct StreamLayerParams<T>;                                                     \
  template struct ExpanderParams<T>;                                                        \
  template StreamState<T> expand(const Var<T>&, const ExpanderParams<T>&, std::size_t);     \
  template Var<T> pre_mix(const StreamState<T>&, const SimplexWeights<T>&);                 \
  template StreamState<T> scatter(const Var<T>&, const SimplexWeights<T>&);                 \
  template StreamState<T> scatter_streams(const Var<T>&, const SimplexWeights<T>&);         \
  template StreamState<T> residual_mix(const StreamState<T>&, const DoublyStochasticMatrix<T>&); \
  template StreamState<T> layer_update(const StreamState<T>&, const StreamState<T>&,        \
                                       const DoublyStochasticMatrix<T>&);                   \
  template Var<T> aggregate(const StreamState<T>&, const SimplexWeights<T>&);

MHC_INSTANTIATE_STREAMS(float)
MHC_INSTANTIATE_STREAMS(double)

#undef MHC_INSTANTIATE_STREAMS

}  // namespace mhc
