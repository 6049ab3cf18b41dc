#include "mhc/ssm.hpp"

#include <cmath>

#include "mhc/init.hpp"

namespace mhc {

namespace {
constexpr double kScanInitStd = 0.1;
constexpr double kDecayMin = 0.5;
constexpr double kDecayMax = 0.99;
}  // namespace

template <typename T>
SsmBlockParams<T> SsmBlockParams<T>::init(std::size_t d_model, std::size_t kernel, T dropout,
                                          Rng& rng) {
  MHC_CHECK(d_model >= 1, ConfigError, "ssm block: d_model must be >= 1");
  MHC_CHECK(kernel >= 1, ConfigError, "ssm block: conv kernel size must be >= 1");
  MHC_CHECK(dropout >= T{0} && dropout < T{1}, ConfigError, "ssm block: dropout must be in [0, 1)");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  SsmBlockParams p;
  p.norm.gain = parameter(Tensor<T>({d_model}, T{1}));
  p.norm.epsilon = static_cast<T>(kRmsNormEpsilon);
  p.in_proj_weight = parameter(init::uniform<T>({d_model, 2 * d_model}, bound, rng));
  p.in_proj_bias = parameter(init::uniform<T>({2 * d_model}, bound, rng));
  p.conv_kernel =
      parameter(init::uniform<T>({d_model, kernel}, 1.0 / std::sqrt(static_cast<double>(kernel)), rng));

  Tensor<T> a_logits({d_model});
  for (std::size_t c = 0; c < d_model; ++c) {
    const double frac = d_model == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(d_model - 1);
    const double a = kDecayMin + (kDecayMax - kDecayMin) * frac;
    a_logits[c] = static_cast<T>(std::log(a / (1.0 - a)));
  }
  p.a_logits = parameter(std::move(a_logits));
  p.b = parameter(init::normal<T>({d_model}, kScanInitStd, rng));
  p.c = parameter(init::normal<T>({d_model}, kScanInitStd, rng));
  p.d = parameter(Tensor<T>({d_model}, T{1}));
  p.out_proj_weight = parameter(init::uniform<T>({d_model, d_model}, bound, rng));
  p.out_proj_bias = parameter(init::uniform<T>({d_model}, bound, rng));
  p.dropout_rate = dropout;
  return p;
}

template <typename T>
void SsmBlockParams<T>::visit(const std::function<void(const std::string&, Var<T>&)>& fn) {
  fn("norm.gain", norm.gain);
  fn("in_proj.weight", in_proj_weight);
  fn("in_proj.bias", in_proj_bias);
  fn("conv.weight", conv_kernel);
  fn("a_logits", a_logits);
  fn("b", b);
  fn("c", c);
  fn("d", d);
  fn("out_proj.weight", out_proj_weight);
  fn("out_proj.bias", out_proj_bias);
}

template <typename T>
std::pair<Var<T>, Var<T>> gated_projection(const Var<T>& h_norm, const SsmBlockParams<T>& p) {
  const std::size_t D = p.d_model();
  Var<T> both = ops::linear(h_norm, p.in_proj_weight, p.in_proj_bias);
  return {ops::split_last(both, 0, D), ops::split_last(both, D, D)};
}

template <typename T>
Var<T> decay_coefficients(const Var<T>& a_logits) {
  const T margin = static_cast<T>(kDecayClampMargin);
  return ops::clamp(ops::sigmoid(a_logits), margin, T{1} - margin);
}

template <typename T>
Var<T> ssm_block_forward(const Var<T>& h, const SsmBlockParams<T>& p, bool training, Rng& rng) {
  MHC_CHECK(h.shape().size() == 3 && h.shape()[2] == p.d_model(), ShapeError,
            "ssm block: expected [B, T, " + std::to_string(p.d_model()) + "], got " +
                shape_str(h.shape()));
  Var<T> h_norm = rms_norm(h, p.norm);
  auto [u, g] = gated_projection(h_norm, p);
  Var<T> u_act = ops::silu(causal_depthwise_conv(u, p.conv_kernel));
  Var<T> z = diagonal_scan(u_act, decay_coefficients(p.a_logits), p.b, p.c, p.d);
  Var<T> gated = ops::mul(z, ops::sigmoid(g));
  Var<T> out = ops::linear(gated, p.out_proj_weight, p.out_proj_bias);
  return ops::dropout(out, p.dropout_rate, rng, training);
}

template struct SsmBlockParams<float>;
template struct SsmBlockParams<double>;
template std::pair<Var<float>, Var<float>> gated_projection(const Var<float>&,
                                                            const SsmBlockParams<float>&);
template std::pair<Var<double>, Var<double>> gated_projection(const Var<double>&,
                                                              const SsmBlockParams<double>&);
template Var<float> decay_coefficients(const Var<float>&);
template Var<double> decay_coefficients(const Var<double>&);
template Var<float> ssm_block_forward(const Var<float>&, const SsmBlockParams<float>&, bool, Rng&);
template Var<double> ssm_block_forward(const Var<double>&, const SsmBlockParams<double>&, bool,
                                       Rng&);

}  // namespace mhc
