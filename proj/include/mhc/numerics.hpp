#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mhc/ops.hpp"

namespace mhc {

/// Output of the Sinkhorn projection. The residuals are the max deviations
/// of row and column sums from one, measured on `h` after the last
/// normalization.
template <typename T>
struct DoublyStochasticMatrix {
  Var<T> h;
  T row_residual{};
  T col_residual{};
};

template <typename T>
struct SimplexWeights {
  Var<T> logits;
  Var<T> w;
};

template <typename T>
struct RmsNormParams {
  Var<T> gain;
  T epsilon = T(1e-6);
};

inline constexpr double kRmsNormEpsilon = 1e-6;
inline constexpr int kDefaultSinkhornIterations = 5;

/// exp(z - max z), then `iterations` rounds of (row normalize, column
/// normalize). Differentiable through every round.
template <typename T>
DoublyStochasticMatrix<T> sinkhorn_project(const Var<T>& logits, int iterations);

/// softmax(logits); nonnegative and sums to one.
template <typename T>
SimplexWeights<T> simplex_weights(const Var<T>& logits);

template <typename T>
Var<T> rms_norm(const Var<T>& x, const RmsNormParams<T>& p) {
  return ops::rms_norm(x, p.gain, p.epsilon);
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return ops::silu(x);
}

/// Max |row_sum - 1| and max |col_sum - 1| of a square matrix.
template <typename T>
std::pair<T, T> stochastic_residuals(const Tensor<T>& h);

/// Dense product of two [n, n] matrices (diagnostics; not differentiable).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Power-iteration lower bound on the largest singular value. The returned
/// value is the running maximum of ||H v|| over unit iterates, so it never
/// decreases with more iterations. Zero matrix gives 0.
template <typename T>
double spectral_norm_estimate(const Tensor<T>& h, int iters);

/// Central-difference gradient check of a scalar function at `point`.
/// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
double finite_difference_check(const std::function<Var<double>(const Var<double>&)>& f,
                               const Tensor<double>& point, double step);

struct NamedParameter {
  std::string name;
  Var<double> var;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "name[index]" of the worst coordinate
};

/// Same check against parameters already wired into `loss`: up to
/// `per_param` coordinates of each parameter, chosen with `seed`, are
/// perturbed in place and restored.
GradCheckReport check_parameter_gradients(const std::function<Var<double>()>& loss,
                                          std::vector<NamedParameter> params,
                                          std::size_t per_param, double step,
                                          std::uint64_t seed);

}  // namespace mhc
