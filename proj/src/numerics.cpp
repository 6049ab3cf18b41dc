#include "mhc/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mhc {

template <typename T>
DoublyStochasticMatrix<T> sinkhorn_project(const Var<T>& logits, int iterations) {
  MHC_CHECK(logits.shape().size() == 2 && logits.shape()[0] == logits.shape()[1] &&
                logits.shape()[0] >= 1,
            ShapeError, "sinkhorn_project: expected [n, n] logits, got " + shape_str(logits.shape()));
  MHC_CHECK(iterations >= 1, ConfigError, "sinkhorn_project: iterations must be >= 1");
  const auto values = logits.value().data();
  MHC_CHECK(std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); }),
            NumericError, "sinkhorn_project: non-finite logits");

  // The shift is a constant: every normalization is invariant to a global
  // scale, so subtracting the max changes nothing but overflow behavior.
  const T peak = *std::max_element(values.begin(), values.end());
  Var<T> shift(Tensor<T>(logits.shape(), peak));
  Var<T> h = ops::exp(ops::sub(logits, shift));
  for (int it = 0; it < iterations; ++it) {
    h = ops::normalize_rows(h);
    h = ops::normalize_cols(h);
  }
  const auto [row, col] = stochastic_residuals(h.value());
  return {h, row, col};
}

template <typename T>
SimplexWeights<T> simplex_weights(const Var<T>& logits) {
  MHC_CHECK(logits.shape().size() == 1 && logits.size() >= 1, ShapeError,
            "simplex_weights: expected [n] logits, got " + shape_str(logits.shape()));
  for (T v : logits.value().data()) {
    MHC_CHECK(std::isfinite(v), NumericError, "simplex_weights: non-finite logits");
  }
  return {logits, ops::softmax(logits)};
}

template <typename T>
std::pair<T, T> stochastic_residuals(const Tensor<T>& h) {
  const std::size_t n = h.dim(0);
  T row{0}, col{0};
  for (std::size_t i = 0; i < n; ++i) {
    T rs{0}, cs{0};
    for (std::size_t j = 0; j < n; ++j) {
      rs += h.at(i, j);
      cs += h.at(j, i);
    }
    row = std::max(row, std::abs(rs - T{1}));
    col = std::max(col, std::abs(cs - T{1}));
  }
  return {row, col};
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  MHC_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ShapeError,
            "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t k = 0; k < a.dim(1); ++k) {
      for (std::size_t j = 0; j < b.dim(1); ++j) out.at(i, j) += a.at(i, k) * b.at(k, j);
    }
  }
  return out;
}

template <typename T>
double spectral_norm_estimate(const Tensor<T>& h, int iters) {
  MHC_CHECK(h.rank() == 2, ShapeError, "spectral_norm_estimate: expected a matrix");
  MHC_CHECK(iters >= 1, ConfigError, "spectral_norm_estimate: iters must be >= 1");
  const std::size_t rows = h.dim(0), cols = h.dim(1);
  for (T v : h.data()) {
    MHC_CHECK(std::isfinite(v), NumericError, "spectral_norm_estimate: non-finite entry");
  }
  // Deterministic, non-symmetric start so it is not orthogonal to the
  // leading singular vector of the matrices we care about.
  std::vector<double> v(cols), hv(rows), w(cols);
  for (std::size_t j = 0; j < cols; ++j) v[j] = 1.0 + 1.0 / static_cast<double>(j + 2);
  auto normalize = [](std::vector<double>& x) {
    const double norm = std::sqrt(std::inner_product(x.begin(), x.end(), x.begin(), 0.0));
    if (norm > 0.0) {
      for (auto& e : x) e /= norm;
    }
    return norm;
  };
  normalize(v);
  double best = 0.0;
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < rows; ++i) {
      hv[i] = 0.0;
      for (std::size_t j = 0; j < cols; ++j) hv[i] += static_cast<double>(h.at(i, j)) * v[j];
    }
    const double sigma =
        std::sqrt(std::inner_product(hv.begin(), hv.end(), hv.begin(), 0.0));
    best = std::max(best, sigma);
    if (sigma == 0.0) break;
    for (std::size_t j = 0; j < cols; ++j) {
      w[j] = 0.0;
      for (std::size_t i = 0; i < rows; ++i) w[j] += static_cast<double>(h.at(i, j)) * hv[i];
    }
    if (normalize(w) == 0.0) break;
    v.swap(w);
  }
  return best;
}

double finite_difference_check(const std::function<Var<double>(const Var<double>&)>& f,
                               const Tensor<double>& point, double step) {
  MHC_CHECK(step > 0.0, ConfigError, "finite_difference_check: step must be positive");
  Var<double> x = parameter(point);
  Var<double> y = f(x);
  MHC_CHECK(y.size() == 1, ShapeError, "finite_difference_check: f must return a scalar");
  MHC_CHECK(std::isfinite(y.item()), NumericError, "finite_difference_check: non-finite f");
  y.backward();
  const Tensor<double> analytic = x.has_grad() ? x.grad() : Tensor<double>(point.shape());

  NoGradGuard no_grad;
  Tensor<double> probe = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = f(Var<double>(probe)).item();
    probe[i] = point[i] - step;
    const double down = f(Var<double>(probe)).item();
    probe[i] = point[i];
    MHC_CHECK(std::isfinite(up) && std::isfinite(down), NumericError,
              "finite_difference_check: non-finite f at perturbed point");
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

GradCheckReport check_parameter_gradients(const std::function<Var<double>()>& loss,
                                          std::vector<NamedParameter> params,
                                          std::size_t per_param, double step,
                                          std::uint64_t seed) {
  for (auto& p : params) p.var.zero_grad();
  Var<double> y = loss();
  MHC_CHECK(std::isfinite(y.item()), NumericError, "check_parameter_gradients: non-finite loss");
  y.backward();

  Rng rng(seed);
  GradCheckReport report;
  NoGradGuard no_grad;
  for (auto& p : params) {
    const Tensor<double> analytic = p.var.has_grad() ? p.var.grad() : Tensor<double>(p.var.shape());
    std::vector<std::size_t> coords(p.var.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(per_param, coords.size()));
    auto& value = p.var.mutable_value();
    for (std::size_t i : coords) {
      const double saved = value[i];
      value[i] = saved + step;
      const double up = loss().item();
      value[i] = saved - step;
      const double down = loss().item();
      value[i] = saved;
      MHC_CHECK(std::isfinite(up) && std::isfinite(down), NumericError,
                "check_parameter_gradients: non-finite loss at perturbed point");
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++report.coordinates;
      if (report.worst.empty() || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

template DoublyStochasticMatrix<float> sinkhorn_project(const Var<float>&, int);
template DoublyStochasticMatrix<double> sinkhorn_project(const Var<double>&, int);
template SimplexWeights<float> simplex_weights(const Var<float>&);
template SimplexWeights<double> simplex_weights(const Var<double>&);
template std::pair<float, float> stochastic_residuals(const Tensor<float>&);
template std::pair<double, double> stochastic_residuals(const Tensor<double>&);
template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&);
template double spectral_norm_estimate(const Tensor<float>&, int);
template double spectral_norm_estimate(const Tensor<double>&, int);

}  // namespace mhc
