#include <gtest/gtest.h>

#include <cmath>

#include "mhc/streams.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace mhc {
namespace {

using testing::flat;
using testing::random_tensor;

SimplexWeights<double> weights(std::vector<double> w) {
  Var<double> v(Tensor<double>({w.size()}, std::span<const double>(w)));
  return {v, v};
}

DoublyStochasticMatrix<double> fixed_mix(Tensor<double> h) {
  auto [r, c] = stochastic_residuals(h);
  return {Var<double>(std::move(h)), r, c};
}

Tensor<double> slice(const Tensor<double>& x, std::size_t stream) {
  const auto& s = x.shape();
  const std::size_t n = s[2], D = s[3], rows = s[0] * s[1];
  Tensor<double> out({s[0], s[1], D});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = x[(r * n + stream) * D + d];
  return out;
}

TEST(Expand, ReplicateInitCopiesInput) {
  Rng rng(1);
  auto p = ExpanderParams<double>::replicate(5, 3, 0.0, rng);
  auto h = random_tensor({2, 4, 5}, rng);
  auto x = expand(Var<double>(h), p, 3);
  ASSERT_EQ(x.x.shape(), (Shape{2, 4, 3, 5}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(slice(x.x.value(), i).identical(h));
}

TEST(Expand, ZeroWeightsGiveZeroStreams) {
  Rng rng(2);
  ExpanderParams<double> p{Var<double>(Tensor<double>({4, 8})), Var<double>(Tensor<double>({8}))};
  auto x = expand(Var<double>(random_tensor({1, 3, 4}, rng)), p, 2);
  for (double v : x.x.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Expand, RandomWeightsMatchBlockMatmul) {
  Rng rng(3);
  const std::size_t D = 4, n = 3;
  ExpanderParams<double> p{Var<double>(random_tensor({D, n * D}, rng)), Var<double>(Tensor<double>({n * D}))};
  auto h = random_tensor({2, 3, D}, rng);
  auto x = expand(Var<double>(h), p, n).x.value();
  auto ref = oracle::matmul(flat(h), flat(p.weight.value()), 6, D, n * D);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(x[i], ref[i], 1e-12);
}

TEST(Expand, InitNoiseIsSmall) {
  Rng rng(4);
  auto p = ExpanderParams<double>::replicate(16, 4, kExpanderInitNoise, rng);
  double max_dev = 0;
  for (std::size_t k = 0; k < 16; ++k)
    for (std::size_t j = 0; j < 64; ++j) {
      const double ideal = (j % 16 == k) ? 1.0 : 0.0;
      max_dev = std::max(max_dev, std::abs(p.weight.value().at(k, j) - ideal));
    }
  EXPECT_GT(max_dev, 0.0);
  EXPECT_LT(max_dev, 6 * kExpanderInitNoise);
}

TEST(Expand, WrongWeightShapeThrows) {
  Rng rng(5);
  auto p = ExpanderParams<double>::replicate(4, 2, 0.0, rng);
  EXPECT_THROW(expand(Var<double>(Tensor<double>({1, 1, 4})), p, 3), ShapeError);
}

TEST(PreMix, Examples) {
  Rng rng(6);
  StreamState<double> x{Var<double>(random_tensor({2, 3, 4, 5}, rng))};
  EXPECT_TRUE(pre_mix(x, weights({0, 0, 1, 0})).value().identical(slice(x.x.value(), 2)));

  auto h = random_tensor({2, 3, 5}, rng);
  Tensor<double> same({2, 3, 2, 5});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t d = 0; d < 5; ++d) same[(r * 2 + i) * 5 + d] = h[r * 5 + d];
  EXPECT_LE(testing::max_abs_diff(pre_mix(StreamState<double>{Var<double>(same)}, weights({0.3, 0.7})).value(), h),
            1e-15);

  Tensor<double> two({1, 2, 2, 3});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t d = 0; d < 3; ++d) two[(r * 2) * 3 + d] = 1.0;
  for (double v : flat(pre_mix(StreamState<double>{Var<double>(two)}, weights({0.25, 0.75})).value()))
    EXPECT_EQ(v, 0.25);
  EXPECT_THROW(pre_mix(StreamState<double>{Var<double>(two)}, weights({1, 0, 0})), ShapeError);
}

TEST(Scatter, Examples) {
  Rng rng(7);
  auto y = random_tensor({2, 3, 4}, rng);
  auto uniform = scatter(Var<double>(y), weights({0.25, 0.25, 0.25, 0.25})).x.value();
  for (std::size_t i = 0; i < 4; ++i) {
    auto s = slice(uniform, i);
    for (std::size_t k = 0; k < y.size(); ++k) EXPECT_DOUBLE_EQ(s[k], y[k] / 4);
  }
  auto ys = random_tensor({2, 3, 3, 4}, rng);
  auto one_hot = scatter_streams(Var<double>(ys), weights({0, 1, 0})).x.value();
  EXPECT_TRUE(slice(one_hot, 1).identical(slice(ys, 1)));
  for (double v : flat(slice(one_hot, 0))) EXPECT_EQ(v, 0.0);

  auto ones = scatter(Var<double>(Tensor<double>({1, 2, 3}, 1.0)), weights({0.25, 0.75})).x.value();
  for (double v : flat(slice(ones, 0))) EXPECT_EQ(v, 0.25);
  for (double v : flat(slice(ones, 1))) EXPECT_EQ(v, 0.75);
}

TEST(ResidualMix, Examples) {
  Rng rng(8);
  const std::size_t n = 3;
  StreamState<double> x{Var<double>(random_tensor({2, 2, n, 4}, rng))};
  Tensor<double> eye({n, n});
  for (std::size_t i = 0; i < n; ++i) eye.at(i, i) = 1.0;
  EXPECT_TRUE(residual_mix(x, fixed_mix(eye)).x.value().identical(x.x.value()));

  auto mean = residual_mix(x, fixed_mix(Tensor<double>({n, n}, 1.0 / n))).x.value();
  for (std::size_t i = 0; i < n; ++i) {
    auto s = slice(mean, i);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double m = (slice(x.x.value(), 0)[k] + slice(x.x.value(), 1)[k] + slice(x.x.value(), 2)[k]) / n;
      EXPECT_NEAR(s[k], m, 1e-15);
    }
  }

  const std::size_t perm[n] = {2, 0, 1};
  Tensor<double> p({n, n});
  for (std::size_t i = 0; i < n; ++i) p.at(i, perm[i]) = 1.0;
  auto permuted = residual_mix(x, fixed_mix(p)).x.value();
  for (std::size_t i = 0; i < n; ++i) EXPECT_TRUE(slice(permuted, i).identical(slice(x.x.value(), perm[i])));
}

TEST(ResidualMix, PreservesStreamMean) {
  Rng rng(9);
  for (std::size_t n = 2; n <= 8; ++n) {
    auto h = sinkhorn_project(Var<double>(random_tensor({n, n}, rng, -2, 2)), 20);
    StreamState<double> x{Var<double>(random_tensor({2, 3, n, 4}, rng))};
    auto out = residual_mix(x, h).x.value();
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t d = 0; d < 4; ++d) {
        double before = 0, after = 0;
        for (std::size_t i = 0; i < n; ++i) {
          before += x.x.value()[(r * n + i) * 4 + d];
          after += out[(r * n + i) * 4 + d];
        }
        EXPECT_NEAR(after / n, before / n, 1e-5);
      }
  }
}

TEST(ResidualMix, IsNonExpansiveAlongStreams) {
  Rng rng(10);
  for (std::size_t n = 2; n <= 8; ++n) {
    auto h = sinkhorn_project(Var<double>(random_tensor({n, n}, rng, -2, 2)), 20);
    StreamState<double> x{Var<double>(random_tensor({1, 4, n, 3}, rng, -3, 3))};
    auto out = residual_mix(x, h).x.value();
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t d = 0; d < 3; ++d) {
        double in2 = 0, out2 = 0;
        for (std::size_t i = 0; i < n; ++i) {
          in2 += std::pow(x.x.value()[(r * n + i) * 3 + d], 2);
          out2 += std::pow(out[(r * n + i) * 3 + d], 2);
        }
        EXPECT_LE(std::sqrt(out2), (1 + 1e-4) * std::sqrt(in2));
      }
  }
}

// Contrast diagnostic only: unconstrained mixing drifts, projected mixing
// keeps the stream mean.
TEST(ResidualMix, DeepCompositionKeepsMean) {
  Rng rng(11);
  const std::size_t n = 4, depth = 64;
  Tensor<double> x0 = random_tensor({1, 2, n, 3}, rng);
  StreamState<double> proj{Var<double>(x0)}, free{Var<double>(x0)};
  std::normal_distribution<double> gauss;
  for (std::size_t l = 0; l < depth; ++l) {
    proj = residual_mix(proj, sinkhorn_project(Var<double>(random_tensor({n, n}, rng, -2, 2)), 20));
    Tensor<double> m({n, n});
    for (auto& v : m.data()) v = gauss(rng);
    free = residual_mix(free, fixed_mix(m));
  }
  double drift = 0, free_norm = 0, start_norm = 0;
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t d = 0; d < 3; ++d) {
      double m0 = 0, m1 = 0;
      for (std::size_t i = 0; i < n; ++i) {
        m0 += x0[(r * n + i) * 3 + d];
        m1 += proj.x.value()[(r * n + i) * 3 + d];
        free_norm += std::pow(free.x.value()[(r * n + i) * 3 + d], 2);
        start_norm += std::pow(x0[(r * n + i) * 3 + d], 2);
      }
      drift = std::max(drift, std::abs(m1 - m0) / n);
    }
  EXPECT_LE(drift, 1e-3);
  const double log_ratio = std::abs(std::log(std::sqrt(free_norm / start_norm)));
  RecordProperty("unconstrained_log_norm_ratio", std::to_string(log_ratio));
}

TEST(LayerUpdate, Examples) {
  Rng rng(12);
  const std::size_t n = 2;
  StreamState<double> x{Var<double>(random_tensor({2, 3, n, 4}, rng))};
  StreamState<double> zero{Var<double>(Tensor<double>(x.x.shape()))};
  Tensor<double> eye({n, n}, {1, 0, 0, 1});
  EXPECT_TRUE(layer_update(x, zero, fixed_mix(eye)).x.value().identical(x.x.value()));

  StreamState<double> delta{Var<double>(random_tensor(x.x.shape(), rng))};
  auto h = sinkhorn_project(Var<double>(random_tensor({n, n}, rng)), 5);
  EXPECT_TRUE(layer_update(zero, delta, h).x.value().identical(delta.x.value()));
  auto composed = ops::add(residual_mix(x, h).x, delta.x).value();
  EXPECT_TRUE(layer_update(x, delta, h).x.value().identical(composed));
  StreamState<double> wrong{Var<double>(Tensor<double>({2, 3, n, 5}))};
  EXPECT_THROW(layer_update(x, wrong, h), ShapeError);
}

TEST(Aggregate, Examples) {
  Rng rng(13);
  StreamState<double> x{Var<double>(random_tensor({2, 2, 3, 4}, rng))};
  EXPECT_TRUE(aggregate(x, weights({0, 0, 1})).value().identical(slice(x.x.value(), 2)));
  auto w = weights({0.2, 0.5, 0.3});
  EXPECT_TRUE(aggregate(x, w).value().identical(pre_mix(x, w).value()));
}

TEST(StreamLayer, ZeroInitGivesUniformMaps) {
  auto p = StreamLayerParams<double>::init(4);
  for (double v : flat(simplex_weights(p.pre_logits).w.value())) EXPECT_EQ(v, 0.25);
  for (double v : flat(sinkhorn_project(p.res_logits, 5).h.value())) EXPECT_EQ(v, 0.25);
}

TEST(StreamLayer, GradientsReachAllLogits) {
  Rng rng(14);
  const std::size_t n = 3, D = 4;
  auto p = StreamLayerParams<double>::init(n);
  p.pre_logits.mutable_value() = random_tensor({n}, rng);
  p.post_logits.mutable_value() = random_tensor({n}, rng);
  p.res_logits.mutable_value() = random_tensor({n, n}, rng);
  StreamState<double> x{Var<double>(random_tensor({2, 3, n, D}, rng))};
  auto loss = [&] {
    auto u = pre_mix(x, simplex_weights(p.pre_logits));
    auto delta = scatter(ops::silu(u), simplex_weights(p.post_logits));
    return testing::probe(layer_update(x, delta, sinkhorn_project(p.res_logits, 5)).x);
  };
  std::vector<NamedParameter> named{{"pre", p.pre_logits}, {"post", p.post_logits}, {"res", p.res_logits}};
  auto report = check_parameter_gradients(loss, named, 100, 1e-6, 3);
  EXPECT_LE(report.max_rel_error, 1e-6) << report.worst;
  EXPECT_EQ(report.coordinates, 2 * n + n * n);
}

}  // namespace
}  // namespace mhc
