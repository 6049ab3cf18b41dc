#include <gtest/gtest.h>

#include <cmath>

#include "mhc/ssm.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace mhc {
namespace {

using testing::flat;
using testing::random_tensor;

std::vector<NamedParameter> named(SsmBlockParams<double>& p) {
  std::vector<NamedParameter> out;
  p.visit([&](const std::string& n, Var<double>& v) { out.push_back({n, v}); });
  return out;
}

TEST(GatedProjection, ZeroWeightsGiveZeros) {
  Rng rng(1);
  auto p = SsmBlockParams<double>::init(4, 3, 0.0, rng);
  p.in_proj_weight.mutable_value().fill(0.0);
  p.in_proj_bias.mutable_value().fill(0.0);
  auto [u, g] = gated_projection(Var<double>(random_tensor({2, 3, 4}, rng)), p);
  for (double v : u.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : g.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(GatedProjection, StackedIdentityCopiesInput) {
  Rng rng(2);
  auto p = SsmBlockParams<double>::init(4, 3, 0.0, rng);
  auto& w = p.in_proj_weight.mutable_value();
  w.fill(0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    w.at(i, i) = 1.0;
    w.at(i, 4 + i) = 1.0;
  }
  p.in_proj_bias.mutable_value().fill(0.0);
  auto x = random_tensor({2, 3, 4}, rng);
  auto [u, g] = gated_projection(Var<double>(x), p);
  EXPECT_TRUE(u.value().identical(x));
  EXPECT_TRUE(g.value().identical(x));
}

TEST(GatedProjection, MatchesMatmulOracle) {
  Rng rng(3);
  auto p = SsmBlockParams<double>::init(5, 3, 0.0, rng);
  auto x = random_tensor({2, 3, 5}, rng);
  auto [u, g] = gated_projection(Var<double>(x), p);
  auto ref = oracle::matmul(flat(x), flat(p.in_proj_weight.value()), 6, 5, 10);
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t o = 0; o < 5; ++o) {
      EXPECT_NEAR(u.value()[r * 5 + o], ref[r * 10 + o] + p.in_proj_bias.value()[o], 1e-12);
      EXPECT_NEAR(g.value()[r * 5 + o], ref[r * 10 + 5 + o] + p.in_proj_bias.value()[5 + o], 1e-12);
    }
  }
}

TEST(CausalConv, UnitTapIsIdentity) {
  Rng rng(4);
  Tensor<double> kernel({3, 4});
  for (std::size_t d = 0; d < 3; ++d) kernel.at(d, 3) = 1.0;
  auto u = random_tensor({2, 5, 3}, rng);
  EXPECT_TRUE(causal_depthwise_conv(Var<double>(u), Var<double>(kernel)).value().identical(u));
}

TEST(CausalConv, OnesKernelExample) {
  Tensor<double> u({1, 4, 1}, 1.0);
  Tensor<double> kernel({1, 3}, 1.0);
  auto out = causal_depthwise_conv(Var<double>(u), Var<double>(kernel)).value();
  EXPECT_EQ(flat(out), (std::vector<double>{1, 2, 3, 3}));
}

TEST(CausalConv, MatchesOracleAndIsCausal) {
  Rng rng(5);
  const std::size_t B = 2, T = 9, D = 3, k = 4;
  auto u = random_tensor({B, T, D}, rng);
  auto kernel = random_tensor({D, k}, rng);
  auto out = causal_depthwise_conv(Var<double>(u), Var<double>(kernel)).value();
  auto ref = oracle::causal_conv(flat(u), flat(kernel), B, T, D, k);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);

  for (std::size_t t = 0; t < T; ++t) {
    auto bumped = u;
    bumped[(1 * T + t) * D + 2] += 5.0;
    auto out2 = causal_depthwise_conv(Var<double>(bumped), Var<double>(kernel)).value();
    for (std::size_t s = 0; s < T; ++s) {
      const bool same = out2[(1 * T + s) * D + 2] == out[(1 * T + s) * D + 2];
      if (s < t) EXPECT_TRUE(same);
    }
  }
}

TEST(CausalConv, KernelLongerThanSequence) {
  Rng rng(6);
  auto u = random_tensor({1, 2, 2}, rng);
  auto kernel = random_tensor({2, 5}, rng);
  auto out = causal_depthwise_conv(Var<double>(u), Var<double>(kernel)).value();
  auto ref = oracle::causal_conv(flat(u), flat(kernel), 1, 2, 2, 5);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(CausalConv, RejectsEmptyKernel) {
  EXPECT_THROW(causal_depthwise_conv(Var<double>(Tensor<double>({1, 2, 2})), Var<double>(Tensor<double>({2, 0}))),
               ConfigError);
}

TEST(DiagonalScan, GeometricDecay) {
  Tensor<double> u({1, 3, 1}, {1, 0, 0});
  auto one = [](double v) { return Var<double>(Tensor<double>({1}, v)); };
  auto z = diagonal_scan(Var<double>(u), one(0.5), one(1), one(1), one(0)).value();
  EXPECT_EQ(flat(z), (std::vector<double>{1, 0.5, 0.25}));
}

TEST(DiagonalScan, PureFeedthrough) {
  Rng rng(7);
  auto u = random_tensor({2, 6, 3}, rng);
  auto a = Var<double>(random_tensor({3}, rng, 0.1, 0.9));
  auto b = Var<double>(random_tensor({3}, rng));
  auto z = diagonal_scan(Var<double>(u), a, b, Var<double>(Tensor<double>({3})),
                         Var<double>(Tensor<double>({3}, 1.0)))
               .value();
  EXPECT_TRUE(z.identical(u));
}

TEST(DiagonalScan, MatchesOracleInBothPrecisions) {
  Rng rng(8);
  const std::size_t B = 2, T = 16, D = 5;
  auto u = random_tensor({B, T, D}, rng);
  auto a = random_tensor({D}, rng, 0.05, 0.99);
  auto b = random_tensor({D}, rng);
  auto c = random_tensor({D}, rng);
  auto d = random_tensor({D}, rng);
  auto ref = oracle::diagonal_scan(flat(u), flat(a), flat(b), flat(c), flat(d), B, T, D);
  auto z = diagonal_scan(Var<double>(u), Var<double>(a), Var<double>(b), Var<double>(c), Var<double>(d)).value();
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(z[i], ref[i], 1e-12);
  auto zf = diagonal_scan(Var<float>(u.cast<float>()), Var<float>(a.cast<float>()), Var<float>(b.cast<float>()),
                          Var<float>(c.cast<float>()), Var<float>(d.cast<float>()))
                .value();
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(zf[i], ref[i], 1e-5);
}

TEST(DiagonalScan, StatesStayBounded) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t T = 64, D = 4;
    auto u = random_tensor({1, T, D}, rng, -3, 3);
    auto a = random_tensor({D}, rng, 0.01, 0.99);
    auto b = random_tensor({D}, rng, -2, 2);
    // c = 1, d = 0 exposes the state itself.
    auto s = diagonal_scan(Var<double>(u), Var<double>(a), Var<double>(b), Var<double>(Tensor<double>({D}, 1.0)),
                           Var<double>(Tensor<double>({D})))
                 .value();
    double max_in = 0, max_a = 0;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t ch = 0; ch < D; ++ch) max_in = std::max(max_in, std::abs(b[ch] * u[t * D + ch]));
    for (double v : a.data()) max_a = std::max(max_a, v);
    for (double v : s.data()) EXPECT_LE(std::abs(v), max_in / (1 - max_a) + 1e-12);
  }
}

TEST(DiagonalScan, NonFiniteInputThrows) {
  Tensor<double> u({1, 2, 1}, {1.0, std::nan("")});
  auto one = Var<double>(Tensor<double>({1}, 0.5));
  EXPECT_THROW(diagonal_scan(Var<double>(u), one, one, one, one), NumericError);
}

TEST(DecayCoefficients, StayInsideOpenInterval) {
  Tensor<double> logits({4}, {-100, 0, 100, 3});
  auto a = decay_coefficients(Var<double>(logits)).value();
  EXPECT_DOUBLE_EQ(a[0], kDecayClampMargin);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  EXPECT_DOUBLE_EQ(a[2], 1 - kDecayClampMargin);
  for (double v : a.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(SsmBlock, InitSpreadsDecayRates) {
  Rng rng(10);
  auto p = SsmBlockParams<double>::init(8, 4, 0.0, rng);
  auto a = decay_coefficients(p.a_logits).value();
  EXPECT_NEAR(a[0], 0.5, 1e-12);
  EXPECT_NEAR(a[7], 0.99, 1e-12);
  for (std::size_t i = 1; i < 8; ++i) EXPECT_GT(a[i], a[i - 1]);
  for (double v : p.d.value().data()) EXPECT_EQ(v, 1.0);
}

TEST(SsmBlock, ZeroOutputProjectionGivesZeros) {
  Rng rng(11);
  auto p = SsmBlockParams<double>::init(4, 4, 0.0, rng);
  p.out_proj_weight.mutable_value().fill(0.0);
  p.out_proj_bias.mutable_value().fill(0.0);
  auto out = ssm_block_forward(Var<double>(random_tensor({2, 5, 4}, rng)), p, true, rng).value();
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(SsmBlock, DropoutOffMatchesEvalAndIsDeterministic) {
  Rng rng(12);
  auto p = SsmBlockParams<float>::init(6, 4, 0.0f, rng);
  Var<float> h(random_tensor<float>({2, 7, 6}, rng));
  Rng r1(1), r2(2);
  auto train = ssm_block_forward(h, p, true, r1).value();
  auto eval = ssm_block_forward(h, p, false, r2).value();
  EXPECT_TRUE(train.identical(eval));
  EXPECT_EQ(train.shape(), h.shape());

  auto pd = SsmBlockParams<float>::init(6, 4, 0.5f, rng);
  Rng r3(9), r4(9);
  EXPECT_TRUE(ssm_block_forward(h, pd, true, r3).value().identical(ssm_block_forward(h, pd, true, r4).value()));
}

TEST(SsmBlock, WholeBlockIsCausal) {
  Rng rng(13);
  auto p = SsmBlockParams<double>::init(4, 3, 0.0, rng);
  auto h = random_tensor({1, 8, 4}, rng);
  auto base = ssm_block_forward(Var<double>(h), p, false, rng).value();
  for (std::size_t t = 0; t < 8; ++t) {
    auto bumped = h;
    for (std::size_t d = 0; d < 4; ++d) bumped[t * 4 + d] += 1.0;
    auto out = ssm_block_forward(Var<double>(bumped), p, false, rng).value();
    for (std::size_t s = 0; s < t * 4; ++s) EXPECT_EQ(out[s], base[s]);
  }
}

TEST(SsmBlock, GradientsOfEveryGroup) {
  Rng rng(14);
  auto p = SsmBlockParams<double>::init(4, 3, 0.0, rng);
  // Move off the symmetric init so every group has a generic gradient.
  p.norm.gain.mutable_value() = random_tensor({4}, rng, 0.5, 1.5);
  p.d.mutable_value() = random_tensor({4}, rng);
  Var<double> h(random_tensor({2, 8, 4}, rng));
  auto loss = [&] { return ops::sum_squares(ssm_block_forward(h, p, false, rng)); };
  auto report = check_parameter_gradients(loss, named(p), 1000, 1e-6, 15);
  EXPECT_LE(report.max_rel_error, 1e-6) << report.worst;
  EXPECT_EQ(report.coordinates, p.in_proj_weight.size() + p.in_proj_bias.size() + p.conv_kernel.size() +
                                    5 * 4 + p.out_proj_weight.size() + p.out_proj_bias.size());
}

TEST(SsmBlock, RejectsBadShapes) {
  Rng rng(15);
  auto p = SsmBlockParams<double>::init(4, 3, 0.0, rng);
  EXPECT_THROW(ssm_block_forward(Var<double>(Tensor<double>({2, 3, 5})), p, false, rng), ShapeError);
  EXPECT_THROW(SsmBlockParams<double>::init(4, 0, 0.0, rng), ConfigError);
  EXPECT_THROW(SsmBlockParams<double>::init(4, 2, 1.0, rng), ConfigError);
}

}  // namespace
}  // namespace mhc
