#include <cmath>
#include <cstdio>
#include <functional>

#include "mhc/cli.hpp"

namespace mhc {
namespace {

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Tensor<double> uniform(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& x : t.data()) x = d(rng);
  return t;
}

ModelConfig desk(Variant v, std::uint64_t seed) {
  ModelConfig c;
  c.variant = v;
  c.vocab = 11;
  c.d_model = 8;
  c.layers = 2;
  c.seq_len = 6;
  c.streams = 3;
  c.adapter_rank = 2;
  c.embed_dropout = c.block_dropout = c.adapter_dropout = 0.0;
  c.seed = seed;
  return c;
}

Check sinkhorn_properties() {
  Rng rng(1);
  double res = 0, spec = 0, closure = 0;
  bool nonneg = true;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 2 + i % 7;
    auto a = sinkhorn_project(Var<double>(uniform({n, n}, rng)), 20);
    auto b = sinkhorn_project(Var<double>(uniform({n, n}, rng)), 20);
    for (double x : a.h.value().data()) nonneg = nonneg && x >= 0;
    res = std::max({res, double(a.row_residual), double(a.col_residual)});
    spec = std::max(spec, spectral_norm_estimate(a.h.value(), 100));
    auto [r, c] = stochastic_residuals(matmul(a.h.value(), b.h.value()));
    closure = std::max({closure, double(r), double(c)});
  }
  return {"sinkhorn: nonnegative, residual <= 1e-5, spectral <= 1+1e-4, closure <= 1e-4",
          nonneg && res <= 1e-5 && spec <= 1 + 1e-4 && closure <= 1e-4,
          "residual " + sci(res) + " spectral " + sci(spec) + " closure " + sci(closure)};
}

Check scan_and_conv_oracles() {
  Rng rng(2);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t B = 1 + i % 3, T = 1 + (i * 7) % 20, D = 1 + (i * 5) % 9, k = 1 + i % 4;
    auto u = uniform({B, T, D}, rng);
    auto a = uniform({D}, rng, 0.05, 0.95), b = uniform({D}, rng), c = uniform({D}, rng), d = uniform({D}, rng);
    auto kernel = uniform({D, k}, rng);
    auto z = ops::diagonal_scan(Var<double>(u), Var<double>(a), Var<double>(b), Var<double>(c), Var<double>(d)).value();
    auto y = ops::causal_depthwise_conv(Var<double>(u), Var<double>(kernel)).value();
    for (std::size_t bb = 0; bb < B; ++bb)
      for (std::size_t ch = 0; ch < D; ++ch) {
        double s = 0;
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t at = (bb * T + t) * D + ch;
          s = a[ch] * s + b[ch] * u[at];
          worst = std::max(worst, std::abs(z[at] - (c[ch] * s + d[ch] * u[at])));
          double acc = 0;
          for (std::size_t j = 0; j < k; ++j)
            if (t + j + 1 >= k) acc += kernel[ch * k + j] * u[(bb * T + t + j + 1 - k) * D + ch];
          worst = std::max(worst, std::abs(y[at] - acc));
        }
      }
  }
  return {"scan and conv match naive loops within 1e-6", worst <= 1e-6, "max diff " + sci(worst)};
}

Check model_gradients() {
  double worst = 0;
  std::size_t coords = 0;
  for (auto v : {Variant::baseline, Variant::mhc_static, Variant::mhc_adapters}) {
    LanguageModel<double> m(desk(v, 5));
    Rng rng(6);
    for (const auto& p : m.parameters())
      for (auto& x : const_cast<Var<double>&>(p.var).mutable_value().data())
        x += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    std::vector<TokenId> x(12), y(12);
    for (auto& t : x) t = std::uniform_int_distribution<TokenId>(0, 10)(rng);
    for (auto& t : y) t = std::uniform_int_distribution<TokenId>(0, 10)(rng);
    std::vector<NamedParameter> named;
    for (const auto& p : m.parameters()) named.push_back({p.name, p.var});
    auto rep = check_parameter_gradients([&] { return lm_loss(m.forward(x, 2, 6, true), y); }, named, 4,
                                         1e-6, 7);
    worst = std::max(worst, rep.max_rel_error);
    coords += rep.coordinates;
  }
  return {"full-model gradients match central differences within 1e-3", worst <= 1e-3,
          std::to_string(coords) + " coordinates, max rel error " + sci(worst)};
}

Check reductions() {
  auto base_cfg = desk(Variant::baseline, 8);
  LanguageModel<float> base(base_cfg);
  auto one_cfg = base_cfg;
  one_cfg.variant = Variant::mhc_static;
  one_cfg.streams = 1;
  LanguageModel<float> one(one_cfg);
  one.load_matching(base);
  auto& w = one.expander.weight.mutable_value();
  w.fill(0.0f);
  for (std::size_t k = 0; k < 8; ++k) w.at(k, k) = 1.0f;
  LanguageModel<float> stat(desk(Variant::mhc_static, 8));
  LanguageModel<float> adap(desk(Variant::mhc_adapters, 8));
  adap.load_matching(stat);
  std::vector<TokenId> x{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0, 1};
  auto a = one.forward(x, 2, 6, false).value(), b = base.forward(x, 2, 6, false).value();
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, double(std::abs(a[i] - b[i])));
  const bool exact = adap.forward(x, 2, 6, false).value().identical(stat.forward(x, 2, 6, false).value());
  return {"n=1 matches baseline within 1e-5; zero-init adapters match static exactly", diff <= 1e-5 && exact,
          "n=1 diff " + sci(diff) + (exact ? ", adapters exact" : ", adapters differ")};
}

Check perplexity_fixtures() {
  const double rows[][2] = {{6.3507, 572.91}, {6.2448, 515.35}, {6.1353, 461.88}};
  double worst = 0;
  for (auto [loss, ppl] : rows) worst = std::max(worst, std::abs(perplexity(loss) / ppl - 1));
  return {"perplexity = exp(loss) on the three benchmark rows within 0.01%", worst <= 1e-4,
          "max rel diff " + sci(worst)};
}

Check optimizer_examples() {
  NamedParam<double> p{"w", parameter(Tensor<double>({1}, {0.75})), true};
  p.var.mutable_grad()[0] = 0;
  std::vector<NamedParam<double>> ps{p};
  OptimizerState<double> st;
  st.init(ps);
  adamw_step(ps, {true}, st, AdamWConfig{3e-4, 0.9, 0.999, 1e-8, 0.1});
  const bool decay = p.var.value()[0] == 0.75 * (1 - 3e-4 * 0.1);
  NamedParam<double> g{"g", parameter(Tensor<double>({2})), true};
  g.var.mutable_grad()[0] = 3;
  g.var.mutable_grad()[1] = 4;
  clip_gradients(std::vector<NamedParam<double>>{g}, 1.0);
  const bool clip = std::abs(g.var.grad()[0] - 0.6) < 1e-15 && std::abs(g.var.grad()[1] - 0.8) < 1e-15;
  return {"decoupled weight decay is exact shrinkage; clipping [3,4] gives [0.6,0.8]", decay && clip, ""};
}

Check tokenizer_round_trip() {
  auto tok = Tokenizer::byte_fallback();
  Rng rng(9);
  bool ok = tok.encode("AB") == std::vector<TokenId>{65, 66} && tok.eos() == 256;
  for (int i = 0; i < 1000 && ok; ++i) {
    std::string s(std::uniform_int_distribution<int>(0, 40)(rng), '\0');
    for (auto& ch : s) ch = static_cast<char>(std::uniform_int_distribution<int>(0, 255)(rng));
    ok = tok.decode(tok.encode(s)) == s;
  }
  return {"byte tokenizer round trip on 1000 random strings", ok, ""};
}

Check resume_determinism() {
  auto tok = Tokenizer::byte_fallback();
  const auto train = pack(tok.encode(synthetic_corpus(6000, 1)), 8);
  const auto valid = pack(tok.encode(synthetic_corpus(1000, 2)), 8);
  ModelConfig mc;
  mc.variant = Variant::mhc_adapters;
  mc.vocab = 257;
  mc.d_model = 8;
  mc.layers = 1;
  mc.seq_len = 8;
  mc.streams = 2;
  mc.adapter_rank = 2;
  TrainConfig tc;
  tc.batch = 4;
  LanguageModel<double> a(mc), b(mc), c(mc);
  Trainer<double> ta(a, tc, train, valid), tb(b, tc, train, valid), tcn(c, tc, train, valid);
  for (int i = 0; i < 20; ++i) ta.step(ta.batch_for_step(ta.global_step()));
  for (int i = 0; i < 10; ++i) tb.step(tb.batch_for_step(tb.global_step()));
  tcn.restore(deserialize(serialize(tb.snapshot())));
  for (int i = 0; i < 10; ++i) tcn.step(tcn.batch_for_step(tcn.global_step()));
  bool same = true;
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    same = same && a.parameters()[i].var.value().identical(c.parameters()[i].var.value());
  return {"checkpoint resume equals uninterrupted training bit-exactly", same, ""};
}

}  // namespace

bool run_selftest(std::ostream& out) {
  const std::vector<std::function<Check()>> checks{sinkhorn_properties, scan_and_conv_oracles,
                                                   model_gradients,     reductions,
                                                   perplexity_fixtures, optimizer_examples,
                                                   tokenizer_round_trip, resume_determinism};
  bool all = true;
  for (const auto& run : checks) {
    Check c;
    try {
      c = run();
    } catch (const std::exception& e) {
      c.name = c.name.empty() ? "check" : c.name;
      c.detail = std::string("threw: ") + e.what();
    }
    all = all && c.pass;
    out << (c.pass ? "PASS " : "FAIL ") << c.name;
    if (!c.detail.empty()) out << "  (" << c.detail << ")";
    out << '\n';
  }
  out << (all ? "selftest: all properties hold\n" : "selftest: FAILED\n");
  return all;
}

}  // namespace mhc
