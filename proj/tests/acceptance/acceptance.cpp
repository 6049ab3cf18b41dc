// Acceptance run: one PASS/FAIL/SKIP line per criterion. Exit 1 on any FAIL.
#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>

#include "grad_cases.hpp"
#include "mhc/cli.hpp"
#include "oracles.hpp"

namespace mhc {
namespace {

// AC1
constexpr int kSinkhornMatrices = 1000;
constexpr int kSinkhornIters = 20;
constexpr double kResidualTol = 1e-5;
constexpr double kSpectralTol = 1e-4;
constexpr double kClosureTol = 1e-4;
constexpr double kSinkhornSeconds = 10;
// AC2
constexpr int kOracleInstances = 100;
constexpr double kOracleTol = 1e-6;
constexpr double kOracleSeconds = 5;
// AC3
constexpr double kGradTol = 1e-3;
constexpr double kGradStep = 1e-6;
constexpr double kGradSeconds = 60;
// AC4
constexpr double kReductionTol = 1e-5;
// AC5
constexpr double kPplRelTol = 1e-4;
// AC7
constexpr std::size_t kSmokeSteps = 300;
constexpr std::size_t kSmokeCorpusBytes = 100 * 1024;
constexpr double kSmokeDrop = 0.30;
constexpr double kSmokeSeconds = 600;
// AC8
constexpr double kBaselineLo = 6.0, kBaselineHi = 6.8;
// AC9
constexpr int kResumeSteps = 200;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  enum { pass, fail, skip } status;
  std::string detail;
};

Tensor<double> uniform(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& x : t.data()) x = d(rng);
  return t;
}

std::vector<double> flat(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double svd_norm(const Tensor<double>& h) {
  const auto n = static_cast<Eigen::Index>(h.shape()[0]);
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = h.at(i, j);
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

Outcome ac1_sinkhorn() {
  const auto t0 = Clock::now();
  Rng rng(101);
  bool nonneg = true;
  double res = 0, spec = 0, power_gap = 0, closure = 0;
  for (int i = 0; i < kSinkhornMatrices; ++i) {
    const std::size_t n = 2 + static_cast<std::size_t>(i) % 7;
    const auto a = sinkhorn_project(Var<double>(uniform({n, n}, rng)), kSinkhornIters);
    const auto b = sinkhorn_project(Var<double>(uniform({n, n}, rng)), kSinkhornIters);
    for (const auto* m : {&a, &b}) {
      for (double x : m->h.value().data()) nonneg = nonneg && x >= 0.0;
      auto [r, c] = stochastic_residuals(m->h.value());
      res = std::max({res, r, c});
      const double s = svd_norm(m->h.value());
      spec = std::max(spec, s);
      power_gap = std::max(power_gap, spectral_norm_estimate(m->h.value(), 100) - s);
    }
    auto [r, c] = stochastic_residuals(matmul(a.h.value(), b.h.value()));
    closure = std::max({closure, r, c});
  }
  const double secs = seconds_since(t0);
  const bool ok = nonneg && res <= kResidualTol && spec <= 1 + kSpectralTol && power_gap <= 1e-9 &&
                  closure <= kClosureTol && secs < kSinkhornSeconds;
  return {ok ? Outcome::pass : Outcome::fail,
          std::string(nonneg ? "nonnegative" : "NEGATIVE ENTRY") + ", residual " + fmt("%.2e", res) +
              ", svd norm " + fmt("%.9f", spec) + ", power<=svd gap " + fmt("%.1e", power_gap) +
              ", closure " + fmt("%.2e", closure) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome ac2_oracles() {
  const auto t0 = Clock::now();
  Rng rng(202);
  std::uniform_int_distribution<std::size_t> pickB(1, 4), pickT(1, 32), pickD(1, 16), pickK(1, 6);
  double worst = 0;
  for (int i = 0; i < kOracleInstances; ++i) {
    const std::size_t B = pickB(rng), T = pickT(rng), D = pickD(rng), k = pickK(rng);
    const auto u = uniform({B, T, D}, rng);
    const auto a = uniform({D}, rng, -0.99, 0.99), b = uniform({D}, rng), c = uniform({D}, rng),
               d = uniform({D}, rng);
    const auto kernel = uniform({D, k}, rng);
    const auto z = ops::diagonal_scan(Var<double>(u), Var<double>(a), Var<double>(b), Var<double>(c),
                                      Var<double>(d)).value();
    const auto y = ops::causal_depthwise_conv(Var<double>(u), Var<double>(kernel)).value();
    const auto z_ref = oracle::diagonal_scan(flat(u), flat(a), flat(b), flat(c), flat(d), B, T, D);
    const auto y_ref = oracle::causal_conv(flat(u), flat(kernel), B, T, D, k);
    for (std::size_t j = 0; j < z_ref.size(); ++j)
      worst = std::max({worst, std::abs(z[j] - z_ref[j]), std::abs(y[j] - y_ref[j])});
  }
  const double secs = seconds_since(t0);
  return {worst <= kOracleTol && secs < kOracleSeconds ? Outcome::pass : Outcome::fail,
          "max abs diff " + fmt("%.2e", worst) + " over " + std::to_string(kOracleInstances) + " instances, " +
              fmt("%.2f", secs) + " s"};
}

ModelConfig desk(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.vocab = 11;
  c.d_model = 8;
  c.layers = 2;
  c.seq_len = 6;
  c.streams = 3;
  c.adapter_rank = 2;
  c.embed_dropout = c.block_dropout = c.adapter_dropout = 0.0;
  c.seed = 303;
  return c;
}

Outcome ac3_gradients() {
  const auto t0 = Clock::now();
  double op_worst = 0;
  std::string op_worst_name;
  const auto cases = testing::op_gradient_cases(304);
  for (const auto& gc : cases) {
    const double e = finite_difference_check(gc.f, gc.point, kGradStep);
    if (e > op_worst) op_worst = e, op_worst_name = gc.name;
  }
  double model_worst = 0;
  std::string model_worst_name;
  std::size_t coords = 0, groups = 0;
  for (auto v : {Variant::baseline, Variant::mhc_static, Variant::mhc_adapters}) {
    LanguageModel<double> m(desk(v));
    // Move off the identity-at-init point so adapter and gamma paths carry signal.
    Rng rng(305);
    for (const auto& p : m.parameters())
      for (auto& x : const_cast<Var<double>&>(p.var).mutable_value().data())
        x += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    std::vector<TokenId> x(12), y(12);
    for (auto& t : x) t = std::uniform_int_distribution<TokenId>(0, 10)(rng);
    for (auto& t : y) t = std::uniform_int_distribution<TokenId>(0, 10)(rng);
    std::vector<NamedParameter> named;
    for (const auto& p : m.parameters()) named.push_back({p.name, p.var});
    groups += named.size();
    const auto rep = check_parameter_gradients([&] { return lm_loss(m.forward(x, 2, 6, true), y); }, named,
                                               8, kGradStep, 306);
    coords += rep.coordinates;
    if (rep.max_rel_error > model_worst) model_worst = rep.max_rel_error, model_worst_name = rep.worst;
  }
  const double secs = seconds_since(t0);
  const bool ok = op_worst <= kGradTol && model_worst <= kGradTol && secs < kGradSeconds;
  return {ok ? Outcome::pass : Outcome::fail,
          std::to_string(cases.size()) + " op cases max " + fmt("%.2e", op_worst) + " (" + op_worst_name +
              "); model " + std::to_string(groups) + " parameter tensors, " + std::to_string(coords) +
              " coords max " + fmt("%.2e", model_worst) + " (" + model_worst_name + "), " + fmt("%.2f", secs) +
              " s"};
}

Outcome ac4_reductions() {
  auto base_cfg = desk(Variant::baseline);
  base_cfg.streams = 1;
  LanguageModel<float> base(base_cfg);
  auto one_cfg = base_cfg;
  one_cfg.variant = Variant::mhc_static;
  LanguageModel<float> one(one_cfg);
  one.load_matching(base);
  auto& w = one.expander.weight.mutable_value();
  w.fill(0.0f);
  for (std::size_t k = 0; k < base_cfg.d_model; ++k) w.at(k, k) = 1.0f;

  LanguageModel<float> stat(desk(Variant::mhc_static));
  LanguageModel<float> adap(desk(Variant::mhc_adapters));
  adap.load_matching(stat);

  Rng rng(404);
  std::vector<TokenId> x(4 * 6);
  for (auto& t : x) t = std::uniform_int_distribution<TokenId>(0, 10)(rng);
  const auto a = one.forward(x, 4, 6, false).value(), b = base.forward(x, 4, 6, false).value();
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, double(std::abs(a[i] - b[i])));
  const bool exact = adap.forward(x, 4, 6, false).value().identical(stat.forward(x, 4, 6, false).value());
  return {diff <= kReductionTol && exact ? Outcome::pass : Outcome::fail,
          "n=1 vs baseline max diff " + fmt("%.2e", diff) +
              (exact ? ", zero-init adapters identical to static" : ", adapters DIFFER from static")};
}

Outcome ac5_perplexity() {
  const double rows[][2] = {{6.3507, 572.91}, {6.2448, 515.35}, {6.1353, 461.88}};
  double worst = 0;
  std::string detail;
  for (auto [loss, ppl] : rows) {
    const double rel = std::abs(perplexity(loss) / ppl - 1);
    worst = std::max(worst, rel);
    detail += "exp(" + fmt("%.4f", loss) + ")=" + fmt("%.2f", perplexity(loss)) + " ";
  }
  return {worst <= kPplRelTol ? Outcome::pass : Outcome::fail, detail + "max rel " + fmt("%.2e", worst)};
}

ModelConfig small(Variant v, std::size_t d, std::size_t layers, std::size_t t) {
  ModelConfig c;
  c.variant = v;
  c.vocab = 257;
  c.d_model = d;
  c.layers = layers;
  c.seq_len = t;
  c.adapter_rank = 8;
  if (v == Variant::baseline) c.streams = 1;
  return c;
}

Outcome ac6_fairness() {
  const auto tok = Tokenizer::byte_fallback();
  const auto train = pack(tok.encode(synthetic_corpus(20000, 601)), 32);
  const auto valid = pack(tok.encode(synthetic_corpus(4000, 602)), 32);
  bool exact = true;
  std::vector<std::int64_t> peaks;
  for (auto v : {Variant::baseline, Variant::mhc_static, Variant::mhc_adapters}) {
    LanguageModel<float> m(small(v, 32, 2, 32));
    TrainConfig tc;
    tc.batch = 4;
    Trainer<float> tr(m, tc, train, valid);
    for (int i = 0; i < 5; ++i) tr.step(tr.batch_for_step(tr.global_step()));
    const auto before = serialize(tr.snapshot());
    const auto eval_before = evaluate(m, valid, tc.batch);
    BenchConfig bc;
    bc.warmup_steps = 2;
    bc.timed_steps = 5;
    const auto r = run_fair_bench(tr, m, valid, bc, to_string(v));
    const auto eval_after = evaluate(m, valid, tc.batch);
    exact = exact && r.restored_exact && serialize(tr.snapshot()) == before &&
            eval_after.loss == eval_before.loss && r.val_loss == eval_before.loss;
    peaks.push_back(r.peak_mem_bytes);
  }
  const bool ordered = peaks[0] <= peaks[1] && peaks[1] <= peaks[2];
  return {exact && ordered ? Outcome::pass : Outcome::fail,
          std::string(exact ? "state and eval restored bit-exactly" : "RESTORE MISMATCH") + ", peak bytes " +
              std::to_string(peaks[0]) + " <= " + std::to_string(peaks[1]) + " <= " + std::to_string(peaks[2]) +
              (ordered ? "" : " VIOLATED")};
}

Outcome ac7_smoke() {
  const auto t0 = Clock::now();
  const auto tok = Tokenizer::byte_fallback();
  const auto train = pack(tok.encode(synthetic_corpus(kSmokeCorpusBytes, 701)), 64);
  const auto valid = pack(tok.encode(synthetic_corpus(kSmokeCorpusBytes / 10, 702)), 64);
  bool ok = true;
  std::string detail;
  for (auto v : {Variant::baseline, Variant::mhc_static, Variant::mhc_adapters}) {
    LanguageModel<float> m(small(v, 64, 2, 64));
    TrainConfig tc;
    tc.batch = 8;
    tc.max_steps = kSmokeSteps;
    tc.eval_interval = 50;
    tc.log_interval = 0;
    Trainer<float> tr(m, tc, train, valid);
    MemoryMetricsSink sink;
    const auto summary = tr.run({&sink});
    double at50 = NAN;
    for (const auto& r : sink.rows)
      if (r.split == "valid" && r.step == 50) at50 = r.loss;
    const double drop = 1 - summary.final_eval.loss / at50;
    ok = ok && drop >= kSmokeDrop;
    detail += to_string(v) + " " + fmt("%.3f", at50) + "->" + fmt("%.3f", summary.final_eval.loss) + " (" +
              fmt("%.1f", 100 * drop) + "%) ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < kSmokeSeconds;
  return {ok ? Outcome::pass : Outcome::fail, detail + fmt("%.1f", secs) + " s"};
}

Outcome ac8_directional() {
  const char* dir = std::getenv("MHC_WIKITEXT_DIR");
  if (dir == nullptr || *dir == '\0')
    return {Outcome::skip, "set MHC_WIKITEXT_DIR to a directory with wiki.train.tokens, wiki.valid.tokens, "
                           "vocab.json and merges.txt (multi-day CPU run)"};
  const std::filesystem::path root(dir);
  DataConfig dc;
  dc.tokenizer = "gpt2";
  dc.vocab_file = (root / "vocab.json").string();
  dc.merges_file = (root / "merges.txt").string();
  dc.train = (root / "wiki.train.tokens").string();
  dc.valid = (root / "wiki.valid.tokens").string();
  dc.cache_dir = root.string();
  const ModelConfig defaults;
  const auto corpus = load_corpus(dc, defaults.seq_len);
  std::vector<double> finals;
  std::string detail;
  for (auto v : {Variant::baseline, Variant::mhc_static, Variant::mhc_adapters}) {
    ModelConfig mc = defaults;
    mc.variant = v;
    mc.vocab = corpus.tokenizer.vocab_size();
    if (v == Variant::baseline) mc.streams = 1;
    LanguageModel<float> m(mc);
    TrainConfig tc;
    Trainer<float> tr(m, tc, corpus.train, corpus.valid);
    ConsoleMetricsSink console(std::cerr, to_string(v));
    finals.push_back(tr.run({&console}).final_eval.loss);
    detail += to_string(v) + " " + fmt("%.4f", finals.back()) + " ";
  }
  const bool ok = finals[2] < finals[1] && finals[1] < finals[0] && finals[0] >= kBaselineLo &&
                  finals[0] <= kBaselineHi;
  return {ok ? Outcome::pass : Outcome::fail, detail};
}

Outcome ac9_resume() {
  const auto tok = Tokenizer::byte_fallback();
  const auto train = pack(tok.encode(synthetic_corpus(30000, 901)), 32);
  const auto valid = pack(tok.encode(synthetic_corpus(3000, 902)), 32);
  bool all = true;
  std::string detail;
  for (auto v : {Variant::baseline, Variant::mhc_static, Variant::mhc_adapters}) {
    const auto mc = small(v, 32, 2, 32);  // default dropout, so the RNG state matters
    TrainConfig tc;
    tc.batch = 4;
    LanguageModel<float> a(mc), b(mc), c(mc);
    Trainer<float> ta(a, tc, train, valid), tb(b, tc, train, valid), tcn(c, tc, train, valid);
    for (int i = 0; i < kResumeSteps; ++i) ta.step(ta.batch_for_step(ta.global_step()));
    for (int i = 0; i < kResumeSteps / 2; ++i) tb.step(tb.batch_for_step(tb.global_step()));
    tcn.restore(deserialize(serialize(tb.snapshot())));
    for (int i = 0; i < kResumeSteps / 2; ++i) tcn.step(tcn.batch_for_step(tcn.global_step()));
    const bool same = serialize(ta.snapshot()) == serialize(tcn.snapshot());
    all = all && same;
    detail += to_string(v) + (same ? " identical " : " DIFFERS ");
  }
  return {all ? Outcome::pass : Outcome::fail,
          detail + "after " + std::to_string(kResumeSteps) + " steps (" + std::to_string(kResumeSteps / 2) +
              " + restore + " + std::to_string(kResumeSteps / 2) + ")"};
}

}  // namespace
}  // namespace mhc

int main(int argc, char** argv) {
  using namespace mhc;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"AC1 sinkhorn properties", ac1_sinkhorn},   {"AC2 scan/conv oracles", ac2_oracles},
      {"AC3 gradient suite", ac3_gradients},       {"AC4 reduction to baseline", ac4_reductions},
      {"AC5 perplexity fixtures", ac5_perplexity}, {"AC6 fairness gate", ac6_fairness},
      {"AC7 training smoke", ac7_smoke},           {"AC8 directional reproduction", ac8_directional},
      {"AC9 resume determinism", ac9_resume},
  };
  std::string only = argc > 1 ? argv[1] : "";
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && name.rfind(only, 0) != 0) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("threw: ") + e.what()};
    }
    const char* tag = o.status == Outcome::pass ? "PASS" : o.status == Outcome::fail ? "FAIL" : "SKIP";
    failures += o.status == Outcome::fail;
    std::cout << tag << "  " << name << "  " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
