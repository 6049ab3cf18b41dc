#include "mhc/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace mhc {
namespace {

constexpr std::uint64_t kEpochStream = 0xda7a0001;

std::uint64_t epoch_seed(std::uint64_t seed, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32),
                    static_cast<std::uint32_t>(kEpochStream)};
  Rng rng(seq);
  return rng();
}

template <typename T>
bool grads_finite(const std::vector<NamedParam<T>>& params, std::string* bad = nullptr) {
  for (const auto& p : params) {
    if (!p.var.has_grad()) continue;
    for (T g : p.var.grad().data()) {
      if (!std::isfinite(g)) {
        if (bad) *bad = p.name;
        return false;
      }
    }
  }
  return true;
}

std::string meta_get(const KeyValues& meta, const std::string& key) {
  auto it = meta.find(key);
  MHC_CHECK(it != meta.end(), DataError, "checkpoint meta missing '" + key + "'");
  return it->second;
}

}  // namespace

std::string to_string(DecayPolicy p) {
  switch (p) {
    case DecayPolicy::matrices: return "matrices";
    case DecayPolicy::all: return "all";
    case DecayPolicy::none: return "none";
  }
  throw InternalError("unknown decay policy");
}

DecayPolicy parse_decay_policy(std::string_view s) {
  if (s == "matrices") return DecayPolicy::matrices;
  if (s == "all") return DecayPolicy::all;
  if (s == "none") return DecayPolicy::none;
  throw ConfigError("unknown decay policy '" + std::string(s) + "' (expected matrices, all or none)");
}

void TrainConfig::validate() const {
  MHC_CHECK(epochs >= 1, ConfigError, "train.epochs must be >= 1");
  MHC_CHECK(batch >= 1, ConfigError, "train.batch must be >= 1");
  MHC_CHECK(lr > 0 && std::isfinite(lr), ConfigError, "train.lr must be positive");
  MHC_CHECK(weight_decay >= 0, ConfigError, "train.weight_decay must be >= 0");
  MHC_CHECK(clip_norm > 0, ConfigError, "train.clip_norm must be positive");
  MHC_CHECK(eval_interval >= 1, ConfigError, "train.eval_interval must be >= 1");
  MHC_CHECK(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, ConfigError,
            "train.beta1 and train.beta2 must be in [0, 1)");
  MHC_CHECK(eps > 0, ConfigError, "train.eps must be positive");
  MHC_CHECK(initial_loss_scale >= 1, ConfigError, "train.initial_loss_scale must be >= 1");
  MHC_CHECK(scale_growth_interval >= 1, ConfigError, "train.scale_growth_interval must be >= 1");
}

KeyValues TrainConfig::to_key_values() const {
  return {
      {"train.epochs", std::to_string(epochs)},
      {"train.batch", std::to_string(batch)},
      {"train.lr", format_double(lr)},
      {"train.weight_decay", format_double(weight_decay)},
      {"train.clip_norm", format_double(clip_norm)},
      {"train.eval_interval", std::to_string(eval_interval)},
      {"train.log_interval", std::to_string(log_interval)},
      {"train.mixed_precision", mixed_precision ? "true" : "false"},
      {"train.seed", std::to_string(seed)},
      {"train.beta1", format_double(beta1)},
      {"train.beta2", format_double(beta2)},
      {"train.eps", format_double(eps)},
      {"train.max_steps", std::to_string(max_steps)},
      {"train.decay", to_string(decay)},
      {"train.nonfinite_limit", std::to_string(nonfinite_limit)},
      {"train.initial_loss_scale", format_double(initial_loss_scale)},
      {"train.scale_growth_interval", std::to_string(scale_growth_interval)},
  };
}

void TrainConfig::apply(const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    if (key.rfind("train.", 0) != 0) continue;
    const std::string field = key.substr(6);
    if (field == "epochs") epochs = parse_size(key, value);
    else if (field == "batch") batch = parse_size(key, value);
    else if (field == "lr") lr = parse_double(key, value);
    else if (field == "weight_decay") weight_decay = parse_double(key, value);
    else if (field == "clip_norm") clip_norm = parse_double(key, value);
    else if (field == "eval_interval") eval_interval = parse_size(key, value);
    else if (field == "log_interval") log_interval = parse_size(key, value);
    else if (field == "mixed_precision") mixed_precision = parse_bool(key, value);
    else if (field == "seed") seed = parse_u64(key, value);
    else if (field == "beta1") beta1 = parse_double(key, value);
    else if (field == "beta2") beta2 = parse_double(key, value);
    else if (field == "eps") eps = parse_double(key, value);
    else if (field == "max_steps") max_steps = parse_size(key, value);
    else if (field == "decay") decay = parse_decay_policy(value);
    else if (field == "nonfinite_limit") nonfinite_limit = parse_size(key, value);
    else if (field == "initial_loss_scale") initial_loss_scale = parse_double(key, value);
    else if (field == "scale_growth_interval") scale_growth_interval = parse_size(key, value);
    else throw ConfigError("unknown config key " + key);
  }
}

std::string format_run_config(const ModelConfig& mc, const TrainConfig& tc) {
  KeyValues kv = mc.to_key_values();
  kv.merge(tc.to_key_values());
  return format_key_values(kv);
}

template <typename T>
void OptimizerState<T>::init(const std::vector<NamedParam<T>>& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.var.shape());
    v.emplace_back(p.var.shape());
  }
}

template <typename T>
void adamw_step(const std::vector<NamedParam<T>>& params, const std::vector<bool>& decay,
                OptimizerState<T>& state, const AdamWConfig& h) {
  MHC_CHECK(state.m.size() == params.size() && state.v.size() == params.size() &&
                decay.size() == params.size(),
            ShapeError, "adamw: optimizer state does not match parameters");
  std::string bad;
  MHC_CHECK(grads_finite(params, &bad), NumericError, "adamw: non-finite gradient in " + bad);
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2_sqrt = std::sqrt(1.0 - std::pow(h.beta2, t));
  const double step_size = h.lr / bc1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& var = const_cast<Var<T>&>(params[i].var);
    auto& w = var.mutable_value();
    MHC_CHECK(state.m[i].shape() == w.shape(), ShapeError, "adamw: moment shape mismatch for " + params[i].name);
    const bool has = var.has_grad();
    const T* g = has ? var.grad().raw() : nullptr;
    T* m = state.m[i].raw();
    T* v = state.v[i].raw();
    T* p = w.raw();
    const double shrink = decay[i] ? 1.0 - h.lr * h.weight_decay : 1.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? static_cast<double>(g[k]) : 0.0;
      double pk = static_cast<double>(p[k]) * shrink;
      const double mk = h.beta1 * m[k] + (1.0 - h.beta1) * gk;
      const double vk = h.beta2 * v[k] + (1.0 - h.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      pk -= step_size * mk / (std::sqrt(vk) / bc2_sqrt + h.eps);
      p[k] = static_cast<T>(pk);
    }
  }
}

template <typename T>
double clip_gradients(const std::vector<NamedParam<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.var.has_grad()) continue;
    for (T g : p.var.grad().data()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      for (T& g : const_cast<Var<T>&>(p.var).mutable_grad().data()) g *= factor;
    }
  }
  return norm;
}

CsvMetricsSink::CsvMetricsSink(const std::filesystem::path& path) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, std::ios::app);
  MHC_CHECK(out_.good(), DataError, "cannot open metrics file " + path.string());
  if (fresh) out_ << "step,split,loss,ppl,elapsed_s\n" << std::flush;
}

void CsvMetricsSink::record(const MetricsRecord& r) {
  char elapsed[32];
  std::snprintf(elapsed, sizeof elapsed, "%.3f", r.elapsed_s);
  out_ << r.step << ',' << r.split << ',' << format_double(r.loss) << ',' << format_double(r.ppl) << ','
       << elapsed << '\n'
       << std::flush;
}

void ConsoleMetricsSink::record(const MetricsRecord& r) {
  char line[160];
  const std::string step = r.step < 0 ? "Final" : "step " + std::to_string(r.step);
  std::snprintf(line, sizeof line, "%s%s%-11s %-5s loss %.4f  ppl %10.2f  %7.1fs", tag_.c_str(),
                tag_.empty() ? "" : " ", step.c_str(), r.split.c_str(), r.loss, r.ppl, r.elapsed_s);
  *out_ << line << std::endl;
}

template <typename T>
EvalResult evaluate(LanguageModel<T>& model, const PackedDataset& data, std::size_t batch,
                    bool mixed_precision) {
  NoGradGuard no_grad;
  HalfPrecisionGuard half(mixed_precision);
  BatchPlan plan(data, batch, BatchMode::eval, false, 0);
  double total = 0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const Batch b = plan[i];
    auto logits = model.forward(b.x, b.batch, b.time, false);
    total += static_cast<double>(lm_loss(logits, b.y).item()) * static_cast<double>(b.tokens());
    tokens += b.tokens();
  }
  EvalResult r;
  r.tokens = tokens;
  r.loss = total / static_cast<double>(tokens);
  r.ppl = perplexity(r.loss);
  return r;
}

template <typename T>
Trainer<T>::Trainer(LanguageModel<T>& model, TrainConfig tc, const PackedDataset& train,
                    const PackedDataset& valid)
    : model_(&model), tc_(std::move(tc)), train_(&train), valid_(&valid) {
  tc_.validate();
  MHC_CHECK(train.seq_len() <= model.config().seq_len, ConfigError,
            "training sequence length exceeds model.seq_len");
  steps_per_epoch_ = train.samples() / tc_.batch;
  MHC_CHECK(steps_per_epoch_ >= 1, DataError,
            "corpus too small: " + std::to_string(train.samples()) + " training samples for batch " +
                std::to_string(tc_.batch));
  state_.init(model.parameters());
  state_.loss_scale = tc_.mixed_precision ? tc_.initial_loss_scale : 1.0;
  for (const auto& p : model.parameters()) {
    decay_.push_back(tc_.decay == DecayPolicy::all || (tc_.decay == DecayPolicy::matrices && p.decay));
  }
}

template <typename T>
std::uint64_t Trainer<T>::total_steps() const {
  const std::uint64_t all = tc_.epochs * steps_per_epoch_;
  return tc_.max_steps > 0 ? std::min<std::uint64_t>(all, tc_.max_steps) : all;
}

template <typename T>
const BatchPlan& Trainer<T>::plan_for_epoch(std::uint64_t epoch) const {
  if (!cached_plan_ || cached_epoch_ != epoch) {
    cached_plan_ = std::make_unique<BatchPlan>(*train_, tc_.batch, BatchMode::train, true,
                                               epoch_seed(tc_.seed, epoch));
    cached_epoch_ = epoch;
  }
  return *cached_plan_;
}

template <typename T>
Batch Trainer<T>::batch_for_step(std::uint64_t step) const {
  return plan_for_epoch(step / steps_per_epoch_)[step % steps_per_epoch_];
}

template <typename T>
StepResult Trainer<T>::step(const Batch& b) {
  StepResult r;
  ++global_step_;
  model_->zero_grad();
  HalfPrecisionGuard half(tc_.mixed_precision);
  const double scale = tc_.mixed_precision ? state_.loss_scale : 1.0;
  Var<T> loss;
  bool finite = true;
  try {
    loss = lm_loss(model_->forward(b.x, b.batch, b.time, true), b.y);
    r.loss = static_cast<double>(loss.item());
    finite = std::isfinite(r.loss);
  } catch (const NumericError&) {
    finite = false;
    r.loss = std::numeric_limits<double>::quiet_NaN();
  }
  if (!finite) {
    ++state_.skipped_steps;
    MHC_CHECK(++nonfinite_streak_ <= tc_.nonfinite_limit, NumericError,
              "training aborted at step " + std::to_string(global_step_) + ": non-finite loss for " +
                  std::to_string(nonfinite_streak_) + " consecutive steps (lr " + format_double(tc_.lr) +
                  ", loss scale " + format_double(state_.loss_scale) + ")");
    return r;
  }
  nonfinite_streak_ = 0;
  loss.backward(static_cast<T>(scale));

  const auto& params = model_->parameters();
  if (tc_.mixed_precision) {
    if (!grads_finite(params)) {
      state_.loss_scale = std::max(1.0, state_.loss_scale / 2);
      state_.clean_steps = 0;
      ++state_.skipped_steps;
      return r;
    }
    const T inv = static_cast<T>(1.0 / scale);
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      for (T& g : const_cast<Var<T>&>(p.var).mutable_grad().data()) g *= inv;
    }
  } else {
    std::string bad;
    MHC_CHECK(grads_finite(params, &bad), NumericError,
              "non-finite gradient in " + bad + " at step " + std::to_string(global_step_));
  }
  r.grad_norm = clip_gradients(params, tc_.clip_norm);
  adamw_step(params, decay_, state_,
             AdamWConfig{tc_.lr, tc_.beta1, tc_.beta2, tc_.eps, tc_.weight_decay});
  r.applied = true;
  if (tc_.mixed_precision && ++state_.clean_steps >= tc_.scale_growth_interval) {
    state_.loss_scale *= 2;
    state_.clean_steps = 0;
  }
  return r;
}

template <typename T>
TrainSummary Trainer<T>::run(const std::vector<MetricsSink*>& sinks,
                             const std::optional<std::filesystem::path>& ckpt_dir) {
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  auto emit = [&](const MetricsRecord& rec) {
    for (auto* s : sinks) s->record(rec);
  };
  auto save = [&](const std::string& file) {
    if (!ckpt_dir) return;
    std::filesystem::create_directories(*ckpt_dir);
    save_checkpoint(*ckpt_dir / file, snapshot());
  };
  if (ckpt_dir) std::filesystem::create_directories(*ckpt_dir);

  const std::uint64_t total = total_steps();
  double window = 0;
  std::size_t window_n = 0;
  while (global_step_ < total) {
    const auto r = step(batch_for_step(global_step_));
    if (std::isfinite(r.loss)) {
      window += r.loss;
      ++window_n;
    }
    if (tc_.log_interval > 0 && global_step_ % tc_.log_interval == 0 && window_n > 0) {
      const double mean = window / static_cast<double>(window_n);
      emit({static_cast<long long>(global_step_), "train", mean, perplexity(mean), elapsed()});
      window = 0;
      window_n = 0;
    }
    if (global_step_ % tc_.eval_interval == 0) {
      const auto ev = evaluate(*model_, *valid_, tc_.batch, tc_.mixed_precision);
      emit({static_cast<long long>(global_step_), "valid", ev.loss, ev.ppl, elapsed()});
      save("ckpt_step_" + std::to_string(global_step_) + ".bin");
    }
  }
  TrainSummary summary;
  summary.steps = global_step_;
  summary.final_eval = evaluate(*model_, *valid_, tc_.batch, tc_.mixed_precision);
  summary.skipped_steps = state_.skipped_steps;
  summary.final_loss_scale = state_.loss_scale;
  emit({-1, "valid", summary.final_eval.loss, summary.final_eval.ppl, elapsed()});
  save("final.bin");
  return summary;
}

template <typename T>
CheckpointBundle Trainer<T>::snapshot() const {
  CheckpointBundle b;
  b.config_text = format_run_config(model_->config(), tc_);
  b.params = model_->export_parameters();
  const auto& params = model_->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    b.optimizer.push_back(to_record("adam.m." + params[i].name, state_.m[i]));
    b.optimizer.push_back(to_record("adam.v." + params[i].name, state_.v[i]));
  }
  b.meta = {
      {"global_step", std::to_string(global_step_)},
      {"adam_step", std::to_string(state_.step)},
      {"loss_scale", format_double(state_.loss_scale)},
      {"clean_steps", std::to_string(state_.clean_steps)},
      {"skipped_steps", std::to_string(state_.skipped_steps)},
      {"nonfinite_streak", std::to_string(nonfinite_streak_)},
      {"variant", to_string(model_->config().variant)},
  };
  std::ostringstream rng;
  rng << model_->dropout_rng();
  b.rng_state = rng.str();
  return b;
}

template <typename T>
void Trainer<T>::restore(const CheckpointBundle& b) {
  model_->import_parameters(b.params);
  const auto& params = model_->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* m = b.find_optimizer("adam.m." + params[i].name);
    const auto* v = b.find_optimizer("adam.v." + params[i].name);
    MHC_CHECK(m && v, DataError, "checkpoint lacks optimizer moments for " + params[i].name);
    state_.m[i] = from_record<T>(*m);
    state_.v[i] = from_record<T>(*v);
    MHC_CHECK(state_.m[i].shape() == params[i].var.shape() && state_.v[i].shape() == params[i].var.shape(),
              DataError, "optimizer moment shape mismatch for " + params[i].name);
  }
  global_step_ = parse_u64("global_step", meta_get(b.meta, "global_step"));
  state_.step = parse_u64("adam_step", meta_get(b.meta, "adam_step"));
  state_.loss_scale = parse_double("loss_scale", meta_get(b.meta, "loss_scale"));
  state_.clean_steps = parse_u64("clean_steps", meta_get(b.meta, "clean_steps"));
  state_.skipped_steps = parse_u64("skipped_steps", meta_get(b.meta, "skipped_steps"));
  nonfinite_streak_ = parse_size("nonfinite_streak", meta_get(b.meta, "nonfinite_streak"));
  std::istringstream rng(b.rng_state);
  rng >> model_->dropout_rng();
  MHC_CHECK(!rng.fail(), DataError, "checkpoint RNG state is unreadable");
}

#define MHC_INSTANTIATE_TRAINER(T)                                                                \
  template struct OptimizerState<T>;                                                              \
  template void adamw_step(const std::vector<NamedParam<T>>&, const std::vector<bool>&,          \
                           OptimizerState<T>&, const AdamWConfig&);                               \
  template double clip_gradients(const std::vector<NamedParam<T>>&, double);                     \
  template EvalResult evaluate(LanguageModel<T>&, const PackedDataset&, std::size_t, bool);       \
  template class Trainer<T>;

MHC_INSTANTIATE_TRAINER(float)
MHC_INSTANTIATE_TRAINER(double)

}  // namespace mhc
