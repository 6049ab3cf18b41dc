#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mhc/corpus.hpp"
#include "mhc/model.hpp"

namespace mhc {

enum class DecayPolicy { matrices, all, none };

std::string to_string(DecayPolicy p);
DecayPolicy parse_decay_policy(std::string_view s);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 16;
  double lr = 3e-4;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  std::size_t eval_interval = 500;
  std::size_t log_interval = 50;
  bool mixed_precision = false;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t max_steps = 0;  // 0: epochs decide
  DecayPolicy decay = DecayPolicy::matrices;
  std::size_t nonfinite_limit = 20;
  double initial_loss_scale = 65536.0;
  std::size_t scale_growth_interval = 2000;

  void validate() const;
  /// Keys are `train.<field>`.
  KeyValues to_key_values() const;
  void apply(const KeyValues& kv);

  bool operator==(const TrainConfig&) const = default;
};

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  double loss_scale = 1.0;
  std::uint64_t clean_steps = 0;
  std::uint64_t skipped_steps = 0;

  void init(const std::vector<NamedParam<T>>& params);
};

/// PyTorch-style AdamW: p <- p (1 - lr wd) for decaying params, then the
/// bias-corrected Adam update. `decay[i]` selects decaying parameters.
/// NumericError on non-finite gradients.
template <typename T>
void adamw_step(const std::vector<NamedParam<T>>& params, const std::vector<bool>& decay,
                OptimizerState<T>& state, const AdamWConfig& h);

/// Global 2-norm over every gradient; scales all gradients by max_norm/norm
/// when the norm exceeds max_norm. Returns the pre-clip norm.
template <typename T>
double clip_gradients(const std::vector<NamedParam<T>>& params, double max_norm);

struct MetricsRecord {
  long long step = 0;  // -1 marks the Final row
  std::string split;   // "train" or "valid"
  double loss = 0;
  double ppl = 0;
  double elapsed_s = 0;
};

class MetricsSink {
 public:
  virtual ~MetricsSink() = default;
  virtual void record(const MetricsRecord& r) = 0;
};

/// Append-only CSV: step,split,loss,ppl,elapsed_s.
class CsvMetricsSink : public MetricsSink {
 public:
  explicit CsvMetricsSink(const std::filesystem::path& path);
  void record(const MetricsRecord& r) override;

 private:
  std::ofstream out_;
};

class ConsoleMetricsSink : public MetricsSink {
 public:
  explicit ConsoleMetricsSink(std::ostream& out, std::string tag = {})
      : out_(&out), tag_(std::move(tag)) {}
  void record(const MetricsRecord& r) override;

 private:
  std::ostream* out_;
  std::string tag_;
};

class MemoryMetricsSink : public MetricsSink {
 public:
  void record(const MetricsRecord& r) override { rows.push_back(r); }
  std::vector<MetricsRecord> rows;
};

struct EvalResult {
  double loss = 0;
  double ppl = 0;
  std::size_t tokens = 0;
};

/// Token-weighted mean cross-entropy over every sample, dropout off, no tape.
template <typename T>
EvalResult evaluate(LanguageModel<T>& model, const PackedDataset& data, std::size_t batch,
                    bool mixed_precision = false);

struct StepResult {
  double loss = 0;
  double grad_norm = 0;
  bool applied = false;
};

struct TrainSummary {
  std::uint64_t steps = 0;
  EvalResult final_eval;
  std::uint64_t skipped_steps = 0;
  double final_loss_scale = 1.0;
};

template <typename T>
class Trainer {
 public:
  Trainer(LanguageModel<T>& model, TrainConfig tc, const PackedDataset& train,
          const PackedDataset& valid);

  /// One optimizer step on `b`. Non-finite losses and, under mixed
  /// precision, overflowing gradients skip the update.
  StepResult step(const Batch& b);

  /// Runs from the current step to total_steps(). Evaluates every
  /// eval_interval steps and once at the end (step -1); checkpoints go to
  /// `ckpt_dir` when set.
  TrainSummary run(const std::vector<MetricsSink*>& sinks,
                   const std::optional<std::filesystem::path>& ckpt_dir = std::nullopt);

  std::uint64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::uint64_t total_steps() const;
  /// Loop steps taken, including skipped ones.
  std::uint64_t global_step() const { return global_step_; }
  const OptimizerState<T>& optimizer() const { return state_; }
  const TrainConfig& config() const { return tc_; }

  /// Batch for a global step: epoch permutation seeded from (seed, epoch).
  Batch batch_for_step(std::uint64_t step) const;

  /// Full training state: parameters, moments, loss scale, step, dropout RNG.
  CheckpointBundle snapshot() const;
  void restore(const CheckpointBundle& bundle);

 private:
  const BatchPlan& plan_for_epoch(std::uint64_t epoch) const;

  LanguageModel<T>* model_;
  TrainConfig tc_;
  const PackedDataset* train_;
  const PackedDataset* valid_;
  OptimizerState<T> state_;
  std::vector<bool> decay_;
  std::uint64_t steps_per_epoch_ = 0;
  std::uint64_t global_step_ = 0;
  std::size_t nonfinite_streak_ = 0;
  mutable std::uint64_t cached_epoch_ = UINT64_MAX;
  mutable std::unique_ptr<BatchPlan> cached_plan_;
};

/// Config text stored in checkpoints: model keys then train keys.
std::string format_run_config(const ModelConfig& mc, const TrainConfig& tc);

}  // namespace mhc
