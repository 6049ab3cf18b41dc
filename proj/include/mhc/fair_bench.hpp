#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mhc/trainer.hpp"

namespace mhc {

struct BenchConfig {
  std::size_t warmup_steps = 5;
  std::size_t timed_steps = 20;
  std::size_t batch = 0;    // 0: the training batch
  std::size_t seq_len = 0;  // 0: model.seq_len
  std::uint64_t seed = 0;

  void validate() const;
  /// Keys are `bench.<field>`.
  KeyValues to_key_values() const;
  void apply(const KeyValues& kv);

  bool operator==(const BenchConfig&) const = default;
};

struct BenchReport {
  std::string model;
  double val_loss = 0;
  double ppl = 0;
  double tokens_per_sec = 0;
  std::int64_t peak_mem_bytes = 0;

  double pre_val_loss = 0;  // evaluation before the timed region
  bool restored_exact = false;
  std::size_t warmup_steps = 0;
  std::size_t timed_steps = 0;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  double wall_seconds = 0;
};

/// Snapshot, warm up, time full optimizer steps on uniform random tokens,
/// restore, verify the restore bit-exactly, then evaluate `valid` from the
/// restored weights. InternalError when the restore or the pre/post
/// evaluation differ; NumericError when the timed region is under 1 ms.
template <typename T>
BenchReport run_fair_bench(Trainer<T>& trainer, LanguageModel<T>& model, const PackedDataset& valid,
                           const BenchConfig& bc, const std::string& name);

std::string to_json_line(const BenchReport& r);
BenchReport bench_report_from_json(const std::string& line);
void append_bench_jsonl(const std::filesystem::path& path, const BenchReport& r);
std::vector<BenchReport> read_bench_jsonl(const std::filesystem::path& path);

/// Console table with the columns Model, Val Loss, PPL, Tokens/sec, Peak Mem.
std::string format_bench_table(const std::vector<BenchReport>& reports);

struct Delta {
  double abs = 0;  // row - reference
  double pct = 0;  // 100 * abs / reference
};

struct MetricDeltas {
  Delta val_loss, ppl, tokens_per_sec, peak_mem;
};

struct ComparisonRow {
  BenchReport report;
  MetricDeltas vs_first;
  MetricDeltas vs_previous;
};

MetricDeltas deltas(const BenchReport& row, const BenchReport& reference);

/// Orders rows baseline, mhc_static, mhc_adapters (names containing those
/// tags; others keep their input order at the end) and attaches deltas
/// against the first row and the preceding row. ConfigError for < 2 reports.
std::vector<ComparisonRow> compare_variants(std::vector<BenchReport> reports);
std::string format_comparison_table(const std::vector<ComparisonRow>& rows);

}  // namespace mhc
