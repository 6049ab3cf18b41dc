#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "mhc/fair_bench.hpp"

namespace mhc {

struct DataConfig {
  std::string tokenizer = "byte";  // byte | gpt2
  std::string vocab_file;
  std::string merges_file;
  std::string train;
  std::string valid;
  std::string cache_dir;
  std::size_t synthetic_bytes = 0;  // > 0 replaces the split files with generated text
  std::uint64_t synthetic_seed = 0;

  void validate() const;
  KeyValues to_key_values() const;
  void apply(const KeyValues& kv);
};

struct RunConfig {
  std::string out = "runs";

  KeyValues to_key_values() const;
  void apply(const KeyValues& kv);
};

/// Every section resolved with precedence defaults < file < flags. A baseline
/// without an explicit model.streams resolves to one stream.
struct ResolvedConfig {
  ModelConfig model;
  TrainConfig train;
  BenchConfig bench;
  DataConfig data;
  RunConfig run;
  KeyValues explicit_keys;  // keys set by the file or flags

  bool is_explicit(const std::string& key) const { return explicit_keys.count(key) > 0; }
  KeyValues to_key_values() const;
  void validate() const;
};

/// ConfigError for unknown sections or keys, or a baseline with an explicit
/// model.streams above one.
/// `base` (checkpoint settings) sits below the file and does not count as
/// explicit.
ResolvedConfig resolve_config(const KeyValues& file, const KeyValues& flags,
                              const KeyValues& base = {});

struct LoadedCorpus {
  Tokenizer tokenizer;
  PackedDataset train;
  PackedDataset valid;
};

LoadedCorpus load_corpus(const DataConfig& data, std::size_t seq_len);

/// Sets model.vocab from the tokenizer unless it was given explicitly, in
/// which case a mismatch is a ConfigError.
void reconcile_vocab(ResolvedConfig& cfg, const Tokenizer& tok);

/// Reads <run_dir>/metrics.csv and writes <run_dir>/curves.csv with columns
/// variant,step,val_loss,ppl (Final row as step -1).
void emit_training_curves(const std::filesystem::path& run_dir);

/// `<out>/<command>-<tag>-<YYYYmmdd-HHMMSS>`, suffixed when it already exists.
std::filesystem::path make_run_dir(const std::filesystem::path& out, const std::string& command,
                                   const std::string& tag);

/// Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 shape or internal.
int exit_code(ErrorKind kind);

/// Invariant suite: one PASS/FAIL line per property. True when all pass.
bool run_selftest(std::ostream& out);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mhc
