#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhc/adapters.hpp"
#include "mhc/checkpoint.hpp"
#include "mhc/keyvalue.hpp"
#include "mhc/ssm.hpp"
#include "mhc/streams.hpp"

namespace mhc {

enum class Variant { baseline, mhc_static, mhc_adapters };

std::string to_string(Variant v);
Variant parse_variant(std::string_view s);

struct ModelConfig {
  Variant variant = Variant::baseline;
  std::size_t vocab = 50257;
  std::size_t d_model = 512;
  std::size_t layers = 8;
  std::size_t seq_len = 256;
  std::size_t streams = 4;
  std::size_t conv_kernel = kDefaultConvKernel;
  std::size_t adapter_rank = kDefaultAdapterRank;
  int sinkhorn_iters = kDefaultSinkhornIterations;
  double embed_dropout = 0.1;
  double block_dropout = 0.1;
  double adapter_dropout = 0.1;
  std::uint64_t seed = 0;

  /// 1 for the baseline regardless of `streams`.
  std::size_t effective_streams() const {
    return variant == Variant::baseline ? 1 : streams;
  }
  bool adapters() const { return variant == Variant::mhc_adapters; }

  void validate() const;

  /// Keys are `model.<field>`.
  KeyValues to_key_values() const;
  /// Applies `model.*` keys; other prefixes are ignored, unknown model keys
  /// are a ConfigError.
  void apply(const KeyValues& kv);

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
  bool decay = false;  // matrices and embeddings only
};

struct CensusRow {
  std::string name;
  Shape shape;
  std::size_t count = 0;
};

template <typename T>
struct LayerParams {
  SsmBlockParams<T> block;
  StreamLayerParams<T> stream;    // mHC variants
  AdapterParams<T> pre_adapter;   // adapter variant
  AdapterParams<T> post_adapter;  // adapter variant
};

/// The three variants behind one interface. The vocabulary head is tied:
/// logits = FinalNorm(h) E^T, reading the same `embedding` Var.
template <typename T>
class LanguageModel {
 public:
  explicit LanguageModel(const ModelConfig& cfg);
  LanguageModel(const LanguageModel&) = delete;  // parameters would alias
  LanguageModel& operator=(const LanguageModel&) = delete;
  LanguageModel(LanguageModel&&) = default;
  LanguageModel& operator=(LanguageModel&&) = default;

  const ModelConfig& config() const { return cfg_; }

  /// tokens is row-major [batch, time]; returns logits [batch, time, V].
  /// Throws DataError for ids outside [0, V), ShapeError when time exceeds
  /// the positional table, NumericError naming the layer on non-finite
  /// activations.
  Var<T> forward(std::span<const TokenId> tokens, std::size_t batch, std::size_t time,
                 bool training);

  /// Fixed-order parameter list. Vars alias the model's storage.
  const std::vector<NamedParam<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  Rng& dropout_rng() { return dropout_rng_; }

  /// Writes every parameter as an array record.
  std::vector<ArrayRecord> export_parameters() const;
  /// Strict load: every parameter must be present with the same shape and
  /// element type. Values are copied into the existing storage.
  void import_parameters(const std::vector<ArrayRecord>& records);
  /// Copies values of same-named, same-shaped parameters from `other`.
  /// Returns how many parameters were copied.
  template <typename U>
  std::size_t load_matching(const LanguageModel<U>& other);

  Var<T> embedding;   // [V, D]
  Var<T> positional;  // [T, D]
  ExpanderParams<T> expander;
  Var<T> aggregate_logits;  // [n]
  std::vector<LayerParams<T>> layers;
  RmsNormParams<T> final_norm;

 private:
  void register_parameters();

  ModelConfig cfg_;
  std::vector<NamedParam<T>> params_;
  Rng dropout_rng_;
};

/// Mean token cross-entropy of logits [B, T, V] against targets [B*T].
template <typename T>
Var<T> lm_loss(const Var<T>& logits, std::span<const TokenId> targets);

inline double perplexity(double loss) { return std::exp(loss); }

template <typename T>
std::vector<CensusRow> parameter_census(const LanguageModel<T>& model);

}  // namespace mhc
