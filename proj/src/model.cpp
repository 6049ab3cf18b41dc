#include "mhc/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mhc/init.hpp"

namespace mhc {
namespace {

constexpr double kEmbeddingInitStd = 0.02;
// Distinct generator streams so variants built from one seed share their
// common parameters.
constexpr std::uint64_t kExpanderStream = 0x5eed0001;
constexpr std::uint64_t kAdapterStream = 0x5eed0002;
constexpr std::uint64_t kDropoutStream = 0x5eed0003;

Rng stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

template <typename T>
void require_finite(const Var<T>& v, const std::string& where) {
  for (T x : v.value().data()) {
    MHC_CHECK(std::isfinite(x), NumericError, "non-finite activation " + where);
  }
}

bool decays(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (name == "embedding" || name == "positional") return true;
  if (ends_with("norm.gain")) return false;
  return ends_with(".weight") || ends_with(".w_down") || ends_with(".w_up");
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::mhc_static: return "mhc_static";
    case Variant::mhc_adapters: return "mhc_adapters";
  }
  throw InternalError("unknown variant");
}

Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "mhc_static") return Variant::mhc_static;
  if (s == "mhc_adapters") return Variant::mhc_adapters;
  throw ConfigError("unknown variant '" + std::string(s) +
                    "' (expected baseline, mhc_static or mhc_adapters)");
}

void ModelConfig::validate() const {
  MHC_CHECK(vocab >= 1, ConfigError, "model.vocab must be >= 1");
  MHC_CHECK(d_model >= 1, ConfigError, "model.d_model must be >= 1");
  MHC_CHECK(seq_len >= 1, ConfigError, "model.seq_len must be >= 1");
  MHC_CHECK(streams >= 1, ConfigError, "model.streams must be >= 1");
  MHC_CHECK(conv_kernel >= 1, ConfigError, "model.conv_kernel must be >= 1");
  MHC_CHECK(!adapters() || adapter_rank >= 1, ConfigError, "model.adapter_rank must be >= 1");
  MHC_CHECK(sinkhorn_iters >= 1, ConfigError, "model.sinkhorn_iters must be >= 1");
  for (auto [key, rate] : {std::pair{"embed_dropout", embed_dropout},
                           std::pair{"block_dropout", block_dropout},
                           std::pair{"adapter_dropout", adapter_dropout}}) {
    MHC_CHECK(rate >= 0.0 && rate < 1.0, ConfigError,
              std::string("model.") + key + " must be in [0, 1)");
  }
}

KeyValues ModelConfig::to_key_values() const {
  return {
      {"model.variant", to_string(variant)},
      {"model.vocab", std::to_string(vocab)},
      {"model.d_model", std::to_string(d_model)},
      {"model.layers", std::to_string(layers)},
      {"model.seq_len", std::to_string(seq_len)},
      {"model.streams", std::to_string(streams)},
      {"model.conv_kernel", std::to_string(conv_kernel)},
      {"model.adapter_rank", std::to_string(adapter_rank)},
      {"model.sinkhorn_iters", std::to_string(sinkhorn_iters)},
      {"model.embed_dropout", format_double(embed_dropout)},
      {"model.block_dropout", format_double(block_dropout)},
      {"model.adapter_dropout", format_double(adapter_dropout)},
      {"model.seed", std::to_string(seed)},
  };
}

void ModelConfig::apply(const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    if (key.rfind("model.", 0) != 0) continue;
    const std::string field = key.substr(6);
    if (field == "variant") variant = parse_variant(value);
    else if (field == "vocab") vocab = parse_size(key, value);
    else if (field == "d_model") d_model = parse_size(key, value);
    else if (field == "layers") layers = parse_size(key, value);
    else if (field == "seq_len") seq_len = parse_size(key, value);
    else if (field == "streams") streams = parse_size(key, value);
    else if (field == "conv_kernel") conv_kernel = parse_size(key, value);
    else if (field == "adapter_rank") adapter_rank = parse_size(key, value);
    else if (field == "sinkhorn_iters") sinkhorn_iters = static_cast<int>(parse_i64(key, value));
    else if (field == "embed_dropout") embed_dropout = parse_double(key, value);
    else if (field == "block_dropout") block_dropout = parse_double(key, value);
    else if (field == "adapter_dropout") adapter_dropout = parse_double(key, value);
    else if (field == "seed") seed = parse_u64(key, value);
    else throw ConfigError("unknown config key " + key);
  }
}

template <typename T>
LanguageModel<T>::LanguageModel(const ModelConfig& cfg)
    : cfg_(cfg), dropout_rng_(stream_rng(cfg.seed, kDropoutStream)) {
  cfg_.validate();
  const std::size_t D = cfg_.d_model;
  const std::size_t n = cfg_.effective_streams();
  Rng rng(cfg_.seed);
  Rng expander_rng = stream_rng(cfg_.seed, kExpanderStream);
  Rng adapter_rng = stream_rng(cfg_.seed, kAdapterStream);

  embedding = parameter(init::normal<T>({cfg_.vocab, D}, kEmbeddingInitStd, rng));
  positional = parameter(init::normal<T>({cfg_.seq_len, D}, kEmbeddingInitStd, rng));
  layers.resize(cfg_.layers);
  for (auto& layer : layers) {
    layer.block = SsmBlockParams<T>::init(D, cfg_.conv_kernel, static_cast<T>(cfg_.block_dropout), rng);
  }
  if (cfg_.variant != Variant::baseline) {
    expander = ExpanderParams<T>::replicate(D, n, kExpanderInitNoise, expander_rng);
    aggregate_logits = parameter(Tensor<T>({n}));
    for (auto& layer : layers) layer.stream = StreamLayerParams<T>::init(n);
  }
  if (cfg_.adapters()) {
    const T rate = static_cast<T>(cfg_.adapter_dropout);
    for (auto& layer : layers) {
      layer.pre_adapter = AdapterParams<T>::init(D, cfg_.adapter_rank, n, rate, adapter_rng);
      layer.post_adapter = AdapterParams<T>::init(D, cfg_.adapter_rank, n, rate, adapter_rng);
    }
  }
  final_norm.gain = parameter(Tensor<T>({D}, T{1}));
  final_norm.epsilon = static_cast<T>(kRmsNormEpsilon);
  register_parameters();
}

template <typename T>
void LanguageModel<T>::register_parameters() {
  params_.clear();
  auto add = [&](const std::string& name, Var<T>& v) {
    params_.push_back({name, v, decays(name)});
  };
  add("embedding", embedding);
  add("positional", positional);
  if (cfg_.variant != Variant::baseline) {
    expander.visit([&](const std::string& k, Var<T>& v) { add("expander." + k, v); });
    add("aggregate_logits", aggregate_logits);
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    auto& layer = layers[l];
    layer.block.visit([&](const std::string& k, Var<T>& v) { add(prefix + "block." + k, v); });
    if (cfg_.variant == Variant::baseline) continue;
    layer.stream.visit([&](const std::string& k, Var<T>& v) { add(prefix + "stream." + k, v); });
    if (!cfg_.adapters()) continue;
    layer.pre_adapter.visit(
        [&](const std::string& k, Var<T>& v) { add(prefix + "pre_adapter." + k, v); });
    layer.post_adapter.visit(
        [&](const std::string& k, Var<T>& v) { add(prefix + "post_adapter." + k, v); });
  }
  add("final_norm.gain", final_norm.gain);
}

template <typename T>
Var<T> LanguageModel<T>::forward(std::span<const TokenId> tokens, std::size_t batch,
                                 std::size_t time, bool training) {
  MHC_CHECK(tokens.size() == batch * time && batch >= 1 && time >= 1, ShapeError,
            "forward: " + std::to_string(tokens.size()) + " tokens for batch " +
                std::to_string(batch) + " x time " + std::to_string(time));
  MHC_CHECK(time <= cfg_.seq_len, ShapeError,
            "forward: sequence length " + std::to_string(time) + " exceeds model.seq_len " +
                std::to_string(cfg_.seq_len));
  Var<T> h = ops::add_broadcast(ops::embedding(embedding, tokens, batch, time),
                                ops::take_rows(positional, time));
  h = ops::dropout(h, static_cast<T>(cfg_.embed_dropout), dropout_rng_, training);
  require_finite(h, "after embedding");

  if (cfg_.variant == Variant::baseline) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      h = ops::add(h, ssm_block_forward(h, layers[l].block, training, dropout_rng_));
      require_finite(h, "in layer " + std::to_string(l));
    }
  } else {
    const std::size_t n = cfg_.effective_streams();
    StreamState<T> x = expand(h, expander, n);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& layer = layers[l];
      const auto w_pre = simplex_weights(layer.stream.pre_logits);
      const auto w_post = simplex_weights(layer.stream.post_logits);
      const auto mix = sinkhorn_project(layer.stream.res_logits, cfg_.sinkhorn_iters);
      if (cfg_.adapters()) x = pre_adapter(x, layer.pre_adapter, training, dropout_rng_);
      Var<T> y = ssm_block_forward(pre_mix(x, w_pre), layer.block, training, dropout_rng_);
      StreamState<T> delta =
          cfg_.adapters()
              ? scatter_streams(post_adapter(y, layer.post_adapter, training, dropout_rng_), w_post)
              : scatter(y, w_post);
      x = layer_update(x, delta, mix);
      require_finite(x.x, "in layer " + std::to_string(l));
    }
    h = aggregate(x, simplex_weights(aggregate_logits));
  }
  Var<T> logits = ops::linear_nt(rms_norm(h, final_norm), embedding);
  require_finite(logits, "in logits");
  return logits;
}

template <typename T>
std::size_t LanguageModel<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.var.size();
  return total;
}

template <typename T>
void LanguageModel<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template <typename T>
std::vector<ArrayRecord> LanguageModel<T>::export_parameters() const {
  std::vector<ArrayRecord> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(to_record(p.name, p.var.value()));
  return out;
}

template <typename T>
void LanguageModel<T>::import_parameters(const std::vector<ArrayRecord>& records) {
  std::map<std::string, const ArrayRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  MHC_CHECK(by_name.size() == params_.size(), DataError,
            "checkpoint holds " + std::to_string(by_name.size()) + " parameters, model has " +
                std::to_string(params_.size()));
  for (auto& p : params_) {
    auto it = by_name.find(p.name);
    MHC_CHECK(it != by_name.end(), DataError, "checkpoint is missing parameter " + p.name);
    Tensor<T> t = from_record<T>(*it->second);
    MHC_CHECK(t.shape() == p.var.shape(), DataError,
              "checkpoint parameter " + p.name + " has shape " + shape_str(t.shape()) +
                  ", model expects " + shape_str(p.var.shape()));
    std::copy(t.data().begin(), t.data().end(), p.var.mutable_value().data().begin());
  }
}

template <typename T>
template <typename U>
std::size_t LanguageModel<T>::load_matching(const LanguageModel<U>& other) {
  std::map<std::string, const Var<U>*> by_name;
  for (const auto& p : other.parameters()) by_name[p.name] = &p.var;
  std::size_t copied = 0;
  for (auto& p : params_) {
    auto it = by_name.find(p.name);
    if (it == by_name.end() || it->second->shape() != p.var.shape()) continue;
    const auto src = it->second->value().data();
    auto dst = p.var.mutable_value().data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
    ++copied;
  }
  return copied;
}

template <typename T>
Var<T> lm_loss(const Var<T>& logits, std::span<const TokenId> targets) {
  return ops::cross_entropy(logits, targets);
}

template <typename T>
std::vector<CensusRow> parameter_census(const LanguageModel<T>& model) {
  std::vector<CensusRow> rows;
  for (const auto& p : model.parameters()) rows.push_back({p.name, p.var.shape(), p.var.size()});
  return rows;
}

template class LanguageModel<float>;
template class LanguageModel<double>;
template std::size_t LanguageModel<float>::load_matching(const LanguageModel<float>&);
template std::size_t LanguageModel<float>::load_matching(const LanguageModel<double>&);
template std::size_t LanguageModel<double>::load_matching(const LanguageModel<float>&);
template std::size_t LanguageModel<double>::load_matching(const LanguageModel<double>&);
template Var<float> lm_loss(const Var<float>&, std::span<const TokenId>);
template Var<double> lm_loss(const Var<double>&, std::span<const TokenId>);
template std::vector<CensusRow> parameter_census(const LanguageModel<float>&);
template std::vector<CensusRow> parameter_census(const LanguageModel<double>&);

}  // namespace mhc
