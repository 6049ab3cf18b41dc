#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mhc/error.hpp"
#include "mhc/ops.hpp"

namespace mhc {

/// Byte-level BPE in the GPT-2 file format, or the 257-symbol byte fallback.
class Tokenizer {
 public:
  static Tokenizer byte_fallback();
  /// vocab: JSON object token -> id. merges: one "a b" pair per line, in
  /// priority order; a leading "#version" line is skipped.
  static Tokenizer load_bpe(const std::filesystem::path& vocab_file,
                            const std::filesystem::path& merges_file);
  static Tokenizer from_strings(std::string_view vocab_json, std::string_view merges_text);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t vocab_size() const { return vocab_size_; }
  TokenId eos() const { return eos_; }
  TokenId pad() const { return pad_; }
  bool is_bpe() const { return bpe_ != nullptr; }

 private:
  struct Bpe;
  std::shared_ptr<const Bpe> bpe_;
  std::size_t vocab_size_ = 257;
  TokenId eos_ = 256;
  TokenId pad_ = 256;
};

/// The GPT-2 pretokenizer split, as byte ranges into `text`.
std::vector<std::string_view> pretokenize(std::string_view text);

/// GPT-2's printable surrogate for each byte value.
const std::vector<char32_t>& byte_to_unicode_table();

/// Non-overlapping next-token segments: sample i reads tokens[iT, iT+T] and
/// predicts the same window shifted by one.
class PackedDataset {
 public:
  PackedDataset() = default;
  PackedDataset(std::vector<TokenId> tokens, std::size_t seq_len);

  std::size_t samples() const { return samples_; }
  std::size_t seq_len() const { return seq_len_; }
  const std::vector<TokenId>& tokens() const { return tokens_; }

  std::span<const TokenId> input(std::size_t i) const;
  std::span<const TokenId> target(std::size_t i) const;

 private:
  std::vector<TokenId> tokens_;
  std::size_t seq_len_ = 0;
  std::size_t samples_ = 0;
};

PackedDataset pack(std::vector<TokenId> tokens, std::size_t seq_len);

struct Batch {
  std::vector<TokenId> x;  // [batch, time] row-major
  std::vector<TokenId> y;
  std::size_t batch = 0;
  std::size_t time = 0;
  std::size_t tokens() const { return batch * time; }
};

enum class BatchMode { train, eval };

/// Fixed batch plan over a dataset. Train mode drops the final partial batch,
/// eval mode keeps it.
class BatchPlan {
 public:
  BatchPlan(const PackedDataset& ds, std::size_t batch, BatchMode mode, bool shuffle,
            std::uint64_t seed);

  std::size_t size() const { return count_; }
  Batch operator[](std::size_t i) const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const PackedDataset* ds_;
  std::size_t batch_;
  std::size_t count_;
  std::vector<std::size_t> order_;
};

inline BatchPlan batches(const PackedDataset& ds, std::size_t batch, BatchMode mode, bool shuffle,
                         std::uint64_t seed) {
  return BatchPlan(ds, batch, mode, shuffle, seed);
}

/// Cache layout, little endian: u32 version, u32 vocab, u64 count, u32 ids.
inline constexpr std::uint32_t kTokenCacheVersion = 1;
void save_token_cache(const std::filesystem::path& path, std::span<const TokenId> ids,
                      std::size_t vocab);
/// DataError on a bad header, truncation or a vocabulary mismatch.
std::vector<TokenId> load_token_cache(const std::filesystem::path& path, std::size_t vocab);

std::string read_text_file(const std::filesystem::path& path);

/// Tokenizes a text file, reusing `cache` when it exists and matches.
std::vector<TokenId> tokenize_file(const Tokenizer& tok, const std::filesystem::path& text,
                                   const std::filesystem::path& cache = {});

/// English-like filler text for smoke runs: short sentences over a small
/// vocabulary with simple agreement patterns.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

}  // namespace mhc
