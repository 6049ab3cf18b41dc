#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mhc/error.hpp"
#include "mhc/keyvalue.hpp"
#include "mhc/tensor.hpp"

namespace mhc {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

/// One named array with its element type and raw little-endian bytes.
struct ArrayRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  bool operator==(const ArrayRecord&) const = default;
};

template <typename T>
ArrayRecord to_record(std::string name, const Tensor<T>& t);

/// Throws DataError when the element type or byte length does not match.
template <typename T>
Tensor<T> from_record(const ArrayRecord& r);

/// Layout (all integers little-endian):
///   "MHCSSMCK" u32 version
///   u64 len, config text
///   u32 count, param arrays; u32 count, optimizer arrays
///     array: u32 name_len, name, u8 dtype, u32 rank, u64 dims[rank],
///            u64 byte_len, bytes
///   u64 len, meta text (key = value lines)
///   u64 len, RNG state text
struct CheckpointBundle {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_text;
  std::vector<ArrayRecord> params;
  std::vector<ArrayRecord> optimizer;
  KeyValues meta;
  std::string rng_state;

  const ArrayRecord* find_param(const std::string& name) const;
  const ArrayRecord* find_optimizer(const std::string& name) const;

  bool operator==(const CheckpointBundle&) const = default;
};

std::string serialize(const CheckpointBundle& b);
CheckpointBundle deserialize(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const CheckpointBundle& b);
CheckpointBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace mhc
