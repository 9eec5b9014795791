#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "memreg/tensor.hpp"

namespace memreg {

/// Malformed checkpoint / container data; carries the byte offset where
/// parsing failed.
struct FormatError : std::runtime_error {
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  std::size_t byte_offset;
};

/// A recognizable file whose format_version this build cannot read.
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// On-disk training state: named float tensors plus a few header fields.
///
/// Byte layout (all integers little-endian):
///   magic "MRSEGCK1" (8 bytes)
///   u32 format_version
///   u64 config_hash
///   u64 iteration
///   u32 record_count
///   then per record:
///     u32 name_len, name bytes,
///     u32 ndim, u64 dims[ndim],
///     u64 value_count (product of dims), f32 values[value_count]
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint64_t config_hash = 0;
  std::uint64_t iteration = 0;
  std::map<std::string, std::pair<Shape, std::vector<float>>> records;

  void add(const std::string& name, Shape shape, std::vector<float> values);
  void add_tensor(const std::string& name, const TensorF& t);
  void add_scalar(const std::string& name, float v) { add(name, {}, {v}); }

  const std::pair<Shape, std::vector<float>>& at(const std::string& name) const;
  bool has(const std::string& name) const { return records.count(name) != 0; }
  float scalar(const std::string& name) const;

  /// Copies a stored record's values into an existing tensor; shapes
  /// must match exactly.
  void load_into(const std::string& name, TensorF& t) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace memreg
