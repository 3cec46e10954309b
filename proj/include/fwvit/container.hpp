#pragma once

// Named-tensor container shared by checkpoints, adapter exports and probe
// records.
//
//   "FWVT" | version u32 | count u32 |
//   per tensor: name_len u16, name, flags u8, rank u8, dims u32 x rank,
//               payload f32 x numel |
//   crc32 u32 over everything after the magic
//
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fwvit/tensor.hpp"

namespace fwvit {

inline constexpr std::uint32_t kContainerVersion = 1;

enum TensorFlags : std::uint8_t { kFlagFrozen = 1, kFlagAdapter = 2 };

struct StoredTensor {
  std::string name;
  std::uint8_t flags = 0;
  Tensor value;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TopologyMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

std::string encode_container(const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> decode_container(const std::string& bytes, const std::string& origin = "buffer");

void write_container(const std::filesystem::path& path, const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> read_container(const std::filesystem::path& path);

// Writes through a temporary sibling and renames, so readers never see a
// half-written file.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace fwvit
