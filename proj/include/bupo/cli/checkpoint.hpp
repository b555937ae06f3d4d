#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bupo/numeric/tensor.hpp"

namespace bupo::cli {

// Binary layout, little-endian throughout:
//   "BUPOCKPT" u32 version
//   u32 count, then per entry: str key, str value          (metadata)
//   u32 count, then per tensor: str name, u32 rank, u64 dims[rank],
//       f64 payload[prod dims], u32 crc32(payload)
//   u32 crc32 of every preceding byte
// where str is a u64 length followed by the bytes.
inline constexpr char kCheckpointMagic[] = "BUPOCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  numeric::Tensor tensor;  // may be empty (rank 0)
  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<TensorRecord> tensors;

  // CorruptDataError when absent.
  const numeric::Tensor& tensor(const std::string& name) const;
  const std::string& value(const std::string& key) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
// CorruptDataError on a bad magic, unknown version, truncation, trailing
// bytes, duplicate names or any checksum mismatch.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Per-tensor CRC-32 as stored in the file.
std::uint32_t payload_checksum(const numeric::Tensor& t);

}  // namespace bupo::cli
