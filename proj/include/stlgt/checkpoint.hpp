#pragma once

// Versioned parameter file:
//
//   "STLGTCKP"            8 bytes magic
//   version               u32 little-endian (currently 1)
//   header_length         u64 little-endian
//   header                JSON: {"meta": {k: v}, "tensors": [{"name", "shape": [r, c], "offset"}]}
//   payload               row-major little-endian f64 values; offsets are bytes from payload start

#include <filesystem>
#include <map>
#include <string>

#include "stlgt/tensor.hpp"

namespace stlgt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, Matrix> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace stlgt
