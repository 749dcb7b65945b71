#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "patchlm/model.hpp"
#include "patchlm/tensor.hpp"

namespace patchlm {

// Container layout (all integers little-endian):
//   magic "PLMCKPT\0" | u32 version | u64 config length | config JSON bytes |
//   u64 tensor count | per tensor: u64 name length, name bytes, u64 rank,
//   rank x u64 dims, IEEE-754 doubles.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_json;
  std::map<std::string, Tensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Writes to a sibling temp file and renames it into place, so a failed write
// leaves any previous file at `path` untouched.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_params(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& path);

}  // namespace patchlm
