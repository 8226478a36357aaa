#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "relformer/tensor.hpp"

namespace relformer {

inline constexpr const char* kCheckpointFormat = "relformer-ckpt/1";

struct CheckpointEntry {
  std::string name;
  std::string kind;  // "param" or "buffer"
  Tensor value;
};

struct CheckpointData {
  nlohmann::json meta;
  std::vector<CheckpointEntry> entries;
};

// Writes `<path>` (JSON manifest) and `<path>.bin` (little-endian float64
// blob, row-major, concatenated in manifest order). Both files are written to
// temporaries and renamed into place.
void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

// Atomic text write helper shared with other writers.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace relformer
