#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "relformer/data.hpp"

namespace relformer {

struct Dataset {
  Vocab vocab;
  std::vector<VideoSample> videos;  // sorted by video_id
  bool operator==(const Dataset&) const = default;
};

// Little-endian float32 matrix with a 16-byte header:
//   bytes 0-3 "TRKF", 4-7 rows (u32), 8-11 cols (u32), 12-15 reserved (0).
struct FeatureMatrix {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;
};

void write_feature_matrix(const std::filesystem::path& path, const FeatureMatrix& m);
FeatureMatrix read_feature_matrix(const std::filesystem::path& path);

// Directory layout: vocab.json, video_<id>.json, video_<id>.trkf.
// Throws ParseError (file + field) on schema violations and ValidationError on
// invariant breaches.
Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);

}  // namespace relformer
