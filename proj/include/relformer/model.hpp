#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "relformer/data.hpp"
#include "relformer/model_config.hpp"
#include "relformer/nn.hpp"
#include "relformer/relation_head.hpp"
#include "relformer/relformer.hpp"

namespace relformer {

struct ModelOutput {
  DecoderOutput decoder;
  std::vector<Link> links;
  Tensor probs;  // [m, |C_rel| + 1]
};

// Feature initialization, encoder, decoder and relation head with their
// parameters, plus the classeme table and frequency bias buffers.
class RelformerModel {
 public:
  RelformerModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const AnchorSet& anchors() const { return anchors_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const ClassemeTable& classemes() const { return classemes_; }
  void set_classemes(ClassemeTable table);
  const FreqBias& freq_bias() const { return bias_; }
  void set_freq_bias(FreqBias bias);

  // Throws ShapeError for a video without tracklets.
  ModelOutput forward(const VideoSample& video) const;
  // Graph-free inference; a video without tracklets yields no relations.
  VideoPrediction predict(const VideoSample& video, std::size_t top_k = kDefaultTopK) const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = nlohmann::json::object()) const;
  // Throws CheckpointError on malformed or incompatible files.
  static RelformerModel load(const std::filesystem::path& path);

 private:
  ModelConfig cfg_;
  AnchorSet anchors_;
  ParamStore params_;
  ClassemeTable classemes_;
  FreqBias bias_;
};

}  // namespace relformer
