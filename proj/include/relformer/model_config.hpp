#pragma once

#include <cstddef>

#include <json.hpp>

namespace relformer {

// Architecture hyper-parameters. Defaults are the full-size settings.
struct ModelConfig {
  std::size_t d = 512;         // tracklet feature width
  std::size_t d_q = 512;       // predicate query width
  std::size_t d_v = 512;       // cross-attention value width
  std::size_t d_a = 1024;      // appearance feature width (input)
  std::size_t d_w = 300;       // word embedding width
  std::size_t l = 4;           // encoder-input pooling length
  std::size_t l_roi = 7;       // temporal RoI pooling length
  std::size_t encoder_layers = 6;
  std::size_t decoder_layers = 4;
  std::size_t m_c = 16;        // anchor centers
  std::size_t m_d = 12;        // anchor durations
  std::size_t heads = 8;
  std::size_t mlp_hidden = 512;
  std::size_t num_object_categories = 80;
  std::size_t num_predicates = 50;

  std::size_t num_queries() const { return m_c * m_d; }
  bool operator==(const ModelConfig&) const = default;
};

// Throws ConfigError naming the first invalid field.
void validate(const ModelConfig& cfg);

void to_json(nlohmann::json& j, const ModelConfig& cfg);
// Missing keys keep their current value.
void from_json(const nlohmann::json& j, ModelConfig& cfg);

}  // namespace relformer
