#include "relformer/model_config.hpp"

#include <string>

#include "relformer/errors.hpp"

namespace relformer {

namespace {

#define RELFORMER_MODEL_FIELDS(X) \
  X(d)                            \
  X(d_q)                          \
  X(d_v)                          \
  X(d_a)                          \
  X(d_w)                          \
  X(l)                            \
  X(l_roi)                        \
  X(encoder_layers)               \
  X(decoder_layers)               \
  X(m_c)                          \
  X(m_d)                          \
  X(heads)                        \
  X(mlp_hidden)                   \
  X(num_object_categories)        \
  X(num_predicates)

}  // namespace

void validate(const ModelConfig& cfg) {
#define CHECK_POSITIVE(name) \
  if (cfg.name == 0) throw ConfigError("model." #name " must be positive");
  RELFORMER_MODEL_FIELDS(CHECK_POSITIVE)
#undef CHECK_POSITIVE
  if (cfg.d % 2 != 0) throw ConfigError("model.d must be even (half appearance, half spatial)");
  if (cfg.d % cfg.heads != 0) throw ConfigError("model.heads must divide model.d");
  if (cfg.d_q % cfg.heads != 0) throw ConfigError("model.heads must divide model.d_q");
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json::object();
#define WRITE_FIELD(name) j[#name] = cfg.name;
  RELFORMER_MODEL_FIELDS(WRITE_FIELD)
#undef WRITE_FIELD
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
#define READ_FIELD(name)                                                                  \
  if (key == #name) {                                                                     \
    if (!value.is_number_unsigned()) throw ConfigError("model." #name " must be a non-negative integer"); \
    cfg.name = value.get<std::size_t>();                                                  \
    known = true;                                                                         \
  }
    RELFORMER_MODEL_FIELDS(READ_FIELD)
#undef READ_FIELD
    if (!known) throw ConfigError("model." + key + " is not a known field");
  }
}

}  // namespace relformer
