#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>

#include "relformer/metrics.hpp"
#include "relformer/model_config.hpp"
#include "relformer/synth.hpp"
#include "relformer/training.hpp"

namespace relformer {

// Exit codes shared by every command.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

struct DataConfig {
  std::string dataset;
  std::string embeddings;  // optional TRKF table, one row per object category
  SynthConfig synth;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalOptions eval;
  std::size_t top_k = kDefaultTopK;
};

nlohmann::ordered_json run_config_to_json(const RunConfig& cfg);
// Unknown keys and ill-typed values raise ConfigError naming the field.
void apply_run_config_json(const nlohmann::json& j, RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);
// "section.field=value" where value is JSON (bare strings are accepted).
void apply_override(const std::string& assignment, RunConfig& cfg);
void validate(const RunConfig& cfg);

// Parses and runs one command; never throws.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace relformer
