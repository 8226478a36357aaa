#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "relformer/data.hpp"
#include "relformer/dataset_io.hpp"

namespace relformer {

// Geometric predicates the generator can plant. Rules are evaluated on box
// centers over every frame of the relation slot.
enum class SynthPredicate {
  kTowards,   // center distance strictly decreasing
  kAway,      // center distance strictly increasing
  kAbove,     // subject center y < object center y - 0.1
  kBelow,     // subject center y > object center y + 0.1
  kLeftOf,    // subject center x < object center x - 0.1
  kRightOf,   // subject center x > object center x + 0.1
  kFaster,    // subject mean speed > 2x object mean speed
  kSlower,    // subject mean speed < 0.5x object mean speed
};

inline constexpr std::size_t kSynthPredicateCount = 8;

const std::vector<std::string>& synth_predicate_names();

struct SynthConfig {
  int videos = 32;
  int frame_count = 32;
  int num_object_categories = 8;
  int num_predicates = 6;
  int feature_dim = 32;
  int min_objects = 4;
  int max_objects = 6;
  int distractors = 3;
  // Scales box jitter, slot jitter, class-probability noise and feature noise.
  // Zero means detected tracklets reproduce the ground truth exactly.
  double noise = 0.5;
  std::uint64_t seed = 0;
};

// Throws ConfigError on infeasible settings.
void validate(const SynthConfig& cfg);

Dataset synth_generate(const SynthConfig& cfg);

// Whether `predicate` holds between subject and object boxes over aligned
// frames (both spans cover the same frames).
bool synth_rule_holds(SynthPredicate predicate, std::span<const Box> subject,
                      std::span<const Box> object);

}  // namespace relformer
