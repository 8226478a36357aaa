#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "relformer/data.hpp"
#include "relformer/model_config.hpp"
#include "relformer/nn.hpp"

namespace relformer {

// Word embeddings of the object categories, [|C_obj|, d_w].
struct ClassemeTable {
  Tensor embeddings;
};

// Seeded N(0, 1/d_w) embeddings.
ClassemeTable random_classeme_table(std::size_t num_objects, std::size_t d_w, std::uint64_t seed);
// Reads a TRKF matrix with one row per object category.
ClassemeTable load_classeme_table(const std::filesystem::path& path, std::size_t num_objects);

// E^T p, [d_w].
Tensor classeme(std::span<const double> probs, const Tensor& embeddings);
// One classeme row per tracklet, [n, d_w].
Tensor classeme_matrix(std::span<const Tracklet> tracklets, const Tensor& embeddings);

// Log-probabilities of predicates per (subject category, object category).
struct FreqBias {
  std::size_t num_objects = 0;
  std::size_t num_predicates = 0;
  std::vector<double> log_probs;  // [num_objects, num_objects, num_predicates]

  std::span<const double> fiber(std::size_t subject, std::size_t object) const {
    return std::span<const double>(log_probs).subspan((subject * num_objects + object) * num_predicates,
                                                      num_predicates);
  }
  Tensor as_tensor() const;
  static FreqBias from_tensor(const Tensor& t);
};

inline constexpr double kFreqBiasSmoothing = 1e-3;

// Uniform fibers before any counting.
FreqBias uniform_freq_bias(std::size_t num_objects, std::size_t num_predicates);
// Counts ground-truth (subject category, object category, predicate) triples.
FreqBias build_freq_bias(std::span<const VideoSample> videos, std::size_t num_objects,
                         std::size_t num_predicates, double eps = kFreqBiasSmoothing);

struct Link {
  std::size_t subject = 0;
  std::size_t object = 0;
  bool operator==(const Link&) const = default;
};

// Per query, the argmax tracklet of each role; ties go to the lower index.
std::vector<Link> binarize_links(const Tensor& attention);

// Parameters: head.mlp_q ((d_q + 2 d_w) -> hidden -> |C_rel| + 1).
void init_head_params(ParamStore& store, Rng& rng, const ModelConfig& cfg);

// Probabilities over predicates plus a trailing background class, [m, |C_rel| + 1].
Tensor classify_predicates(const Tensor& queries, std::span<const Link> links, const Tensor& classemes,
                           std::span<const int> categories, const FreqBias& bias, const ParamScope& head,
                           const ModelConfig& cfg);

struct RelationTriplet {
  int subject_tid = 0;
  int object_tid = 0;
  int predicate = 0;
  double score = 0.0;
  TimeSlot slot;
  bool operator==(const RelationTriplet&) const = default;
};

struct VideoPrediction {
  std::string video_id;
  std::vector<RelationTriplet> relations;
};

inline constexpr std::size_t kDefaultTopK = 10;

// Top-k non-background categories per query become candidates; pairs that are
// self-linked or temporally disjoint are dropped.
std::vector<RelationTriplet> infer_triplets(const Tensor& probs, std::span<const Link> links,
                                            std::span<const Tracklet> tracklets,
                                            std::size_t top_k = kDefaultTopK);

// Keeps the best-scored triplet per (predicate, subject, object), ordered by
// descending score, then by key.
std::vector<RelationTriplet> filter_duplicates(std::vector<RelationTriplet> triplets);

// Throws UsageError when the predictions are not for the same video.
VideoPrediction ensemble_merge(std::span<const VideoPrediction> predictions);

nlohmann::ordered_json prediction_to_json(const VideoPrediction& p);
VideoPrediction prediction_from_json(const nlohmann::json& j);

}  // namespace relformer
