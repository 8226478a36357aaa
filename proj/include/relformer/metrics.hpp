#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "relformer/data.hpp"
#include "relformer/dataset_io.hpp"
#include "relformer/relation_head.hpp"

namespace relformer {

struct EvalOptions {
  double viou_threshold = 0.5;
  std::vector<std::size_t> recall_ks{50, 100};
  std::vector<std::size_t> precision_ks{1, 5, 10};
};

void validate(const EvalOptions& opts);

// Predicate and both categories agree, and each predicted tracklet (restricted
// to the predicted slot) reaches the vIoU threshold with its ground-truth
// object restricted to the relation slot.
bool match_relation(const RelationTriplet& pred, const GtRelation& gt, const VideoSample& video,
                    double viou_threshold = 0.5);

// All-point interpolated AP of a ranked hit list against `num_gt` positives.
double average_precision(const std::vector<bool>& hits, std::size_t num_gt);

// Greedy score-order matching; hits[k] tells whether prediction k matched a
// ground-truth relation not claimed earlier.
std::vector<bool> match_detections(std::span<const RelationTriplet> preds, const VideoSample& video,
                                   double viou_threshold);

struct KValue {
  std::size_t k = 0;
  double value = 0.0;
};

struct VideoScores {
  std::string video_id;
  bool has_gt = false;
  double ap = 0.0;
  std::vector<KValue> recall;
  std::vector<KValue> precision;
};

struct RelDetScores {
  double map = 0.0;
  std::vector<KValue> recall;
};

struct RelTagScores {
  std::vector<KValue> precision;
};

// Predictions are aligned with `videos` and sorted by descending score.
// Videos without ground-truth relations are left out of the averages.
RelDetScores reldet_scores(std::span<const VideoPrediction> preds, std::span<const VideoSample> videos,
                           const EvalOptions& opts = {}, std::vector<VideoScores>* per_video = nullptr);
RelTagScores reltag_scores(std::span<const VideoPrediction> preds, std::span<const VideoSample> videos,
                           const EvalOptions& opts = {}, std::vector<VideoScores>* per_video = nullptr);

// Detected tracklets against ground-truth objects, per-category AP averaged
// over categories that occur in the ground truth.
double tracklet_map(std::span<const VideoSample> videos, double viou_threshold = 0.5);

struct EvalReport {
  double reldet_map = 0.0;
  std::vector<KValue> recall;
  std::vector<KValue> precision;
  double tracklet_map = 0.0;
  std::vector<VideoScores> per_video;

  double recall_at(std::size_t k) const;
  double precision_at(std::size_t k) const;
};

// Throws UsageError when predictions and videos are not aligned by id.
EvalReport evaluate(std::span<const VideoPrediction> preds, const Dataset& dataset, const EvalOptions& opts = {});

nlohmann::ordered_json report_to_json(const EvalReport& report, bool include_per_video = true);
std::string per_video_csv(const EvalReport& report);

}  // namespace relformer
