#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "relformer/data.hpp"
#include "relformer/dataset_io.hpp"
#include "relformer/model.hpp"

namespace relformer {

struct TrainConfig {
  double lambda_cls = 1.0;
  double lambda_att = 30.0;
  double lr = 5e-5;
  std::size_t batch = 4;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  std::size_t save_every = 0;   // epochs between checkpoints; 0 disables
  double max_grad_norm = 0.0;   // 0 disables clipping
  double assign_threshold = 0.5;
};

void validate(const TrainConfig& cfg);

// One padded ground-truth slot. `attention` is [2 * n], the subject row
// followed by the object row.
struct GtEntry {
  bool empty = true;
  int predicate = 0;
  std::vector<double> attention;
};

struct GtPredicateSet {
  std::size_t n = 0;
  std::vector<GtEntry> entries;  // exactly m

  std::size_t relation_count() const;
};

// Throws DatasetError when the video has more relations than queries.
GtPredicateSet build_gt_predicates(const VideoSample& sample, const TrackletAssignment& assignment,
                                   std::size_t m);

inline constexpr double kBceClamp = 1e-7;
inline constexpr double kProbFloor = 1e-12;

// `probs` is one query's [|C_rel| + 1] distribution; `attention` its [2 * n]
// normalized attention rows.
double matching_cost(const GtEntry& gt, std::span<const double> probs, std::span<const double> attention,
                     double lambda_cls, double lambda_att);

// Optimal assignment for a square cost matrix: result[row] = column.
// Throws UsageError for non-square or non-finite input.
std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost);

// cost[g][j] between ground-truth slot g and query j.
std::vector<std::vector<double>> matching_cost_matrix(const GtPredicateSet& gt, const Tensor& probs,
                                                      const Tensor& attention, const TrainConfig& cfg);

// Matched costs plus background classification for queries matched to empty
// slots. `assignment[g]` is the query matched to ground-truth slot g.
Tensor total_loss(const GtPredicateSet& gt, const Tensor& probs, const Tensor& attention,
                  std::span<const std::size_t> assignment, const TrainConfig& cfg);

// Forward, matching and loss for one video.
Tensor video_loss(const RelformerModel& model, const VideoSample& video, const GtPredicateSet& gt,
                  const TrainConfig& cfg);

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  std::vector<double> epoch_means;
};

// Invoked after each epoch (1-based) with the trace so far.
using EpochCallback = std::function<void(std::size_t epoch, const TrainResult& so_far)>;

// Sets the frequency bias from the dataset, then runs Adam over seeded
// shuffles of the videos. Throws NumericalError on a non-finite loss.
TrainResult train_loop(const Dataset& dataset, RelformerModel& model, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

std::string loss_trace_csv(std::span<const LossRecord> trace);

}  // namespace relformer
