#pragma once

#include <span>
#include <vector>

#include "relformer/data.hpp"
#include "relformer/model_config.hpp"
#include "relformer/nn.hpp"

namespace relformer {

// Frame-to-frame box deltas, [l, 4]. The last row is zero so the result has
// one row per frame.
Tensor delta_boxes(std::span<const Box> boxes);
// [boxes | deltas], [l, 8].
Tensor spatial_feature(std::span<const Box> boxes);

// Parameters: feat.mlp_v (d_a -> d/2), feat.mlp_s (8 -> d/2), feat.pool (l*d -> d).
void init_feature_params(ParamStore& store, Rng& rng, const ModelConfig& cfg);

// [MLP_v(appearance) ; MLP_s(spatial)] per frame, [l_i, d].
Tensor init_tracklet_feature(const Tensor& appearance, const Tensor& spatial, const ParamScope& feat,
                             const ModelConfig& cfg);

// Adaptive average pooling weights [bins, length]: bin j averages frames
// [floor(j*length/bins), max(floor((j+1)*length/bins), start+1)).
Tensor adaptive_pool_weights(std::size_t length, std::size_t bins);

// Pools [l_i, d] to [l, d], flattens, and maps through feat.pool to [d].
Tensor pool_to_encoder_input(const Tensor& per_frame, const ParamScope& feat, const ModelConfig& cfg);

// All tracklets of one video, batched.
struct TrackletFeatures {
  Tensor per_frame;                  // [sum l_i, d], tracklets stacked in order
  std::vector<std::size_t> offsets;  // first row of each tracklet in per_frame
  std::vector<std::size_t> lengths;
  Tensor pooled;                     // [n, d], the encoder input H
};

TrackletFeatures compute_tracklet_features(std::span<const Tracklet> tracklets, const ParamScope& feat,
                                           const ModelConfig& cfg);

// Appearance rows of one tracklet as a constant [l_i, d_a] tensor.
Tensor appearance_tensor(const Tracklet& t);

}  // namespace relformer
