#pragma once

#include <span>
#include <vector>

#include "relformer/data.hpp"
#include "relformer/features.hpp"
#include "relformer/model_config.hpp"
#include "relformer/nn.hpp"

namespace relformer {

// One temporal anchor per predicate query: m_c centers x m_d durations,
// query index j = center_index * m_d + duration_index.
struct AnchorSet {
  std::size_t m_c = 0;
  std::size_t m_d = 0;
  std::vector<TimeSlot> slots;

  std::size_t size() const { return slots.size(); }
  // [m, 2] constant (start, end) tensor.
  Tensor as_tensor() const;
};

AnchorSet build_anchors(std::size_t m_c, std::size_t m_d);

// Layout of the stacked per-frame tracklet features consumed by RoI pooling.
struct TrackletLayout {
  std::vector<std::size_t> offsets;  // row offset into per_frame
  std::vector<std::size_t> lengths;  // frames per tracklet
  std::vector<int> first_frames;
  std::vector<TimeSlot> slots;
  int frame_count = 0;

  std::size_t size() const { return offsets.size(); }
};

TrackletLayout make_layout(std::span<const Tracklet> tracklets, int frame_count);

// ---- encoder ---------------------------------------------------------------

void init_encoder_params(ParamStore& store, Rng& rng, const ModelConfig& cfg);
// Stacked self-attention blocks over tracklets, [n, d] -> [n, d].
Tensor encode_tracklets(const Tensor& h, const ParamStore& params, const ModelConfig& cfg);

// ---- temporal-aware decoder --------------------------------------------------

// Weights of one tracklet-query RoI. `weights` is [l_roi, length]; bin k
// averages the tracklet frames overlapped by the k-th equal sub-interval of the
// slot intersection, each frame weighted by its covered fraction. The d_*
// arrays are derivatives w.r.t. the query start/end.
struct RoiWeights {
  bool empty = true;
  std::vector<double> weights;
  std::vector<double> d_start;
  std::vector<double> d_end;
};

RoiWeights roi_weights(const TimeSlot& tracklet_slot, int first_frame, std::size_t length,
                       const TimeSlot& query_slot, int frame_count, std::size_t l_roi);

// Batched RoI pooling for all (query, tracklet) pairs.
//   per_frame   [sum l_i, d]
//   query_slots [m, 2] (start, end); differentiable
// Returns [m * n, l_roi * d], row j * n + i; all-zero rows for disjoint pairs.
Tensor temporal_roi_pool(const Tensor& per_frame, const TrackletLayout& layout, const Tensor& query_slots,
                         std::size_t l_roi);

// Single-tracklet convenience form: [l_i, d] -> [l_roi, d].
Tensor temporal_roi_pool(const Tensor& per_frame, const TimeSlot& tracklet_slot, const TimeSlot& query_slot,
                         int frame_count, std::size_t l_roi);

// V for every query: MLP_roi(flatten(roi)), [m * n, d_v], row j * n + i.
Tensor build_value_matrix(const Tensor& per_frame, const TrackletLayout& layout, const Tensor& query_slots,
                          const ParamScope& layer, const ModelConfig& cfg);

// Role-specific scaled dot products, [2, m, n]; role 0 = subject, 1 = object.
Tensor role_attention(const Tensor& queries, const Tensor& keys, const ParamScope& layer,
                      const ModelConfig& cfg);

// Product of a softmax over tracklets and a softmax over roles, [2, m, n].
Tensor normalize_attention(const Tensor& logits);

// Per role and query: sum_i attention[r, j, i] * values[j * n + i]. Returns [2m, d_v].
Tensor attend_values(const Tensor& attention, const Tensor& values);

// sum_r F_r(attention[r, j, :] V_j), [m, d_q].
Tensor cross_attend(const Tensor& attention, const Tensor& values, const ParamScope& layer,
                    const ModelConfig& cfg);

inline constexpr double kMinSlotWidth = 1e-3;

// (dc, dw) offsets [m, 2] applied to reference slots: center += dc * width,
// width *= exp(dw); clamped into [0, 1] with a minimum width of 1e-3.
// Returns [m, 2] (start, end).
Tensor apply_slot_offsets(const Tensor& offsets, std::span<const TimeSlot> reference);
Tensor regress_time_slots(const Tensor& queries, std::span<const TimeSlot> reference,
                          const ParamScope& layer, const ModelConfig& cfg);

std::vector<TimeSlot> slots_from_tensor(const Tensor& slots);

void init_decoder_params(ParamStore& store, Rng& rng, const ModelConfig& cfg);

struct DecoderOutput {
  Tensor queries;    // [m, d_q] after the last layer
  Tensor attention;  // [2, m, n] normalized, last layer
  // Slots used by each layer's RoI pooling, plus the final regressed slots.
  std::vector<std::vector<TimeSlot>> slots;
};

DecoderOutput decoder_forward(const TrackletFeatures& features, const TrackletLayout& layout,
                              const Tensor& encoded, const AnchorSet& anchors, const ParamStore& params,
                              const ModelConfig& cfg);

}  // namespace relformer
