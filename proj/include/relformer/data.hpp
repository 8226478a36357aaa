#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace relformer {

// Normalized [start, end] fractions of the video length.
struct TimeSlot {
  double start = 0.0;
  double end = 1.0;

  bool valid() const { return start >= 0.0 && start < end && end <= 1.0; }
  bool operator==(const TimeSlot&) const = default;
};

// Intersection of two slots; nullopt when they do not overlap.
std::optional<TimeSlot> intersect(const TimeSlot& a, const TimeSlot& b);

// Half-open frame interval [first, last) covered by `slot` in a video of
// `frame_count` frames: floor(start*F) .. ceil(end*F)-1, with a 1e-9 guard
// against floating-point round-off on exact frame boundaries.
struct FrameRange {
  int first = 0;
  int last = 0;
  int length() const { return last - first; }
  bool operator==(const FrameRange&) const = default;
};
FrameRange frame_range(const TimeSlot& slot, int frame_count);
// Slot whose frame_range() is exactly [first, last).
TimeSlot slot_from_frames(int first, int last, int frame_count);

using Box = std::array<double, 4>;  // x1, y1, x2, y2, normalized

double box_iou(const Box& a, const Box& b);

struct Tracklet {
  int id = 0;
  TimeSlot slot;
  std::vector<Box> boxes;
  // Row-major [boxes.size(), feature_dim]; empty for ground-truth objects
  // stored without features.
  std::vector<float> appearance;
  std::size_t feature_dim = 0;
  int category = 0;
  std::vector<double> probs;  // empty for ground-truth objects

  std::size_t length() const { return boxes.size(); }
  std::span<const float> feature_row(std::size_t frame) const {
    return std::span<const float>(appearance).subspan(frame * feature_dim, feature_dim);
  }
  bool operator==(const Tracklet&) const = default;
};

struct GtRelation {
  int subject = 0;  // gt object id
  int object = 0;
  int predicate = 0;
  TimeSlot slot;
  bool operator==(const GtRelation&) const = default;
};

struct VideoSample {
  std::string video_id;
  int frame_count = 0;
  std::vector<Tracklet> tracklets;
  std::vector<Tracklet> gt_objects;
  std::vector<GtRelation> gt_relations;

  const Tracklet* find_gt_object(int id) const;
  const Tracklet* find_tracklet(int id) const;
  bool operator==(const VideoSample&) const = default;
};

struct Vocab {
  std::vector<std::string> objects;
  std::vector<std::string> predicates;

  std::size_t num_objects() const { return objects.size(); }
  std::size_t num_predicates() const { return predicates.size(); }
  bool operator==(const Vocab&) const = default;
};

// Throws ValidationError naming the offending item.
void validate(const Vocab& vocab);
void validate(const Tracklet& t, int frame_count, const Vocab& vocab, bool require_probs,
              bool require_features);
void validate(const VideoSample& sample, const Vocab& vocab);

// Per-frame boxes of a trajectory anchored at an absolute frame index.
struct TrackView {
  int first_frame = 0;
  std::span<const Box> boxes;
  int last_frame() const { return first_frame + static_cast<int>(boxes.size()); }
};

TrackView view_of(const Tracklet& t, int frame_count);
// Restricts a view to the frames of `slot`; the result may be empty.
TrackView restrict_to(const TrackView& v, const TimeSlot& slot, int frame_count);

// Voluminal IoU: sum of per-frame box IoU over the temporal intersection,
// divided by the number of frames in the temporal union.
double compute_viou(const TrackView& a, const TrackView& b);
double compute_viou(const Tracklet& a, const Tracklet& b, int frame_count);

struct TrackletAssignment {
  // gt object id -> detected tracklet ids (ascending).
  std::map<int, std::vector<int>> gt_to_tracklets;
  // Indexed like sample.tracklets; gt object id or nullopt.
  std::vector<std::optional<int>> tracklet_to_gt;
  // viou[t][g], indexed like sample.tracklets x sample.gt_objects.
  std::vector<std::vector<double>> viou;
};

// Max-vIoU assignment with a threshold, plus a low-quality rule guaranteeing
// each GT object its best tracklet whenever that vIoU is positive. The
// low-quality match overrides the threshold rule; if two GT objects claim the
// same tracklet, higher vIoU wins, then lower GT id. Ties over tracklets go to
// the lower tracklet id; ties over GT objects to the lower GT id.
TrackletAssignment assign_tracklets_to_gt(const VideoSample& sample, double threshold = 0.5);

}  // namespace relformer
