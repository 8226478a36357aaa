#pragma once

#include <algorithm>
#include <vector>

#include "relformer/dataset_io.hpp"
#include "relformer/relation_head.hpp"

namespace relformer::testing {

// Three videos with hand-labelled outcomes. Boxes are constant per tracklet:
//   B0 = (0, 0, .2, .2), B1 = (.5, .5, .7, .7), B2 = (.3, 0, .5, .2).
// Video "a": tracklet 12 is shifted so its IoU with its object is 1/3, and
// tracklet 13 covers only frames [0, 4) of object 0 (vIoU 0.4).
// Video "b" has no relations. Video "c" has one relation on the first half.
struct MetricFixture {
  Dataset dataset;
  std::vector<VideoPrediction> preds;

  // Expected relation hits per video in ranking order (video "b" excluded).
  std::vector<std::vector<bool>> reldet_hits = {{true, false, false, false}, {false, true}};
  std::vector<std::size_t> reldet_num_gt = {2, 1};
  // Per ranked prediction: whether its category triple is a new GT triple.
  std::vector<std::vector<bool>> reltag_credit = {{true, true, false, false}, {false, true}};
  // Per category, tracklet hits in confidence order and the GT count.
  std::vector<std::vector<bool>> tracklet_hits = {{false, true, true}, {true, true}, {true, false, false}};
  std::vector<std::size_t> tracklet_num_gt = {2, 2, 2};
};

inline Tracklet fixture_tracklet(int id, int category, const Box& box, int first, int last, double conf) {
  Tracklet t;
  t.id = id;
  t.category = category;
  t.slot = slot_from_frames(first, last, 10);
  t.boxes.assign(static_cast<std::size_t>(last - first), box);
  if (conf > 0.0) {
    t.probs.assign(3, (1.0 - conf) / 2.0);
    t.probs[static_cast<std::size_t>(category)] = conf;
  }
  return t;
}

inline MetricFixture make_metric_fixture() {
  const Box b0{0.0, 0.0, 0.2, 0.2}, b1{0.5, 0.5, 0.7, 0.7}, b2{0.3, 0.0, 0.5, 0.2};
  const Box b2_shifted{0.4, 0.0, 0.6, 0.2};
  MetricFixture f;
  f.dataset.vocab.objects = {"c0", "c1", "c2"};
  f.dataset.vocab.predicates = {"p0", "p1", "p2"};

  VideoSample a;
  a.video_id = "a";
  a.frame_count = 10;
  a.gt_objects = {fixture_tracklet(0, 0, b0, 0, 10, 0), fixture_tracklet(1, 1, b1, 0, 10, 0),
                  fixture_tracklet(2, 2, b2, 0, 10, 0)};
  a.tracklets = {fixture_tracklet(10, 0, b0, 0, 10, 0.9), fixture_tracklet(11, 1, b1, 0, 10, 0.8),
                 fixture_tracklet(12, 2, b2_shifted, 0, 10, 0.7), fixture_tracklet(13, 0, b0, 0, 4, 0.95)};
  a.gt_relations = {{0, 1, 0, {0.0, 1.0}}, {1, 2, 1, {0.0, 1.0}}};

  VideoSample b;
  b.video_id = "b";
  b.frame_count = 10;
  b.gt_objects = {fixture_tracklet(0, 1, b1, 0, 10, 0)};
  b.tracklets = {fixture_tracklet(20, 1, b1, 0, 10, 0.6), fixture_tracklet(21, 2, b2, 0, 10, 0.5)};

  VideoSample c;
  c.video_id = "c";
  c.frame_count = 10;
  c.gt_objects = {fixture_tracklet(0, 2, b2, 0, 10, 0), fixture_tracklet(1, 0, b0, 0, 10, 0)};
  c.tracklets = {fixture_tracklet(30, 2, b2, 0, 10, 0.85), fixture_tracklet(31, 0, b0, 0, 10, 0.4)};
  c.gt_relations = {{0, 1, 2, {0.0, 0.5}}};

  f.dataset.videos = {a, b, c};
  f.preds = {
      {"a",
       {{10, 11, 0, 0.9, {0.0, 1.0}},
        {11, 12, 1, 0.8, {0.0, 1.0}},
        {11, 10, 0, 0.7, {0.0, 1.0}},
        {10, 11, 0, 0.6, {0.0, 1.0}}}},
      {"b", {{20, 21, 1, 0.99, {0.0, 1.0}}}},
      {"c", {{30, 31, 0, 0.95, {0.0, 0.5}}, {30, 31, 2, 0.5, {0.0, 0.5}}}},
  };
  return f;
}

// Area under the interpolated PR curve: each true positive contributes the
// best precision at any rank at or below it, divided by the GT count.
inline double pr_curve_ap(const std::vector<bool>& hits, std::size_t num_gt) {
  std::vector<double> precision;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    tp += hits[k] ? 1 : 0;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  double ap = 0.0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (!hits[k]) continue;
    ap += *std::max_element(precision.begin() + static_cast<std::ptrdiff_t>(k), precision.end());
  }
  return num_gt ? ap / static_cast<double>(num_gt) : 0.0;
}

inline double recall_oracle(const std::vector<bool>& hits, std::size_t k, std::size_t num_gt) {
  std::size_t tp = 0;
  for (std::size_t i = 0; i < hits.size() && i < k; ++i) tp += hits[i] ? 1 : 0;
  return static_cast<double>(tp) / static_cast<double>(num_gt);
}

inline double precision_oracle(const std::vector<bool>& credit, std::size_t k) {
  const std::size_t n = std::min(k, credit.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) tp += credit[i] ? 1 : 0;
  return n ? static_cast<double>(tp) / static_cast<double>(n) : 0.0;
}

}  // namespace relformer::testing
