#include "relformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "relformer/errors.hpp"

namespace relformer {

namespace {

constexpr double kFrameGuard = 1e-9;

std::string tracklet_label(const Tracklet& t) { return "tracklet " + std::to_string(t.id); }

}  // namespace

std::optional<TimeSlot> intersect(const TimeSlot& a, const TimeSlot& b) {
  const double s = std::max(a.start, b.start);
  const double e = std::min(a.end, b.end);
  if (!(e > s)) return std::nullopt;
  return TimeSlot{s, e};
}

FrameRange frame_range(const TimeSlot& slot, int frame_count) {
  const double f = static_cast<double>(frame_count);
  int first = static_cast<int>(std::floor(slot.start * f + kFrameGuard));
  int last = static_cast<int>(std::ceil(slot.end * f - kFrameGuard));
  first = std::clamp(first, 0, frame_count);
  last = std::clamp(last, first, frame_count);
  return {first, last};
}

TimeSlot slot_from_frames(int first, int last, int frame_count) {
  const double f = static_cast<double>(frame_count);
  return {static_cast<double>(first) / f, static_cast<double>(last) / f};
}

double box_iou(const Box& a, const Box& b) {
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double area_a = (a[2] - a[0]) * (a[3] - a[1]);
  const double area_b = (b[2] - b[0]) * (b[3] - b[1]);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

const Tracklet* VideoSample::find_gt_object(int id) const {
  for (const auto& g : gt_objects)
    if (g.id == id) return &g;
  return nullptr;
}

const Tracklet* VideoSample::find_tracklet(int id) const {
  for (const auto& t : tracklets)
    if (t.id == id) return &t;
  return nullptr;
}

void validate(const Vocab& vocab) {
  auto check_unique = [](const std::vector<std::string>& names, const char* what) {
    std::set<std::string> seen;
    for (const auto& n : names)
      if (!seen.insert(n).second) throw ValidationError(std::string("duplicate ") + what + " name '" + n + "'");
  };
  check_unique(vocab.objects, "object category");
  check_unique(vocab.predicates, "predicate");
  if (vocab.objects.empty()) throw ValidationError("vocabulary has no object categories");
  if (vocab.predicates.empty()) throw ValidationError("vocabulary has no predicates");
}

void validate(const Tracklet& t, int frame_count, const Vocab& vocab, bool require_probs,
              bool require_features) {
  const std::string who = tracklet_label(t);
  if (!t.slot.valid()) throw ValidationError(who + ": invalid time slot");
  if (t.boxes.size() < 2) throw ValidationError(who + ": needs at least 2 frames");
  const FrameRange fr = frame_range(t.slot, frame_count);
  if (static_cast<std::size_t>(fr.length()) != t.boxes.size()) {
    throw ValidationError(who + ": " + std::to_string(t.boxes.size()) +
                          " boxes but its slot covers " + std::to_string(fr.length()) + " frames");
  }
  for (std::size_t f = 0; f < t.boxes.size(); ++f) {
    const Box& b = t.boxes[f];
    const bool in_range = std::all_of(b.begin(), b.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
    if (!in_range || !(b[0] < b[2]) || !(b[1] < b[3])) {
      throw ValidationError(who + ": malformed box at frame offset " + std::to_string(f));
    }
  }
  if (t.category < 0 || static_cast<std::size_t>(t.category) >= vocab.num_objects()) {
    throw ValidationError(who + ": category " + std::to_string(t.category) + " out of range");
  }
  if (require_probs || !t.probs.empty()) {
    if (t.probs.size() != vocab.num_objects()) {
      throw ValidationError(who + ": probs has length " + std::to_string(t.probs.size()) +
                            ", expected " + std::to_string(vocab.num_objects()));
    }
    double total = 0.0;
    for (double p : t.probs) {
      if (!(p >= 0.0)) throw ValidationError(who + ": negative or NaN probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) throw ValidationError(who + ": probs do not sum to 1");
  }
  if (require_features || !t.appearance.empty()) {
    if (t.feature_dim == 0 || t.appearance.size() != t.boxes.size() * t.feature_dim) {
      throw ValidationError(who + ": appearance rows do not match frame count");
    }
  }
}

void validate(const VideoSample& sample, const Vocab& vocab) {
  const std::string who = "video " + sample.video_id;
  if (sample.frame_count < 2) throw ValidationError(who + ": frame_count must be >= 2");
  std::set<int> ids;
  for (const auto& t : sample.tracklets) {
    if (!ids.insert(t.id).second) throw ValidationError(who + ": duplicate tracklet id " + std::to_string(t.id));
    validate(t, sample.frame_count, vocab, true, true);
  }
  std::set<int> gt_ids;
  for (const auto& g : sample.gt_objects) {
    if (!gt_ids.insert(g.id).second) throw ValidationError(who + ": duplicate gt object id " + std::to_string(g.id));
    validate(g, sample.frame_count, vocab, false, false);
  }
  for (const auto& r : sample.gt_relations) {
    if (!gt_ids.count(r.subject) || !gt_ids.count(r.object)) {
      throw ValidationError(who + ": relation references unknown gt object");
    }
    if (r.subject == r.object) throw ValidationError(who + ": relation subject equals object");
    if (r.predicate < 0 || static_cast<std::size_t>(r.predicate) >= vocab.num_predicates()) {
      throw ValidationError(who + ": relation predicate out of range");
    }
    if (!r.slot.valid()) throw ValidationError(who + ": relation has an invalid time slot");
  }
}

TrackView view_of(const Tracklet& t, int frame_count) {
  return {frame_range(t.slot, frame_count).first, t.boxes};
}

TrackView restrict_to(const TrackView& v, const TimeSlot& slot, int frame_count) {
  const FrameRange fr = frame_range(slot, frame_count);
  const int first = std::max(v.first_frame, fr.first);
  const int last = std::min(v.last_frame(), fr.last);
  if (last <= first) return {first, {}};
  return {first, v.boxes.subspan(static_cast<std::size_t>(first - v.first_frame),
                                 static_cast<std::size_t>(last - first))};
}

double compute_viou(const TrackView& a, const TrackView& b) {
  const int first = std::max(a.first_frame, b.first_frame);
  const int last = std::min(a.last_frame(), b.last_frame());
  const int inter = std::max(0, last - first);
  const int uni = static_cast<int>(a.boxes.size() + b.boxes.size()) - inter;
  if (inter == 0 || uni <= 0) return 0.0;
  double total = 0.0;
  for (int f = first; f < last; ++f) {
    total += box_iou(a.boxes[static_cast<std::size_t>(f - a.first_frame)],
                     b.boxes[static_cast<std::size_t>(f - b.first_frame)]);
  }
  return total / static_cast<double>(uni);
}

double compute_viou(const Tracklet& a, const Tracklet& b, int frame_count) {
  return compute_viou(view_of(a, frame_count), view_of(b, frame_count));
}

TrackletAssignment assign_tracklets_to_gt(const VideoSample& sample, double threshold) {
  const auto& tr = sample.tracklets;
  const auto& gt = sample.gt_objects;
  TrackletAssignment out;
  out.tracklet_to_gt.assign(tr.size(), std::nullopt);
  out.viou.assign(tr.size(), std::vector<double>(gt.size(), 0.0));
  for (std::size_t t = 0; t < tr.size(); ++t)
    for (std::size_t g = 0; g < gt.size(); ++g)
      out.viou[t][g] = compute_viou(tr[t], gt[g], sample.frame_count);

  // Threshold rule.
  for (std::size_t t = 0; t < tr.size(); ++t) {
    std::optional<std::size_t> best;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (!best || out.viou[t][g] > out.viou[t][*best] ||
          (out.viou[t][g] == out.viou[t][*best] && gt[g].id < gt[*best].id)) {
        best = g;
      }
    }
    if (best && out.viou[t][*best] >= threshold) out.tracklet_to_gt[t] = gt[*best].id;
  }

  // Low-quality rule: each GT claims its best tracklet.
  struct Claim {
    double viou;
    int gt_id;
  };
  std::vector<std::optional<Claim>> claims(tr.size());
  for (std::size_t g = 0; g < gt.size(); ++g) {
    std::optional<std::size_t> best;
    for (std::size_t t = 0; t < tr.size(); ++t) {
      if (!best || out.viou[t][g] > out.viou[*best][g] ||
          (out.viou[t][g] == out.viou[*best][g] && tr[t].id < tr[*best].id)) {
        best = t;
      }
    }
    if (!best || !(out.viou[*best][g] > 0.0)) continue;
    Claim c{out.viou[*best][g], gt[g].id};
    auto& slot = claims[*best];
    if (!slot || c.viou > slot->viou || (c.viou == slot->viou && c.gt_id < slot->gt_id)) slot = c;
  }
  for (std::size_t t = 0; t < tr.size(); ++t)
    if (claims[t]) out.tracklet_to_gt[t] = claims[t]->gt_id;

  for (const auto& g : gt) out.gt_to_tracklets[g.id];
  for (std::size_t t = 0; t < tr.size(); ++t)
    if (out.tracklet_to_gt[t]) out.gt_to_tracklets[*out.tracklet_to_gt[t]].push_back(tr[t].id);
  for (auto& [_, ids] : out.gt_to_tracklets) std::sort(ids.begin(), ids.end());
  return out;
}

}  // namespace relformer
