#include "relformer/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <tuple>

#include "relformer/errors.hpp"

namespace relformer {

void validate(const EvalOptions& opts) {
  if (!(opts.viou_threshold > 0.0 && opts.viou_threshold <= 1.0)) {
    throw ConfigError("eval.viou_threshold must be in (0, 1]");
  }
  for (std::size_t k : opts.recall_ks)
    if (k == 0) throw ConfigError("eval.recall_ks entries must be positive");
  for (std::size_t k : opts.precision_ks)
    if (k == 0) throw ConfigError("eval.precision_ks entries must be positive");
}

namespace {

// Minimum of the subject and object vIoU, or -1 when the categories or the
// predicate disagree.
double relation_overlap(const RelationTriplet& pred, const GtRelation& gt, const VideoSample& video) {
  if (pred.predicate != gt.predicate) return -1.0;
  const Tracklet* ps = video.find_tracklet(pred.subject_tid);
  const Tracklet* po = video.find_tracklet(pred.object_tid);
  const Tracklet* gs = video.find_gt_object(gt.subject);
  const Tracklet* go = video.find_gt_object(gt.object);
  if (!ps || !po || !gs || !go) return -1.0;
  if (ps->category != gs->category || po->category != go->category) return -1.0;
  const int F = video.frame_count;
  const double vs = compute_viou(restrict_to(view_of(*ps, F), pred.slot, F), restrict_to(view_of(*gs, F), gt.slot, F));
  const double vo = compute_viou(restrict_to(view_of(*po, F), pred.slot, F), restrict_to(view_of(*go, F), gt.slot, F));
  return std::min(vs, vo);
}

double recall_within(const std::vector<bool>& hits, std::size_t k, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  const auto n = std::min(k, hits.size());
  return static_cast<double>(std::count(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n), true)) /
         static_cast<double>(num_gt);
}

double mean_or_zero(double total, std::size_t count) {
  return count ? total / static_cast<double>(count) : 0.0;
}

void check_aligned(std::span<const VideoPrediction> preds, std::span<const VideoSample> videos) {
  if (preds.size() != videos.size()) throw UsageError("predictions and videos differ in count");
  for (std::size_t v = 0; v < videos.size(); ++v) {
    if (preds[v].video_id != videos[v].video_id) {
      throw UsageError("prediction for video " + preds[v].video_id + " is aligned with video " +
                       videos[v].video_id);
    }
  }
}

VideoScores& slot_for(std::vector<VideoScores>* per_video, std::size_t v, const std::string& id) {
  if (per_video->size() <= v) per_video->resize(v + 1);
  (*per_video)[v].video_id = id;
  return (*per_video)[v];
}

}  // namespace

bool match_relation(const RelationTriplet& pred, const GtRelation& gt, const VideoSample& video,
                    double viou_threshold) {
  return relation_overlap(pred, gt, video) >= viou_threshold;
}

double average_precision(const std::vector<bool>& hits, std::size_t num_gt) {
  if (num_gt == 0 || hits.empty()) return 0.0;
  std::vector<double> precision(hits.size()), recall(hits.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (hits[k]) ++tp;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  for (std::size_t k = hits.size() - 1; k-- > 0;) precision[k] = std::max(precision[k], precision[k + 1]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

std::vector<bool> match_detections(std::span<const RelationTriplet> preds, const VideoSample& video,
                                   double viou_threshold) {
  const auto& gts = video.gt_relations;
  std::vector<bool> claimed(gts.size(), false);
  std::vector<bool> hits(preds.size(), false);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      const double ov = relation_overlap(preds[k], gts[g], video);
      if (ov >= viou_threshold && ov > best) {
        best = ov;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      claimed[best_g] = true;
      hits[k] = true;
    }
  }
  return hits;
}

RelDetScores reldet_scores(std::span<const VideoPrediction> preds, std::span<const VideoSample> videos,
                           const EvalOptions& opts, std::vector<VideoScores>* per_video) {
  check_aligned(preds, videos);
  RelDetScores out;
  std::vector<double> recall_sum(opts.recall_ks.size(), 0.0);
  double ap_sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    const std::size_t num_gt = videos[v].gt_relations.size();
    if (num_gt == 0) {
      if (per_video) slot_for(per_video, v, videos[v].video_id).has_gt = false;
      continue;
    }
    const auto hits = match_detections(preds[v].relations, videos[v], opts.viou_threshold);
    const double ap = average_precision(hits, num_gt);
    ap_sum += ap;
    ++counted;
    std::vector<KValue> rec;
    for (std::size_t i = 0; i < opts.recall_ks.size(); ++i) {
      const double r = recall_within(hits, opts.recall_ks[i], num_gt);
      recall_sum[i] += r;
      rec.push_back({opts.recall_ks[i], r});
    }
    if (per_video) {
      VideoScores& s = slot_for(per_video, v, videos[v].video_id);
      s.has_gt = true;
      s.ap = ap;
      s.recall = std::move(rec);
    }
  }
  out.map = mean_or_zero(ap_sum, counted);
  for (std::size_t i = 0; i < opts.recall_ks.size(); ++i)
    out.recall.push_back({opts.recall_ks[i], mean_or_zero(recall_sum[i], counted)});
  return out;
}

RelTagScores reltag_scores(std::span<const VideoPrediction> preds, std::span<const VideoSample> videos,
                           const EvalOptions& opts, std::vector<VideoScores>* per_video) {
  check_aligned(preds, videos);
  using Triple = std::tuple<int, int, int>;
  std::vector<double> sums(opts.precision_ks.size(), 0.0);
  std::size_t counted = 0;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    const VideoSample& video = videos[v];
    if (video.gt_relations.empty()) continue;
    std::set<Triple> gt_triples;
    for (const auto& r : video.gt_relations) {
      const Tracklet* s = video.find_gt_object(r.subject);
      const Tracklet* o = video.find_gt_object(r.object);
      if (s && o) gt_triples.insert({s->category, r.predicate, o->category});
    }
    std::vector<Triple> ranked;
    for (const auto& p : preds[v].relations) {
      const Tracklet* s = video.find_tracklet(p.subject_tid);
      const Tracklet* o = video.find_tracklet(p.object_tid);
      ranked.push_back({s ? s->category : -1, p.predicate, o ? o->category : -1});
    }
    ++counted;
    std::vector<KValue> prec;
    for (std::size_t i = 0; i < opts.precision_ks.size(); ++i) {
      const std::size_t k = std::min(opts.precision_ks[i], ranked.size());
      std::set<Triple> credited;
      for (std::size_t r = 0; r < k; ++r)
        if (gt_triples.count(ranked[r])) credited.insert(ranked[r]);
      const double p = k ? static_cast<double>(credited.size()) / static_cast<double>(k) : 0.0;
      sums[i] += p;
      prec.push_back({opts.precision_ks[i], p});
    }
    if (per_video) {
      VideoScores& s = slot_for(per_video, v, video.video_id);
      s.has_gt = true;
      s.precision = std::move(prec);
    }
  }
  RelTagScores out;
  for (std::size_t i = 0; i < opts.precision_ks.size(); ++i)
    out.precision.push_back({opts.precision_ks[i], mean_or_zero(sums[i], counted)});
  return out;
}

double tracklet_map(std::span<const VideoSample> videos, double viou_threshold) {
  struct Candidate {
    double confidence;
    std::size_t video;
    std::size_t index;
  };
  std::map<int, std::size_t> gt_count;
  std::map<int, std::vector<Candidate>> candidates;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    for (const auto& g : videos[v].gt_objects) ++gt_count[g.category];
    const auto& tr = videos[v].tracklets;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const double conf = tr[i].probs.empty() ? 1.0 : *std::max_element(tr[i].probs.begin(), tr[i].probs.end());
      candidates[tr[i].category].push_back({conf, v, i});
    }
  }
  if (gt_count.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [category, count] : gt_count) {
    auto& cands = candidates[category];
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });
    std::map<std::pair<std::size_t, std::size_t>, bool> claimed;
    std::vector<bool> hits;
    for (const auto& c : cands) {
      const VideoSample& video = videos[c.video];
      double best = -1.0;
      std::size_t best_g = video.gt_objects.size();
      for (std::size_t g = 0; g < video.gt_objects.size(); ++g) {
        const Tracklet& gt = video.gt_objects[g];
        if (gt.category != category || claimed[{c.video, g}]) continue;
        const double ov = compute_viou(video.tracklets[c.index], gt, video.frame_count);
        if (ov >= viou_threshold && ov > best) {
          best = ov;
          best_g = g;
        }
      }
      if (best_g < video.gt_objects.size()) claimed[{c.video, best_g}] = true;
      hits.push_back(best_g < video.gt_objects.size());
    }
    total += average_precision(hits, count);
  }
  return total / static_cast<double>(gt_count.size());
}

double EvalReport::recall_at(std::size_t k) const {
  for (const auto& r : recall)
    if (r.k == k) return r.value;
  throw UsageError("report has no recall@" + std::to_string(k));
}

double EvalReport::precision_at(std::size_t k) const {
  for (const auto& p : precision)
    if (p.k == k) return p.value;
  throw UsageError("report has no precision@" + std::to_string(k));
}

EvalReport evaluate(std::span<const VideoPrediction> preds, const Dataset& dataset, const EvalOptions& opts) {
  validate(opts);
  EvalReport report;
  report.per_video.resize(dataset.videos.size());
  for (std::size_t v = 0; v < dataset.videos.size(); ++v) report.per_video[v].video_id = dataset.videos[v].video_id;
  const RelDetScores det = reldet_scores(preds, dataset.videos, opts, &report.per_video);
  const RelTagScores tag = reltag_scores(preds, dataset.videos, opts, &report.per_video);
  report.reldet_map = det.map;
  report.recall = det.recall;
  report.precision = tag.precision;
  report.tracklet_map = tracklet_map(dataset.videos, opts.viou_threshold);
  return report;
}

nlohmann::ordered_json report_to_json(const EvalReport& report, bool include_per_video) {
  nlohmann::ordered_json j;
  j["reldet_map"] = report.reldet_map;
  for (const auto& r : report.recall) j["recall@" + std::to_string(r.k)] = r.value;
  for (const auto& p : report.precision) j["p@" + std::to_string(p.k)] = p.value;
  j["tracklet_map"] = report.tracklet_map;
  if (include_per_video) {
    j["per_video"] = nlohmann::ordered_json::array();
    for (const auto& s : report.per_video) {
      nlohmann::ordered_json e;
      e["video_id"] = s.video_id;
      e["has_gt"] = s.has_gt;
      e["ap"] = s.ap;
      for (const auto& r : s.recall) e["recall@" + std::to_string(r.k)] = r.value;
      for (const auto& p : s.precision) e["p@" + std::to_string(p.k)] = p.value;
      j["per_video"].push_back(std::move(e));
    }
  }
  return j;
}

std::string per_video_csv(const EvalReport& report) {
  std::string out = "video_id,has_gt,ap";
  for (const auto& r : report.recall) out += ",recall@" + std::to_string(r.k);
  for (const auto& p : report.precision) out += ",p@" + std::to_string(p.k);
  out += "\n";
  char buf[64];
  for (const auto& s : report.per_video) {
    out += s.video_id + (s.has_gt ? ",1" : ",0");
    std::snprintf(buf, sizeof(buf), ",%.9f", s.ap);
    out += buf;
    for (std::size_t i = 0; i < report.recall.size(); ++i) {
      std::snprintf(buf, sizeof(buf), ",%.9f", i < s.recall.size() ? s.recall[i].value : 0.0);
      out += buf;
    }
    for (std::size_t i = 0; i < report.precision.size(); ++i) {
      std::snprintf(buf, sizeof(buf), ",%.9f", i < s.precision.size() ? s.precision[i].value : 0.0);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace relformer
