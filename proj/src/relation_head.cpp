#include "relformer/relation_head.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include "relformer/dataset_io.hpp"
#include "relformer/errors.hpp"

namespace relformer {

ClassemeTable random_classeme_table(std::size_t num_objects, std::size_t d_w, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(d_w)));
  std::vector<double> e(num_objects * d_w);
  for (double& v : e) v = nd(rng);
  return {Tensor({num_objects, d_w}, std::move(e))};
}

ClassemeTable load_classeme_table(const std::filesystem::path& path, std::size_t num_objects) {
  const FeatureMatrix m = read_feature_matrix(path);
  if (m.rows != num_objects) {
    throw DatasetError(path.string() + ": embedding table has " + std::to_string(m.rows) + " rows, expected " +
                       std::to_string(num_objects));
  }
  return {Tensor({m.rows, m.cols}, std::vector<double>(m.values.begin(), m.values.end()))};
}

Tensor classeme(std::span<const double> probs, const Tensor& embeddings) {
  if (embeddings.rank() != 2 || probs.size() != embeddings.size(0)) {
    throw ShapeError("classeme: " + std::to_string(probs.size()) + " probabilities for embeddings " +
                     shape_str(embeddings.shape()));
  }
  const std::size_t dw = embeddings.size(1);
  auto e = embeddings.data();
  std::vector<double> out(dw, 0.0);
  for (std::size_t c = 0; c < probs.size(); ++c)
    for (std::size_t k = 0; k < dw; ++k) out[k] += probs[c] * e[c * dw + k];
  return Tensor({dw}, std::move(out));
}

Tensor classeme_matrix(std::span<const Tracklet> tracklets, const Tensor& embeddings) {
  const std::size_t dw = embeddings.size(1);
  std::vector<double> out;
  out.reserve(tracklets.size() * dw);
  for (const auto& t : tracklets) {
    const Tensor row = classeme(t.probs, embeddings);
    out.insert(out.end(), row.data().begin(), row.data().end());
  }
  return Tensor({tracklets.size(), dw}, std::move(out));
}

Tensor FreqBias::as_tensor() const {
  return Tensor({num_objects, num_objects, num_predicates}, log_probs);
}

FreqBias FreqBias::from_tensor(const Tensor& t) {
  if (t.rank() != 3 || t.size(0) != t.size(1)) {
    throw ShapeError("frequency bias must be [C, C, R], got " + shape_str(t.shape()));
  }
  return {t.size(0), t.size(2), std::vector<double>(t.data().begin(), t.data().end())};
}

FreqBias uniform_freq_bias(std::size_t num_objects, std::size_t num_predicates) {
  return {num_objects, num_predicates,
          std::vector<double>(num_objects * num_objects * num_predicates,
                              -std::log(static_cast<double>(num_predicates)))};
}

FreqBias build_freq_bias(std::span<const VideoSample> videos, std::size_t num_objects,
                         std::size_t num_predicates, double eps) {
  if (!(eps > 0.0)) throw ConfigError("frequency bias smoothing must be positive");
  std::vector<double> counts(num_objects * num_objects * num_predicates, 0.0);
  for (const auto& v : videos) {
    for (const auto& r : v.gt_relations) {
      const Tracklet* s = v.find_gt_object(r.subject);
      const Tracklet* o = v.find_gt_object(r.object);
      if (!s || !o) throw DatasetError("video " + v.video_id + ": relation references a missing object");
      const auto cs = static_cast<std::size_t>(s->category), co = static_cast<std::size_t>(o->category);
      const auto p = static_cast<std::size_t>(r.predicate);
      if (cs >= num_objects || co >= num_objects || p >= num_predicates) {
        throw DatasetError("video " + v.video_id + ": relation category out of range");
      }
      counts[(cs * num_objects + co) * num_predicates + p] += 1.0;
    }
  }
  FreqBias b{num_objects, num_predicates, std::vector<double>(counts.size())};
  const double r = static_cast<double>(num_predicates);
  for (std::size_t pair = 0; pair < num_objects * num_objects; ++pair) {
    const double* c = counts.data() + pair * num_predicates;
    const double total = std::accumulate(c, c + num_predicates, 0.0);
    for (std::size_t p = 0; p < num_predicates; ++p)
      b.log_probs[pair * num_predicates + p] = std::log((c[p] + eps) / (total + eps * r));
  }
  return b;
}

std::vector<Link> binarize_links(const Tensor& attention) {
  if (attention.rank() != 3 || attention.size(0) != 2 || attention.size(2) == 0) {
    throw ShapeError("binarize_links: attention must be [2, m, n >= 1], got " + shape_str(attention.shape()));
  }
  const std::size_t m = attention.size(1), n = attention.size(2);
  auto a = attention.data();
  auto argmax = [&](std::size_t base) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (a[base + i] > a[base + best]) best = i;
    return best;
  };
  std::vector<Link> links(m);
  for (std::size_t j = 0; j < m; ++j) links[j] = {argmax(j * n), argmax((m + j) * n)};
  return links;
}

void init_head_params(ParamStore& store, Rng& rng, const ModelConfig& cfg) {
  init_mlp(store, rng, "head.mlp_q", {cfg.d_q + 2 * cfg.d_w, cfg.mlp_hidden, cfg.num_predicates + 1});
}

Tensor classify_predicates(const Tensor& queries, std::span<const Link> links, const Tensor& classemes,
                           std::span<const int> categories, const FreqBias& bias, const ParamScope& head,
                           const ModelConfig& cfg) {
  const std::size_t m = queries.size(0);
  if (links.size() != m) throw ShapeError("classify_predicates: one link pair per query required");
  if (bias.num_predicates != cfg.num_predicates) {
    throw ShapeError("classify_predicates: frequency bias has " + std::to_string(bias.num_predicates) +
                     " predicates, model has " + std::to_string(cfg.num_predicates));
  }
  std::vector<std::size_t> subj(m), obj(m);
  for (std::size_t j = 0; j < m; ++j) {
    subj[j] = links[j].subject;
    obj[j] = links[j].object;
  }
  Tensor input = concat_cols({queries, gather_rows(classemes, subj), gather_rows(classemes, obj)});
  Tensor logits = mlp_forward({cfg.d_q + 2 * cfg.d_w, cfg.mlp_hidden, cfg.num_predicates + 1},
                              head.sub("mlp_q"), input);
  const std::size_t width = cfg.num_predicates + 1;
  std::vector<double> b(m * width, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    const auto cs = static_cast<std::size_t>(categories[subj[j]]);
    const auto co = static_cast<std::size_t>(categories[obj[j]]);
    if (cs >= bias.num_objects || co >= bias.num_objects) {
      throw ShapeError("classify_predicates: tracklet category outside the frequency bias table");
    }
    auto fiber = bias.fiber(cs, co);
    std::copy(fiber.begin(), fiber.end(), b.begin() + static_cast<std::ptrdiff_t>(j * width));
  }
  return softmax_lastdim(add(logits, Tensor({m, width}, std::move(b))));
}

std::vector<RelationTriplet> infer_triplets(const Tensor& probs, std::span<const Link> links,
                                            std::span<const Tracklet> tracklets, std::size_t top_k) {
  std::vector<RelationTriplet> out;
  if (tracklets.empty()) return out;
  const std::size_t m = probs.size(0);
  const std::size_t num_predicates = probs.size(1) - 1;
  auto p = probs.data();
  std::vector<std::size_t> order(num_predicates);
  for (std::size_t j = 0; j < m; ++j) {
    const Tracklet& s = tracklets[links[j].subject];
    const Tracklet& o = tracklets[links[j].object];
    if (links[j].subject == links[j].object) continue;
    const auto slot = intersect(s.slot, o.slot);
    if (!slot) continue;
    const double* row = p.data() + j * (num_predicates + 1);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t k = std::min(top_k, num_predicates);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    for (std::size_t r = 0; r < k; ++r)
      out.push_back({s.id, o.id, static_cast<int>(order[r]), row[order[r]], *slot});
  }
  return out;
}

std::vector<RelationTriplet> filter_duplicates(std::vector<RelationTriplet> triplets) {
  using Key = std::tuple<int, int, int>;
  std::map<Key, RelationTriplet> best;
  for (auto& t : triplets) {
    const Key key{t.predicate, t.subject_tid, t.object_tid};
    auto it = best.find(key);
    if (it == best.end()) {
      best.emplace(key, t);
    } else if (t.score > it->second.score) {
      it->second = t;
    }
  }
  std::vector<RelationTriplet> out;
  out.reserve(best.size());
  for (auto& [key, t] : best) out.push_back(t);
  std::stable_sort(out.begin(), out.end(),
                   [](const RelationTriplet& a, const RelationTriplet& b) { return a.score > b.score; });
  return out;
}

VideoPrediction ensemble_merge(std::span<const VideoPrediction> predictions) {
  if (predictions.empty()) throw UsageError("ensemble_merge: no predictions");
  VideoPrediction merged{predictions.front().video_id, {}};
  for (const auto& p : predictions) {
    if (p.video_id != merged.video_id) {
      throw UsageError("ensemble_merge: predictions for videos " + merged.video_id + " and " + p.video_id);
    }
    merged.relations.insert(merged.relations.end(), p.relations.begin(), p.relations.end());
  }
  merged.relations = filter_duplicates(std::move(merged.relations));
  return merged;
}

nlohmann::ordered_json prediction_to_json(const VideoPrediction& p) {
  nlohmann::ordered_json j;
  j["video_id"] = p.video_id;
  j["relations"] = nlohmann::ordered_json::array();
  for (const auto& r : p.relations) {
    nlohmann::ordered_json e;
    e["subject_tid"] = r.subject_tid;
    e["object_tid"] = r.object_tid;
    e["predicate"] = r.predicate;
    e["score"] = r.score;
    e["start"] = r.slot.start;
    e["end"] = r.slot.end;
    j["relations"].push_back(std::move(e));
  }
  return j;
}

VideoPrediction prediction_from_json(const nlohmann::json& j) {
  try {
    VideoPrediction p;
    p.video_id = j.at("video_id").get<std::string>();
    for (const auto& e : j.at("relations")) {
      p.relations.push_back({e.at("subject_tid").get<int>(), e.at("object_tid").get<int>(),
                             e.at("predicate").get<int>(), e.at("score").get<double>(),
                             {e.at("start").get<double>(), e.at("end").get<double>()}});
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("prediction JSON: ") + e.what());
  }
}

}  // namespace relformer
