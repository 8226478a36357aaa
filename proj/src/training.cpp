#include "relformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "relformer/errors.hpp"

namespace relformer {

void validate(const TrainConfig& cfg) {
  if (!(cfg.lambda_cls >= 0.0)) throw ConfigError("train.lambda_cls must be >= 0");
  if (!(cfg.lambda_att >= 0.0)) throw ConfigError("train.lambda_att must be >= 0");
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("train.lr must be a finite value >= 0");
  if (cfg.batch == 0) throw ConfigError("train.batch must be positive");
  if (!(cfg.max_grad_norm >= 0.0)) throw ConfigError("train.max_grad_norm must be >= 0");
  if (!(cfg.assign_threshold > 0.0 && cfg.assign_threshold <= 1.0)) {
    throw ConfigError("train.assign_threshold must be in (0, 1]");
  }
}

std::size_t GtPredicateSet::relation_count() const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [](const GtEntry& e) { return !e.empty; }));
}

GtPredicateSet build_gt_predicates(const VideoSample& sample, const TrackletAssignment& assignment,
                                   std::size_t m) {
  if (sample.gt_relations.size() > m) {
    throw DatasetError("video " + sample.video_id + " has " + std::to_string(sample.gt_relations.size()) +
                       " relations but only " + std::to_string(m) +
                       " predicate queries; increase m_c or m_d");
  }
  const std::size_t n = sample.tracklets.size();
  GtPredicateSet set;
  set.n = n;
  set.entries.resize(m);
  for (auto& e : set.entries) e.attention.assign(2 * n, 0.0);
  for (std::size_t g = 0; g < sample.gt_relations.size(); ++g) {
    const GtRelation& r = sample.gt_relations[g];
    GtEntry& e = set.entries[g];
    e.empty = false;
    e.predicate = r.predicate;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& owner = assignment.tracklet_to_gt[i];
      if (!owner) continue;
      if (*owner == r.subject) e.attention[i] = 1.0;
      if (*owner == r.object) e.attention[n + i] = 1.0;
    }
  }
  return set;
}

double matching_cost(const GtEntry& gt, std::span<const double> probs, std::span<const double> attention,
                     double lambda_cls, double lambda_att) {
  if (gt.empty) return 0.0;
  if (attention.size() != gt.attention.size()) throw ShapeError("matching_cost: attention width mismatch");
  const double cls = -std::log(std::max(probs[static_cast<std::size_t>(gt.predicate)], kProbFloor));
  double bce = 0.0;
  for (std::size_t k = 0; k < attention.size(); ++k) {
    const double x = std::clamp(attention[k], kBceClamp, 1.0 - kBceClamp);
    const double a = gt.attention[k];
    bce -= a * std::log(x) + (1.0 - a) * std::log(1.0 - x);
  }
  if (!attention.empty()) bce /= static_cast<double>(attention.size());
  return lambda_cls * cls + lambda_att * bce;
}

std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  for (const auto& row : cost) {
    if (row.size() != n) throw UsageError("hungarian: cost matrix must be square");
    for (double c : row)
      if (!std::isfinite(c)) throw UsageError("hungarian: cost matrix has a non-finite entry");
  }
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> result(n);
  for (std::size_t j = 1; j <= n; ++j) result[p[j] - 1] = j - 1;
  return result;
}

namespace {

void check_shapes(const GtPredicateSet& gt, const Tensor& probs, const Tensor& attention) {
  const std::size_t m = gt.entries.size();
  if (probs.rank() != 2 || probs.size(0) != m) {
    throw ShapeError("probabilities must be [m, C + 1] with m = " + std::to_string(m) + ", got " +
                     shape_str(probs.shape()));
  }
  if (attention.rank() != 3 || attention.size(0) != 2 || attention.size(1) != m || attention.size(2) != gt.n) {
    throw ShapeError("attention must be [2, " + std::to_string(m) + ", " + std::to_string(gt.n) + "], got " +
                     shape_str(attention.shape()));
  }
}

std::vector<double> attention_rows(std::span<const double> a, std::size_t m, std::size_t n, std::size_t j) {
  std::vector<double> rows(2 * n);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < n; ++i) rows[r * n + i] = a[(r * m + j) * n + i];
  return rows;
}

}  // namespace

std::vector<std::vector<double>> matching_cost_matrix(const GtPredicateSet& gt, const Tensor& probs,
                                                      const Tensor& attention, const TrainConfig& cfg) {
  check_shapes(gt, probs, attention);
  const std::size_t m = gt.entries.size(), n = gt.n, width = probs.size(1);
  auto p = probs.data();
  auto a = attention.data();
  std::vector<std::vector<double>> cost(m, std::vector<double>(m, 0.0));
  for (std::size_t j = 0; j < m; ++j) {
    const std::vector<double> rows = attention_rows(a, m, n, j);
    const auto pj = p.subspan(j * width, width);
    for (std::size_t g = 0; g < m; ++g)
      if (!gt.entries[g].empty) cost[g][j] = matching_cost(gt.entries[g], pj, rows, cfg.lambda_cls, cfg.lambda_att);
  }
  for (const auto& row : cost)
    for (double c : row)
      if (!std::isfinite(c)) throw NumericalError("non-finite matching cost");
  return cost;
}

Tensor total_loss(const GtPredicateSet& gt, const Tensor& probs, const Tensor& attention,
                  std::span<const std::size_t> assignment, const TrainConfig& cfg) {
  check_shapes(gt, probs, attention);
  const std::size_t m = gt.entries.size(), n = gt.n, width = probs.size(1);
  if (assignment.size() != m) throw ShapeError("total_loss: assignment must cover every ground-truth slot");
  const std::size_t background = width - 1;

  std::vector<std::size_t> cls_idx;
  std::vector<std::size_t> att_idx;
  std::vector<double> targets;
  for (std::size_t g = 0; g < m; ++g) {
    const std::size_t j = assignment[g];
    const GtEntry& e = gt.entries[g];
    if (e.empty) {
      cls_idx.push_back(j * width + background);
      continue;
    }
    cls_idx.push_back(j * width + static_cast<std::size_t>(e.predicate));
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t i = 0; i < n; ++i) {
        att_idx.push_back((r * m + j) * n + i);
        targets.push_back(e.attention[r * n + i]);
      }
  }
  Tensor loss = scale(sum(log_clamped(pick(probs, cls_idx), kProbFloor)), -cfg.lambda_cls);
  if (!att_idx.empty()) {
    const std::size_t k = att_idx.size();
    std::vector<double> complement(k);
    for (std::size_t t = 0; t < k; ++t) complement[t] = 1.0 - targets[t];
    Tensor x = clamp(pick(attention, att_idx), kBceClamp, 1.0 - kBceClamp);
    Tensor log_x = log_clamped(x, kBceClamp / 2.0);
    Tensor log_1mx = log_clamped(sub(Tensor({k}, std::vector<double>(k, 1.0)), x), kBceClamp / 2.0);
    Tensor ll = add(mul(Tensor({k}, std::move(targets)), log_x), mul(Tensor({k}, std::move(complement)), log_1mx));
    loss = add(loss, scale(sum(ll), -cfg.lambda_att / static_cast<double>(2 * n)));
  }
  return loss;
}

Tensor video_loss(const RelformerModel& model, const VideoSample& video, const GtPredicateSet& gt,
                  const TrainConfig& cfg) {
  const ModelOutput out = model.forward(video);
  const auto assignment = hungarian(matching_cost_matrix(gt, out.probs, out.decoder.attention, cfg));
  return total_loss(gt, out.probs, out.decoder.attention, assignment, cfg);
}

TrainResult train_loop(const Dataset& dataset, RelformerModel& model, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
  validate(cfg);
  const ModelConfig& mc = model.config();
  if (dataset.vocab.num_objects() != mc.num_object_categories ||
      dataset.vocab.num_predicates() != mc.num_predicates) {
    throw ConfigError("dataset vocabulary (" + std::to_string(dataset.vocab.num_objects()) + " objects, " +
                      std::to_string(dataset.vocab.num_predicates()) + " predicates) does not match " +
                      "model.num_object_categories / model.num_predicates");
  }
  model.set_freq_bias(build_freq_bias(dataset.videos, mc.num_object_categories, mc.num_predicates));

  std::vector<std::size_t> usable;
  std::vector<GtPredicateSet> gts(dataset.videos.size());
  for (std::size_t v = 0; v < dataset.videos.size(); ++v) {
    const VideoSample& video = dataset.videos[v];
    if (video.tracklets.empty()) continue;
    gts[v] = build_gt_predicates(video, assign_tracklets_to_gt(video, cfg.assign_threshold), mc.num_queries());
    usable.push_back(v);
  }

  Adam adam(AdamOptions{cfg.lr, 0.9, 0.999, 1e-8});
  Rng rng(cfg.seed);
  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = usable;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::vector<Tensor> losses;
      for (std::size_t b = start; b < end; ++b) {
        try {
          losses.push_back(video_loss(model, dataset.videos[order[b]], gts[order[b]], cfg));
        } catch (const NumericalError& e) {
          throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batches + 1));
        }
      }
      Tensor batch_loss = losses.front();
      for (std::size_t b = 1; b < losses.size(); ++b) batch_loss = add(batch_loss, losses[b]);
      batch_loss = scale(batch_loss, 1.0 / static_cast<double>(losses.size()));
      const double value = batch_loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches + 1));
      }
      model.params().zero_grad();
      backward(batch_loss);
      if (cfg.max_grad_norm > 0.0) clip_grad_norm(model.params(), cfg.max_grad_norm);
      adam.step(model.params());
      ++step;
      ++batches;
      epoch_sum += value;
      result.trace.push_back({epoch, step, value});
    }
    result.epoch_means.push_back(batches ? epoch_sum / static_cast<double>(batches) : 0.0);
    if (on_epoch) on_epoch(epoch, result);
  }
  return result;
}

std::string loss_trace_csv(std::span<const LossRecord> trace) {
  std::string out = "epoch,step,loss\n";
  char buf[96];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.12e\n", r.epoch, r.step, r.loss);
    out += buf;
  }
  return out;
}

}  // namespace relformer
