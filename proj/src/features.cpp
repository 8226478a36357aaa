#include "relformer/features.hpp"

#include "relformer/errors.hpp"

namespace relformer {

Tensor delta_boxes(std::span<const Box> boxes) {
  if (boxes.size() < 2) throw ValidationError("delta_boxes: a tracklet needs at least 2 frames");
  const std::size_t l = boxes.size();
  std::vector<double> out(l * 4, 0.0);
  for (std::size_t j = 0; j + 1 < l; ++j)
    for (std::size_t k = 0; k < 4; ++k) out[j * 4 + k] = boxes[j + 1][k] - boxes[j][k];
  return Tensor({l, 4}, std::move(out));
}

Tensor spatial_feature(std::span<const Box> boxes) {
  const Tensor deltas = delta_boxes(boxes);
  const std::size_t l = boxes.size();
  std::vector<double> out(l * 8);
  for (std::size_t j = 0; j < l; ++j) {
    for (std::size_t k = 0; k < 4; ++k) {
      out[j * 8 + k] = boxes[j][k];
      out[j * 8 + 4 + k] = deltas.at(j, k);
    }
  }
  return Tensor({l, 8}, std::move(out));
}

void init_feature_params(ParamStore& store, Rng& rng, const ModelConfig& cfg) {
  if (cfg.d % 2 != 0) throw ConfigError("feature width d must be even");
  init_mlp(store, rng, "feat.mlp_v", {cfg.d_a, cfg.mlp_hidden, cfg.d / 2});
  init_mlp(store, rng, "feat.mlp_s", {8, cfg.mlp_hidden, cfg.d / 2});
  init_mlp(store, rng, "feat.pool", {cfg.l * cfg.d, cfg.mlp_hidden, cfg.d});
}

Tensor init_tracklet_feature(const Tensor& appearance, const Tensor& spatial, const ParamScope& feat,
                             const ModelConfig& cfg) {
  if (cfg.d % 2 != 0) throw ConfigError("feature width d must be even");
  if (appearance.rank() != 2 || spatial.rank() != 2 || appearance.size(0) != spatial.size(0)) {
    throw ShapeError("init_tracklet_feature: appearance " + shape_str(appearance.shape()) +
                     " and spatial " + shape_str(spatial.shape()) + " must be [l, *] with equal l");
  }
  Tensor v = mlp_forward({cfg.d_a, cfg.mlp_hidden, cfg.d / 2}, feat.sub("mlp_v"), appearance);
  Tensor s = mlp_forward({8, cfg.mlp_hidden, cfg.d / 2}, feat.sub("mlp_s"), spatial);
  return concat_cols({v, s});
}

Tensor adaptive_pool_weights(std::size_t length, std::size_t bins) {
  if (length == 0 || bins == 0) throw ShapeError("adaptive_pool_weights: empty input");
  std::vector<double> w(bins * length, 0.0);
  for (std::size_t j = 0; j < bins; ++j) {
    const std::size_t start = std::min(j * length / bins, length - 1);
    const std::size_t end = std::max((j + 1) * length / bins, start + 1);
    const double inv = 1.0 / static_cast<double>(end - start);
    for (std::size_t t = start; t < end; ++t) w[j * length + t] = inv;
  }
  return Tensor({bins, length}, std::move(w));
}

Tensor pool_to_encoder_input(const Tensor& per_frame, const ParamScope& feat, const ModelConfig& cfg) {
  if (per_frame.rank() != 2 || per_frame.size(0) == 0 || per_frame.size(1) != cfg.d) {
    throw ShapeError("pool_to_encoder_input: per_frame must be [l_i >= 1, d], got " +
                     shape_str(per_frame.shape()));
  }
  Tensor pooled = matmul(adaptive_pool_weights(per_frame.size(0), cfg.l), per_frame);
  Tensor flat = reshape(pooled, {cfg.l * cfg.d});
  return mlp_forward({cfg.l * cfg.d, cfg.mlp_hidden, cfg.d}, feat.sub("pool"), flat);
}

Tensor appearance_tensor(const Tracklet& t) {
  std::vector<double> v(t.appearance.begin(), t.appearance.end());
  return Tensor({t.boxes.size(), t.feature_dim}, std::move(v));
}

TrackletFeatures compute_tracklet_features(std::span<const Tracklet> tracklets, const ParamScope& feat,
                                           const ModelConfig& cfg) {
  if (tracklets.empty()) throw ShapeError("compute_tracklet_features: no tracklets");
  TrackletFeatures out;
  std::size_t total = 0;
  for (const auto& t : tracklets) {
    if (t.feature_dim != cfg.d_a || t.appearance.size() != t.boxes.size() * t.feature_dim) {
      throw ShapeError("tracklet " + std::to_string(t.id) + ": appearance width " +
                       std::to_string(t.feature_dim) + " does not match model d_a " + std::to_string(cfg.d_a));
    }
    out.offsets.push_back(total);
    out.lengths.push_back(t.boxes.size());
    total += t.boxes.size();
  }
  std::vector<double> app;
  std::vector<double> spa;
  app.reserve(total * cfg.d_a);
  spa.reserve(total * 8);
  for (const auto& t : tracklets) {
    app.insert(app.end(), t.appearance.begin(), t.appearance.end());
    const Tensor s = spatial_feature(t.boxes);
    spa.insert(spa.end(), s.data().begin(), s.data().end());
  }
  out.per_frame = init_tracklet_feature(Tensor({total, cfg.d_a}, std::move(app)),
                                        Tensor({total, 8}, std::move(spa)), feat, cfg);

  const std::size_t n = tracklets.size();
  std::vector<double> pool(n * cfg.l * total, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor w = adaptive_pool_weights(out.lengths[i], cfg.l);
    for (std::size_t b = 0; b < cfg.l; ++b)
      for (std::size_t t = 0; t < out.lengths[i]; ++t)
        pool[(i * cfg.l + b) * total + out.offsets[i] + t] = w.at(b, t);
  }
  Tensor pooled = matmul(Tensor({n * cfg.l, total}, std::move(pool)), out.per_frame);
  Tensor flat = reshape(pooled, {n, cfg.l * cfg.d});
  out.pooled = mlp_forward({cfg.l * cfg.d, cfg.mlp_hidden, cfg.d}, feat.sub("pool"), flat);
  return out;
}

}  // namespace relformer
