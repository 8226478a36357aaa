#include "relformer/model.hpp"

#include <algorithm>
#include <set>

#include "relformer/checkpoint.hpp"
#include "relformer/errors.hpp"
#include "relformer/features.hpp"

namespace relformer {

RelformerModel::RelformerModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  anchors_ = build_anchors(cfg_.m_c, cfg_.m_d);
  Rng rng(seed);
  init_feature_params(params_, rng, cfg_);
  init_encoder_params(params_, rng, cfg_);
  init_decoder_params(params_, rng, cfg_);
  init_head_params(params_, rng, cfg_);
  classemes_ = random_classeme_table(cfg_.num_object_categories, cfg_.d_w, seed ^ 0x636c61737365ULL);
  bias_ = uniform_freq_bias(cfg_.num_object_categories, cfg_.num_predicates);
}

void RelformerModel::set_classemes(ClassemeTable table) {
  const Tensor& e = table.embeddings;
  if (e.rank() != 2 || e.size(0) != cfg_.num_object_categories || e.size(1) != cfg_.d_w) {
    throw ShapeError("classeme table must be [" + std::to_string(cfg_.num_object_categories) + ", " +
                     std::to_string(cfg_.d_w) + "], got " + shape_str(e.shape()));
  }
  classemes_ = std::move(table);
}

void RelformerModel::set_freq_bias(FreqBias bias) {
  if (bias.num_objects != cfg_.num_object_categories || bias.num_predicates != cfg_.num_predicates) {
    throw ShapeError("frequency bias does not match the model's category counts");
  }
  bias_ = std::move(bias);
}

ModelOutput RelformerModel::forward(const VideoSample& video) const {
  if (video.tracklets.empty()) throw ShapeError("video " + video.video_id + " has no tracklets");
  const TrackletFeatures features = compute_tracklet_features(video.tracklets, ParamScope(params_, "feat"), cfg_);
  const TrackletLayout layout = make_layout(video.tracklets, video.frame_count);
  const Tensor encoded = encode_tracklets(features.pooled, params_, cfg_);
  ModelOutput out;
  out.decoder = decoder_forward(features, layout, encoded, anchors_, params_, cfg_);
  out.links = binarize_links(out.decoder.attention);
  std::vector<int> categories;
  for (const auto& t : video.tracklets) categories.push_back(t.category);
  out.probs = classify_predicates(out.decoder.queries, out.links,
                                  classeme_matrix(video.tracklets, classemes_.embeddings), categories, bias_,
                                  ParamScope(params_, "head"), cfg_);
  return out;
}

VideoPrediction RelformerModel::predict(const VideoSample& video, std::size_t top_k) const {
  VideoPrediction p{video.video_id, {}};
  if (video.tracklets.empty()) return p;
  NoGradGuard no_grad;
  const ModelOutput out = forward(video);
  p.relations = filter_duplicates(infer_triplets(out.probs, out.links, video.tracklets, top_k));
  return p;
}

namespace {

constexpr const char* kClassemeBuffer = "head.classeme";
constexpr const char* kFreqBiasBuffer = "head.freq_bias";

}  // namespace

void RelformerModel::save(const std::filesystem::path& path, const nlohmann::json& extra_meta) const {
  CheckpointData data;
  data.meta = extra_meta;
  data.meta["model"] = cfg_;
  for (const auto& [name, t] : params_) data.entries.push_back({name, "param", t.detach()});
  data.entries.push_back({kClassemeBuffer, "buffer", classemes_.embeddings});
  data.entries.push_back({kFreqBiasBuffer, "buffer", bias_.as_tensor()});
  write_checkpoint(path, data);
}

RelformerModel RelformerModel::load(const std::filesystem::path& path) {
  const CheckpointData data = read_checkpoint(path);
  ModelConfig cfg;
  try {
    from_json(data.meta.at("model"), cfg);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": missing model config (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  RelformerModel model(cfg, 0);
  std::set<std::string> seen;
  for (const auto& e : data.entries) {
    if (!seen.insert(e.name).second) throw CheckpointError(path.string() + ": duplicate tensor " + e.name);
    if (e.kind == "param") {
      if (!model.params_.contains(e.name)) {
        throw CheckpointError(path.string() + ": unexpected parameter " + e.name);
      }
      Tensor& dst = model.params_.get(e.name);
      if (dst.shape() != e.value.shape()) {
        throw CheckpointError(path.string() + ": parameter " + e.name + " has shape " +
                              shape_str(e.value.shape()) + ", expected " + shape_str(dst.shape()));
      }
      std::copy(e.value.data().begin(), e.value.data().end(), dst.mutable_data().begin());
    } else if (e.kind == "buffer" && e.name == kClassemeBuffer) {
      try {
        model.set_classemes({e.value});
      } catch (const ShapeError& err) {
        throw CheckpointError(path.string() + ": " + err.what());
      }
    } else if (e.kind == "buffer" && e.name == kFreqBiasBuffer) {
      try {
        model.set_freq_bias(FreqBias::from_tensor(e.value));
      } catch (const ShapeError& err) {
        throw CheckpointError(path.string() + ": " + err.what());
      }
    } else {
      throw CheckpointError(path.string() + ": unknown " + e.kind + " entry " + e.name);
    }
  }
  for (const auto& name : model.params_.names())
    if (!seen.count(name)) throw CheckpointError(path.string() + ": missing parameter " + name);
  if (!seen.count(kClassemeBuffer) || !seen.count(kFreqBiasBuffer)) {
    throw CheckpointError(path.string() + ": missing head buffers");
  }
  return model;
}

}  // namespace relformer
