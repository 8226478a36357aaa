#include "relformer/cli.hpp"

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "relformer/checkpoint.hpp"
#include "relformer/dataset_io.hpp"
#include "relformer/errors.hpp"
#include "relformer/model.hpp"

namespace relformer {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const std::string& section, const std::string& key, T& dst) {
  try {
    dst = j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(section + "." + key + " has the wrong type");
  }
}

void read_count(const nlohmann::json& j, const std::string& section, const std::string& key, std::size_t& dst) {
  if (!j.is_number_unsigned()) throw ConfigError(section + "." + key + " must be a non-negative integer");
  dst = j.get<std::size_t>();
}

void read_int(const nlohmann::json& j, const std::string& section, const std::string& key, int& dst) {
  if (!j.is_number_integer()) throw ConfigError(section + "." + key + " must be an integer");
  dst = j.get<int>();
}

void read_number(const nlohmann::json& j, const std::string& section, const std::string& key, double& dst) {
  if (!j.is_number()) throw ConfigError(section + "." + key + " must be a number");
  dst = j.get<double>();
}

void require_object(const nlohmann::json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
}

void apply_synth(const nlohmann::json& j, SynthConfig& s) {
  const std::string sec = "data.synth";
  require_object(j, sec);
  for (const auto& [k, v] : j.items()) {
    if (k == "videos") read_int(v, sec, k, s.videos);
    else if (k == "frame_count") read_int(v, sec, k, s.frame_count);
    else if (k == "num_object_categories") read_int(v, sec, k, s.num_object_categories);
    else if (k == "num_predicates") read_int(v, sec, k, s.num_predicates);
    else if (k == "feature_dim") read_int(v, sec, k, s.feature_dim);
    else if (k == "min_objects") read_int(v, sec, k, s.min_objects);
    else if (k == "max_objects") read_int(v, sec, k, s.max_objects);
    else if (k == "distractors") read_int(v, sec, k, s.distractors);
    else if (k == "noise") read_number(v, sec, k, s.noise);
    else if (k == "seed") {
      if (!v.is_number_unsigned()) throw ConfigError(sec + ".seed must be a non-negative integer");
      s.seed = v.get<std::uint64_t>();
    } else throw ConfigError(sec + "." + k + " is not a known field");
  }
}

void apply_train(const nlohmann::json& j, TrainConfig& t) {
  const std::string sec = "train";
  require_object(j, sec);
  for (const auto& [k, v] : j.items()) {
    if (k == "lambda_cls") read_number(v, sec, k, t.lambda_cls);
    else if (k == "lambda_att") read_number(v, sec, k, t.lambda_att);
    else if (k == "lr") read_number(v, sec, k, t.lr);
    else if (k == "batch") read_count(v, sec, k, t.batch);
    else if (k == "epochs") read_count(v, sec, k, t.epochs);
    else if (k == "save_every") read_count(v, sec, k, t.save_every);
    else if (k == "max_grad_norm") read_number(v, sec, k, t.max_grad_norm);
    else if (k == "assign_threshold") read_number(v, sec, k, t.assign_threshold);
    else throw ConfigError(sec + "." + k + " is not a known field");
  }
}

void apply_eval(const nlohmann::json& j, RunConfig& cfg) {
  const std::string sec = "eval";
  require_object(j, sec);
  for (const auto& [k, v] : j.items()) {
    if (k == "viou_threshold") read_number(v, sec, k, cfg.eval.viou_threshold);
    else if (k == "recall_ks") read_field(v, sec, k, cfg.eval.recall_ks);
    else if (k == "precision_ks") read_field(v, sec, k, cfg.eval.precision_ks);
    else if (k == "top_k") read_count(v, sec, k, cfg.top_k);
    else throw ConfigError(sec + "." + k + " is not a known field");
  }
}

void apply_data(const nlohmann::json& j, DataConfig& d) {
  const std::string sec = "data";
  require_object(j, sec);
  for (const auto& [k, v] : j.items()) {
    if (k == "dataset") read_field(v, sec, k, d.dataset);
    else if (k == "embeddings") read_field(v, sec, k, d.embeddings);
    else if (k == "synth") apply_synth(v, d.synth);
    else throw ConfigError(sec + "." + k + " is not a known field");
  }
}

ojson synth_to_json(const SynthConfig& s) {
  ojson j;
  j["videos"] = s.videos;
  j["frame_count"] = s.frame_count;
  j["num_object_categories"] = s.num_object_categories;
  j["num_predicates"] = s.num_predicates;
  j["feature_dim"] = s.feature_dim;
  j["min_objects"] = s.min_objects;
  j["max_objects"] = s.max_objects;
  j["distractors"] = s.distractors;
  j["noise"] = s.noise;
  j["seed"] = s.seed;
  return j;
}

}  // namespace

nlohmann::ordered_json run_config_to_json(const RunConfig& cfg) {
  ojson j;
  j["seed"] = cfg.seed;
  nlohmann::json model = cfg.model;
  j["model"] = ojson::parse(model.dump());
  ojson t;
  t["lambda_cls"] = cfg.train.lambda_cls;
  t["lambda_att"] = cfg.train.lambda_att;
  t["lr"] = cfg.train.lr;
  t["batch"] = cfg.train.batch;
  t["epochs"] = cfg.train.epochs;
  t["save_every"] = cfg.train.save_every;
  t["max_grad_norm"] = cfg.train.max_grad_norm;
  t["assign_threshold"] = cfg.train.assign_threshold;
  j["train"] = std::move(t);
  ojson d;
  d["dataset"] = cfg.data.dataset;
  d["embeddings"] = cfg.data.embeddings;
  d["synth"] = synth_to_json(cfg.data.synth);
  j["data"] = std::move(d);
  ojson e;
  e["viou_threshold"] = cfg.eval.viou_threshold;
  e["recall_ks"] = cfg.eval.recall_ks;
  e["precision_ks"] = cfg.eval.precision_ks;
  e["top_k"] = cfg.top_k;
  j["eval"] = std::move(e);
  return j;
}

void apply_run_config_json(const nlohmann::json& j, RunConfig& cfg) {
  require_object(j, "config");
  for (const auto& [k, v] : j.items()) {
    if (k == "seed") {
      if (!v.is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
      cfg.seed = v.get<std::uint64_t>();
    } else if (k == "model") {
      from_json(v, cfg.model);
    } else if (k == "train") {
      apply_train(v, cfg.train);
    } else if (k == "data") {
      apply_data(v, cfg.data);
    } else if (k == "eval") {
      apply_eval(v, cfg);
    } else {
      throw ConfigError(k + " is not a known config section");
    }
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig cfg;
  apply_run_config_json(j, cfg);
  return cfg;
}

void apply_override(const std::string& assignment, RunConfig& cfg) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must be key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
    parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  apply_run_config_json(patch, cfg);
}

void validate(const RunConfig& cfg) {
  validate(cfg.model);
  validate(cfg.train);
  validate(cfg.eval);
  if (cfg.top_k == 0) throw ConfigError("eval.top_k must be positive");
}

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  int threads = 0;
};

RunConfig resolve_config(const CommonOptions& common) {
  RunConfig cfg = common.config.empty() ? RunConfig{} : load_run_config(common.config);
  for (const auto& o : common.overrides) apply_override(o, cfg);
  return cfg;
}

std::size_t resolve_threads(int flag) {
  if (flag > 0) return static_cast<std::size_t>(flag);
  if (const char* env = std::getenv("RELFORMER_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v <= 0) throw ConfigError("RELFORMER_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return 1;
}

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file_atomic(p, text);
}

bool is_dataset_file(const fs::path& p) {
  const std::string name = p.filename().string();
  return name == "vocab.json" ||
         (name.rfind("video_", 0) == 0 && (p.extension() == ".json" || p.extension() == ".trkf"));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<VideoPrediction> predict_all(const std::vector<RelformerModel>& models, const Dataset& ds,
                                         std::size_t top_k, std::size_t threads) {
  std::vector<VideoPrediction> out(ds.videos.size());
  std::vector<std::string> errors(ds.videos.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t v; (v = next.fetch_add(1)) < ds.videos.size();) {
      try {
        std::vector<VideoPrediction> per_model;
        for (const auto& m : models) per_model.push_back(m.predict(ds.videos[v], top_k));
        out[v] = per_model.size() == 1 ? std::move(per_model.front()) : ensemble_merge(per_model);
      } catch (const std::exception& e) {
        errors[v] = e.what();
      }
    }
  };
  const std::size_t n = std::min(threads, std::max<std::size_t>(1, ds.videos.size()));
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (std::size_t v = 0; v < errors.size(); ++v)
    if (!errors[v].empty()) throw ShapeError("video " + ds.videos[v].video_id + ": " + errors[v]);
  return out;
}

std::vector<RelformerModel> load_models(const std::string& list) {
  const auto paths = split_list(list);
  if (paths.empty()) throw UsageError("--ckpt needs at least one checkpoint path");
  std::vector<RelformerModel> models;
  for (const auto& p : paths) models.push_back(RelformerModel::load(p));
  return models;
}

void derive_data_dims(const Dataset& ds, ModelConfig& model) {
  const ModelConfig defaults;
  auto set = [](std::size_t& field, std::size_t def, std::size_t value, const char* name) {
    if (field != def && field != value) {
      throw ConfigError(std::string("model.") + name + " = " + std::to_string(field) + " conflicts with the dataset (" +
                        std::to_string(value) + ")");
    }
    field = value;
  };
  set(model.num_object_categories, defaults.num_object_categories, ds.vocab.num_objects(), "num_object_categories");
  set(model.num_predicates, defaults.num_predicates, ds.vocab.num_predicates(), "num_predicates");
  for (const auto& v : ds.videos) {
    if (v.tracklets.empty()) continue;
    set(model.d_a, defaults.d_a, v.tracklets.front().feature_dim, "d_a");
    break;
  }
}

void add_common(CLI::App* cmd, CommonOptions& common) {
  cmd->add_option("--config", common.config, "JSON run configuration");
  cmd->add_option("--set", common.overrides, "Override a config field, e.g. --set model.d=64")->take_all();
}

int cmd_synth(const CommonOptions& common, const std::string& out_dir, bool force,
              const std::function<void(SynthConfig&)>& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(common);
  flags(cfg.data.synth);
  validate(cfg.data.synth);
  const fs::path dir(out_dir);
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError(out_dir + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw UsageError(out_dir + " is not empty; pass --force to overwrite");
      std::vector<fs::path> stale;
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && is_dataset_file(e.path())) stale.push_back(e.path());
      for (const auto& p : stale) fs::remove(p);
    }
  }
  const Dataset ds = synth_generate(cfg.data.synth);
  save_dataset(dir, ds);
  out << "wrote " << ds.videos.size() << " videos to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train(const CommonOptions& common, const std::string& data_dir, const std::string& out_dir,
              const std::function<void(RunConfig&)>& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(common);
  if (!data_dir.empty()) cfg.data.dataset = data_dir;
  flags(cfg);
  if (cfg.data.dataset.empty()) throw UsageError("train needs --data or data.dataset");
  const Dataset ds = load_dataset(cfg.data.dataset);
  derive_data_dims(ds, cfg.model);
  validate(cfg);
  cfg.train.seed = cfg.seed;

  RelformerModel model(cfg.model, cfg.seed);
  if (!cfg.data.embeddings.empty())
    model.set_classemes(load_classeme_table(cfg.data.embeddings, cfg.model.num_object_categories));

  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_file_atomic(dir / "run_config.json", run_config_to_json(cfg).dump(2) + "\n");
  const nlohmann::json meta = {{"seed", cfg.seed}};
  auto checkpoint = [&](std::size_t epoch) {
    nlohmann::json m = meta;
    m["epoch"] = epoch;
    return m;
  };
  const TrainResult result = train_loop(ds, model, cfg.train, [&](std::size_t epoch, const TrainResult& so_far) {
    out << "epoch " << epoch << " loss " << so_far.epoch_means.back() << "\n";
    write_file_atomic(dir / "loss.csv", loss_trace_csv(so_far.trace));
    if (cfg.train.save_every > 0 && epoch % cfg.train.save_every == 0) {
      model.save(dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), checkpoint(epoch));
    }
  });
  write_file_atomic(dir / "loss.csv", loss_trace_csv(result.trace));
  model.save(dir / "model.ckpt", checkpoint(cfg.train.epochs));
  out << "saved " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_eval(const CommonOptions& common, const std::string& data_dir, const std::string& ckpts,
             const std::string& out_path, const std::string& csv_path, const std::function<void(RunConfig&)>& flags,
             std::ostream& out) {
  RunConfig cfg = resolve_config(common);
  if (!data_dir.empty()) cfg.data.dataset = data_dir;
  flags(cfg);
  validate(cfg.eval);
  if (cfg.top_k == 0) throw ConfigError("eval.top_k must be positive");
  if (cfg.data.dataset.empty()) throw UsageError("eval needs --data or data.dataset");
  const Dataset ds = load_dataset(cfg.data.dataset);
  const auto models = load_models(ckpts);
  const auto preds = predict_all(models, ds, cfg.top_k, resolve_threads(common.threads));
  const EvalReport report = evaluate(preds, ds, cfg.eval);
  write_text(out_path, report_to_json(report).dump(2) + "\n", out);
  if (!csv_path.empty()) write_text(csv_path, per_video_csv(report), out);
  return kExitOk;
}

int cmd_infer(const CommonOptions& common, const std::string& data_dir, const std::string& ckpts,
              const std::string& out_path, const std::function<void(RunConfig&)>& flags, std::ostream& out) {
  RunConfig cfg = resolve_config(common);
  if (!data_dir.empty()) cfg.data.dataset = data_dir;
  flags(cfg);
  if (cfg.top_k == 0) throw ConfigError("eval.top_k must be positive");
  if (cfg.data.dataset.empty()) throw UsageError("infer needs --data or data.dataset");
  const Dataset ds = load_dataset(cfg.data.dataset);
  const auto models = load_models(ckpts);
  const auto preds = predict_all(models, ds, cfg.top_k, resolve_threads(common.threads));
  ojson arr = ojson::array();
  for (const auto& p : preds) arr.push_back(prediction_to_json(p));
  write_text(out_path, arr.dump(2) + "\n", out);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tracklet Transformer for video relation detection"};
  app.name("relformer");
  app.require_subcommand(1);
  std::function<int()> action;

  CommonOptions common;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string synth_out;
  bool force = false;
  std::optional<int> videos, frames, objects, min_objects, max_objects, distractors, obj_cats, preds, feat_dim;
  std::optional<double> noise;
  std::optional<std::uint64_t> synth_seed;
  add_common(synth, common);
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_flag("--force", force, "Overwrite dataset files in a non-empty directory");
  synth->add_option("--videos", videos, "Number of videos");
  synth->add_option("--frames", frames, "Frames per video");
  synth->add_option("--objects", objects, "Minimum objects per video");
  synth->add_option("--min-objects", min_objects, "Minimum objects per video");
  synth->add_option("--max-objects", max_objects, "Maximum objects per video");
  synth->add_option("--distractors", distractors, "Unrelated detections per video");
  synth->add_option("--object-categories", obj_cats, "Object vocabulary size");
  synth->add_option("--predicates", preds, "Predicate vocabulary size (at most 8)");
  synth->add_option("--feature-dim", feat_dim, "Appearance feature width");
  synth->add_option("--noise", noise, "Detection noise level in [0, 1]");
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->callback([&] {
    action = [&] {
      return cmd_synth(common, synth_out, force, [&](SynthConfig& s) {
        if (videos) s.videos = *videos;
        if (frames) s.frame_count = *frames;
        if (objects) {
          s.min_objects = *objects;
          s.max_objects = std::max(s.max_objects, *objects);
        }
        if (min_objects) s.min_objects = *min_objects;
        if (max_objects) s.max_objects = *max_objects;
        if (distractors) s.distractors = *distractors;
        if (obj_cats) s.num_object_categories = *obj_cats;
        if (preds) s.num_predicates = *preds;
        if (feat_dim) s.feature_dim = *feat_dim;
        if (noise) s.noise = *noise;
        if (synth_seed) s.seed = *synth_seed;
      }, out);
    };
  });

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_data, train_out;
  std::optional<std::size_t> epochs, batch, save_every;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  add_common(train, common);
  train->add_option("--data", train_data, "Dataset directory");
  train->add_option("--out", train_out, "Output directory for checkpoints and the loss trace")->required();
  train->add_option("--epochs", epochs, "Training epochs");
  train->add_option("--lr", lr, "Adam learning rate");
  train->add_option("--batch", batch, "Videos per batch");
  train->add_option("--save-every", save_every, "Epochs between periodic checkpoints (0 = off)");
  train->add_option("--seed", seed, "Initialization and shuffling seed");
  train->add_option("--threads", common.threads, "Worker threads (default RELFORMER_THREADS or 1)");
  train->callback([&] {
    action = [&] {
      return cmd_train(common, train_data, train_out, [&](RunConfig& c) {
        if (epochs) c.train.epochs = *epochs;
        if (lr) c.train.lr = *lr;
        if (batch) c.train.batch = *batch;
        if (save_every) c.train.save_every = *save_every;
        if (seed) c.seed = *seed;
      }, out);
    };
  });

  // eval / infer share their flags
  std::string data, ckpts, out_path, csv_path;
  std::optional<std::size_t> top_k;
  std::optional<double> viou;
  auto eval_flags = [&](RunConfig& c) {
    if (top_k) c.top_k = *top_k;
    if (viou) c.eval.viou_threshold = *viou;
  };
  auto* eval = app.add_subcommand("eval", "Evaluate one checkpoint or an ensemble");
  add_common(eval, common);
  eval->add_option("--data", data, "Dataset directory");
  eval->add_option("--ckpt", ckpts, "Checkpoint path(s), comma separated")->required();
  eval->add_option("--out", out_path, "Report path (default stdout)");
  eval->add_option("--csv", csv_path, "Per-video CSV breakdown path");
  eval->add_option("--top-k", top_k, "Predictions kept per query");
  eval->add_option("--viou", viou, "vIoU threshold for a detection match");
  eval->add_option("--threads", common.threads, "Worker threads (default RELFORMER_THREADS or 1)");
  eval->callback([&] { action = [&] { return cmd_eval(common, data, ckpts, out_path, csv_path, eval_flags, out); }; });

  auto* infer = app.add_subcommand("infer", "Write predicted relations per video");
  add_common(infer, common);
  infer->add_option("--data", data, "Dataset directory");
  infer->add_option("--ckpt", ckpts, "Checkpoint path(s), comma separated")->required();
  infer->add_option("--out", out_path, "Predictions path (default stdout)");
  infer->add_option("--top-k", top_k, "Predictions kept per query");
  infer->add_option("--threads", common.threads, "Worker threads (default RELFORMER_THREADS or 1)");
  infer->callback([&] { action = [&] { return cmd_infer(common, data, ckpts, out_path, eval_flags, out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    return action ? action() : kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace relformer
