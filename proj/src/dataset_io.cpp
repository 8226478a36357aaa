#include "relformer/dataset_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "relformer/checkpoint.hpp"
#include "relformer/errors.hpp"

namespace relformer {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'T', 'R', 'K', 'F'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Field accessor that reports file and field path on schema violations.
class Reader {
 public:
  explicit Reader(std::string file) : file_(std::move(file)) {}

  template <typename T>
  T get(const json& obj, const std::string& key, const std::string& where) const {
    if (!obj.is_object() || !obj.contains(key)) fail(where + "." + key, "missing field");
    try {
      return obj.at(key).get<T>();
    } catch (const json::exception&) {
      fail(where + "." + key, "wrong type");
    }
  }

  const json& child(const json& obj, const std::string& key, const std::string& where,
                    json::value_t type) const {
    if (!obj.is_object() || !obj.contains(key)) fail(where + "." + key, "missing field");
    const json& c = obj.at(key);
    if (c.type() != type) fail(where + "." + key, "wrong type");
    return c;
  }

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw ParseError(file_ + ": field '" + field + "': " + what);
  }

 private:
  std::string file_;
};

struct FeatureRef {
  std::string file;
  std::size_t row = 0;
};

FeatureRef parse_feature_ref(const std::string& ref, const Reader& rd, const std::string& where) {
  auto pos = ref.rfind('#');
  if (pos == std::string::npos || pos == 0 || pos + 1 >= ref.size()) rd.fail(where, "expected '<file>#<row_offset>'");
  FeatureRef out{ref.substr(0, pos), 0};
  try {
    std::size_t used = 0;
    out.row = std::stoull(ref.substr(pos + 1), &used);
    if (used != ref.size() - pos - 1) rd.fail(where, "bad row offset");
  } catch (const std::logic_error&) {
    rd.fail(where, "bad row offset");
  }
  if (out.file.find('/') != std::string::npos || out.file.find("..") != std::string::npos) {
    rd.fail(where, "feature file must be a sibling file name");
  }
  return out;
}

Tracklet parse_tracklet(const json& j, bool with_probs, const Reader& rd, const std::string& where,
                        const fs::path& dir, std::map<std::string, FeatureMatrix>& cache) {
  Tracklet t;
  t.id = rd.get<int>(j, "id", where);
  t.slot.start = rd.get<double>(j, "start", where);
  t.slot.end = rd.get<double>(j, "end", where);
  t.category = rd.get<int>(j, "category", where);
  if (with_probs) t.probs = rd.get<std::vector<double>>(j, "probs", where);
  const json& boxes = rd.child(j, "boxes", where, json::value_t::array);
  for (std::size_t f = 0; f < boxes.size(); ++f) {
    const json& b = boxes[f];
    if (!b.is_array() || b.size() != 4) rd.fail(where + ".boxes[" + std::to_string(f) + "]", "expected 4 numbers");
    Box box{};
    for (std::size_t k = 0; k < 4; ++k) {
      if (!b[k].is_number()) rd.fail(where + ".boxes[" + std::to_string(f) + "]", "expected 4 numbers");
      box[k] = b[k].get<double>();
    }
    t.boxes.push_back(box);
  }
  if (j.contains("features")) {
    const std::string fwhere = where + ".features";
    const FeatureRef ref = parse_feature_ref(rd.get<std::string>(j, "features", where), rd, fwhere);
    auto it = cache.find(ref.file);
    if (it == cache.end()) it = cache.emplace(ref.file, read_feature_matrix(dir / ref.file)).first;
    const FeatureMatrix& m = it->second;
    if (ref.row + t.boxes.size() > m.rows) rd.fail(fwhere, "row range exceeds feature file '" + ref.file + "'");
    t.feature_dim = m.cols;
    const auto begin = m.values.begin() + static_cast<std::ptrdiff_t>(ref.row * m.cols);
    t.appearance.assign(begin, begin + static_cast<std::ptrdiff_t>(t.boxes.size() * m.cols));
  } else if (with_probs) {
    rd.fail(where + ".features", "missing field");
  }
  return t;
}

ojson tracklet_json(const Tracklet& t, bool with_probs, const std::string& feature_ref) {
  ojson j;
  j["id"] = t.id;
  j["start"] = t.slot.start;
  j["end"] = t.slot.end;
  j["category"] = t.category;
  if (with_probs) j["probs"] = t.probs;
  ojson boxes = ojson::array();
  for (const Box& b : t.boxes) boxes.push_back({b[0], b[1], b[2], b[3]});
  j["boxes"] = std::move(boxes);
  if (!feature_ref.empty()) j["features"] = feature_ref;
  return j;
}

}  // namespace

void write_feature_matrix(const fs::path& path, const FeatureMatrix& m) {
  if (m.values.size() != static_cast<std::size_t>(m.rows) * m.cols) {
    throw UsageError("feature matrix size does not match rows x cols");
  }
  std::string bytes(kMagic, 4);
  put_u32(bytes, m.rows);
  put_u32(bytes, m.cols);
  put_u32(bytes, 0);
  bytes.reserve(16 + 4 * m.values.size());
  for (float v : m.values) put_u32(bytes, std::bit_cast<std::uint32_t>(v));
  write_file_atomic(path, bytes);
}

FeatureMatrix read_feature_matrix(const fs::path& path) {
  const std::string bytes = read_text(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ParseError(path.string() + ": not a TRKF feature file");
  }
  FeatureMatrix m;
  m.rows = get_u32(bytes, 4);
  m.cols = get_u32(bytes, 8);
  const std::size_t n = static_cast<std::size_t>(m.rows) * m.cols;
  if (bytes.size() != 16 + 4 * n) throw ParseError(path.string() + ": payload size does not match header");
  m.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.values[i] = std::bit_cast<float>(get_u32(bytes, 16 + 4 * i));
  return m;
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ParseError(dir.string() + ": not a directory");
  Dataset ds;
  {
    const fs::path vocab_path = dir / "vocab.json";
    Reader rd(vocab_path.string());
    json j;
    try {
      j = json::parse(read_text(vocab_path));
    } catch (const json::parse_error& e) {
      throw ParseError(vocab_path.string() + ": " + e.what());
    }
    ds.vocab.objects = rd.get<std::vector<std::string>>(j, "objects", "vocab");
    ds.vocab.predicates = rd.get<std::vector<std::string>>(j, "predicates", "vocab");
    validate(ds.vocab);
  }

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("video_", 0) == 0 && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  for (const auto& path : files) {
    Reader rd(path.string());
    json j;
    try {
      j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    std::map<std::string, FeatureMatrix> cache;
    VideoSample v;
    v.video_id = rd.get<std::string>(j, "video_id", "video");
    v.frame_count = rd.get<int>(j, "frame_count", "video");
    const json& tracklets = rd.child(j, "tracklets", "video", json::value_t::array);
    for (std::size_t i = 0; i < tracklets.size(); ++i)
      v.tracklets.push_back(parse_tracklet(tracklets[i], true, rd, "tracklets[" + std::to_string(i) + "]", dir, cache));
    const json& gts = rd.child(j, "gt_objects", "video", json::value_t::array);
    for (std::size_t i = 0; i < gts.size(); ++i)
      v.gt_objects.push_back(parse_tracklet(gts[i], false, rd, "gt_objects[" + std::to_string(i) + "]", dir, cache));
    const json& rels = rd.child(j, "gt_relations", "video", json::value_t::array);
    for (std::size_t i = 0; i < rels.size(); ++i) {
      const std::string where = "gt_relations[" + std::to_string(i) + "]";
      GtRelation r;
      r.subject = rd.get<int>(rels[i], "subject", where);
      r.object = rd.get<int>(rels[i], "object", where);
      r.predicate = rd.get<int>(rels[i], "predicate", where);
      r.slot.start = rd.get<double>(rels[i], "start", where);
      r.slot.end = rd.get<double>(rels[i], "end", where);
      v.gt_relations.push_back(r);
    }
    try {
      validate(v, ds.vocab);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
    ds.videos.push_back(std::move(v));
  }
  std::sort(ds.videos.begin(), ds.videos.end(),
            [](const VideoSample& a, const VideoSample& b) { return a.video_id < b.video_id; });
  return ds;
}

void save_dataset(const fs::path& dir, const Dataset& dataset) {
  fs::create_directories(dir);
  {
    ojson vocab;
    vocab["objects"] = dataset.vocab.objects;
    vocab["predicates"] = dataset.vocab.predicates;
    write_file_atomic(dir / "vocab.json", vocab.dump(1) + "\n");
  }
  for (const auto& v : dataset.videos) {
    const std::string stem = "video_" + v.video_id;
    const std::string feature_file = stem + ".trkf";
    FeatureMatrix features;
    std::size_t rows = 0;

    auto add_features = [&](const Tracklet& t) -> std::string {
      if (t.appearance.empty()) return {};
      if (features.cols == 0) features.cols = static_cast<std::uint32_t>(t.feature_dim);
      if (t.feature_dim != features.cols) {
        throw UsageError("video " + v.video_id + ": inconsistent feature widths");
      }
      const std::string ref = feature_file + "#" + std::to_string(rows);
      features.values.insert(features.values.end(), t.appearance.begin(), t.appearance.end());
      rows += t.boxes.size();
      return ref;
    };

    ojson j;
    j["video_id"] = v.video_id;
    j["frame_count"] = v.frame_count;
    ojson tracklets = ojson::array();
    for (const auto& t : v.tracklets) tracklets.push_back(tracklet_json(t, true, add_features(t)));
    j["tracklets"] = std::move(tracklets);
    ojson gts = ojson::array();
    for (const auto& g : v.gt_objects) gts.push_back(tracklet_json(g, false, add_features(g)));
    j["gt_objects"] = std::move(gts);
    ojson rels = ojson::array();
    for (const auto& r : v.gt_relations) {
      rels.push_back({{"subject", r.subject},
                      {"object", r.object},
                      {"predicate", r.predicate},
                      {"start", r.slot.start},
                      {"end", r.slot.end}});
    }
    j["gt_relations"] = std::move(rels);

    features.rows = static_cast<std::uint32_t>(rows);
    write_feature_matrix(dir / feature_file, features);
    write_file_atomic(dir / (stem + ".json"), j.dump() + "\n");
  }
}

}  // namespace relformer
