#include "relformer/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "relformer/errors.hpp"

namespace relformer {

namespace fs = std::filesystem;

namespace {

fs::path blob_path(const fs::path& manifest) {
  fs::path p = manifest;
  p += ".bin";
  return p;
}

void write_bytes_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const std::string& in, std::size_t off) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& contents) {
  write_bytes_atomic(path, contents);
}

void write_checkpoint(const fs::path& path, const CheckpointData& data) {
  std::string blob;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& e : data.entries) {
    tensors.push_back({{"name", e.name},
                       {"kind", e.kind},
                       {"shape", e.value.shape()},
                       {"dtype", "f64"},
                       {"offset", blob.size()}});
    for (double v : e.value.data()) put_f64(blob, v);
  }
  nlohmann::ordered_json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["blob"] = blob_path(path).filename().string();
  manifest["blob_bytes"] = blob.size();
  manifest["meta"] = data.meta;
  manifest["tensors"] = std::move(tensors);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_bytes_atomic(blob_path(path), blob);
  write_bytes_atomic(path, manifest.dump(2) + "\n");
}

CheckpointData read_checkpoint(const fs::path& path) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_all(path));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw CheckpointError("checkpoint '" + path.string() + "' has unsupported format, expected " +
                          kCheckpointFormat);
  }
  const fs::path blob_file = path.parent_path() / manifest.at("blob").get<std::string>();
  const std::string blob = read_all(blob_file);
  CheckpointData out;
  out.meta = manifest.value("meta", nlohmann::json::object());
  try {
    for (const auto& t : manifest.at("tensors")) {
      if (t.at("dtype") != "f64") throw CheckpointError("unsupported dtype in checkpoint");
      Shape shape = t.at("shape").get<Shape>();
      const std::size_t off = t.at("offset").get<std::size_t>();
      const std::size_t n = shape_numel(shape);
      if (off + 8 * n > blob.size()) {
        throw CheckpointError("checkpoint blob truncated at tensor '" + t.at("name").get<std::string>() + "'");
      }
      std::vector<double> values(n);
      for (std::size_t i = 0; i < n; ++i) values[i] = get_f64(blob, off + 8 * i);
      out.entries.push_back({t.at("name").get<std::string>(), t.at("kind").get<std::string>(),
                             Tensor(std::move(shape), std::move(values))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest '" + path.string() + "': " + e.what());
  }
  return out;
}

}  // namespace relformer
