#include "scgan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace scgan {

namespace fs = std::filesystem;

const NamedTensor* CheckpointData::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

namespace {

void put_le(std::string& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_le(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_checkpoint(const fs::path& dir, const CheckpointData& checkpoint) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  std::string blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& t : checkpoint.tensors) {
    if (nn::numel(t.shape) != t.data.size())
      throw std::invalid_argument("checkpoint tensor " + t.name + " has inconsistent shape");
    const std::size_t offset = blob.size();
    for (float v : t.data) put_le(blob, v);
    entries.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"length", blob.size() - offset}});
  }
  const nlohmann::json index = {
      {"format_version", kCheckpointFormatVersion}, {"config", checkpoint.config}, {"tensors", entries}};
  write_file_atomic(dir / "blob.bin", blob);
  write_file_atomic(dir / "index.json", index.dump(2) + "\n");
}

CheckpointData read_checkpoint(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  if (!fs::exists(index_path)) throw IoError("checkpoint index missing: " + index_path.string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(slurp(index_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("malformed checkpoint index " + index_path.string() + ": " + e.what());
  }
  if (index.value("format_version", 0) != kCheckpointFormatVersion)
    throw IoError("unsupported checkpoint format_version in " + index_path.string());
  const std::string blob = slurp(dir / "blob.bin");

  CheckpointData out;
  out.config = index.value("config", nlohmann::json::object());
  try {
    for (const auto& e : index.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<nn::Shape>();
      if (e.at("dtype").get<std::string>() != "f32") throw IoError("tensor " + t.name + ": unsupported dtype");
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      if (length != 4 * nn::numel(t.shape) || offset + length > blob.size())
        throw IoError("tensor " + t.name + ": extent does not match shape or blob size");
      t.data.resize(length / 4);
      const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = get_le(p + 4 * i);
      out.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint index " + index_path.string() + ": " + e.what());
  }
  return out;
}

void append_params(CheckpointData& checkpoint, const std::string& prefix, const ParamMap<float>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensors()[i];
    checkpoint.tensors.push_back({prefix + params.names()[i], t.shape(), {t.data().begin(), t.data().end()}});
  }
}

void restore_params(const CheckpointData& checkpoint, const std::string& prefix, ParamMap<float>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = prefix + params.names()[i];
    const NamedTensor* t = checkpoint.find(name);
    if (!t) throw IoError("checkpoint lacks tensor " + name);
    auto& dst = params.tensors()[i];
    if (t->shape != dst.shape())
      throw IoError("checkpoint tensor " + name + " has shape " + nn::to_string(t->shape) + ", expected " +
                    nn::to_string(dst.shape()));
    std::copy(t->data.begin(), t->data.end(), dst.mutable_data().begin());
  }
}

}  // namespace scgan
