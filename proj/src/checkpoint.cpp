#include "ddrn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace ddrn {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t& pos) {
  if (in.size() - pos < sizeof(U)) throw CheckpointError("truncated header");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

std::string version_note() { return " (reader supports format version " + std::to_string(kCheckpointVersion) + ")"; }

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["step"] = ckpt.step;
  manifest["epoch"] = ckpt.epoch;
  manifest["config"] = format_config(ckpt.config);
  nlohmann::json list = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel() * sizeof(float);
  }
  manifest["tensors"] = std::move(list);
  const std::string text = manifest.dump(1);

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : ckpt.tensors) {
    out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(float));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint: bad magic" + version_note());
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  std::uint32_t version = 0;
  std::uint64_t manifest_len = 0;
  try {
    version = get<std::uint32_t>(bytes, pos);
    manifest_len = get<std::uint64_t>(bytes, pos);
  } catch (const CheckpointError& e) {
    throw CheckpointError(std::string(e.what()) + version_note());
  }
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(version) + version_note());
  }
  if (bytes.size() - pos < manifest_len) {
    throw CheckpointError("truncated checkpoint manifest, format version " + std::to_string(version) + version_note());
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  pos += manifest_len;
  const std::size_t data_size = bytes.size() - pos;

  Checkpoint ckpt;
  try {
    if (manifest.at("format_version").get<std::uint32_t>() != version) {
      throw CheckpointError("manifest format version disagrees with header" + version_note());
    }
    ckpt.step = manifest.at("step").get<std::uint64_t>();
    ckpt.epoch = manifest.at("epoch").get<std::uint64_t>();
    std::istringstream cfg(manifest.at("config").get<std::string>());
    ckpt.config = parse_config(cfg);
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = entry.at("count").get<std::uint64_t>();
      if (shape_numel(shape) != count) throw CheckpointError("tensor '" + name + "' shape/count mismatch");
      if (offset > data_size || count * sizeof(float) > data_size - offset) {
        throw CheckpointError("truncated checkpoint data at tensor '" + name + "', format version " +
                              std::to_string(version) + version_note());
      }
      std::vector<float> values(count);
      std::memcpy(values.data(), bytes.data() + pos + offset, count * sizeof(float));
      ckpt.tensors.emplace(name, Tensor<float>(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

}  // namespace ddrn
