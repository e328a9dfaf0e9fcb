#pragma once

// Checkpoint container.
//
//   bytes 0..7    "DA6CKPT1"
//   bytes 8..15   manifest length N, unsigned 64-bit little-endian
//   next N bytes  manifest, UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "dtype"}...]}
//   remainder     float32 little-endian buffers, one per manifest tensor, in manifest order

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "da6/errors.hpp"
#include "da6/tensor.hpp"

namespace da6 {

inline constexpr char kCheckpointMagic[] = "DA6CKPT1";

struct NamedTensor {
  std::string name;
  Tensor<float> value;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
};

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["meta"] = ckpt.meta;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : ckpt.tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"dtype", "float32"}});
  }
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, 8);
  std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += text;
  for (const auto& t : ckpt.tensors) {
    for (float v : t.value.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 8, kCheckpointMagic) != 0) {
    throw ConfigError("not a checkpoint: missing DA6CKPT1 magic");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (16 + len > bytes.size()) throw ConfigError("checkpoint manifest truncated");
  const auto manifest = nlohmann::json::parse(bytes.substr(16, len));
  Checkpoint ckpt;
  ckpt.meta = manifest.at("meta");
  std::size_t offset = 16 + len;
  for (const auto& entry : manifest.at("tensors")) {
    if (entry.at("dtype") != "float32") throw ConfigError("unsupported tensor dtype " + entry.at("dtype").dump());
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t n = shape_size(shape);
    if (offset + 4 * n > bytes.size()) throw ConfigError("checkpoint tensor data truncated");
    std::vector<float> data(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (int i = 0; i < 4; ++i)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + 4 * k + i])) << (8 * i);
      data[k] = std::bit_cast<float>(bits);
    }
    offset += 4 * n;
    ckpt.tensors.push_back({entry.at("name").get<std::string>(), Tensor<float>(std::move(shape), std::move(data))});
  }
  if (offset != bytes.size()) throw ConfigError("checkpoint has trailing bytes");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + tmp);
    const auto bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

// 64-bit FNV-1a, used for stable content fingerprints (maps, scenarios).
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << v;
  return out.str();
}

}  // namespace da6
