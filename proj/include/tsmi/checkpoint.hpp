#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsmi/model.hpp"
#include "tsmi/rng.hpp"
#include "tsmi/tensor.hpp"

// Named-tensor container shared by model and SAE checkpoints:
//
//   "TSMI" | u32 version | u32 header_len | header (UTF-8 JSON) | payload
//
// The header holds {"format", "config", "tensors": [{name, shape, offset}]};
// offsets are relative to the payload start. The payload is little-endian
// float32, row-major, in manifest order.
namespace tsmi {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

inline constexpr char kMagic[4] = {'T', 'S', 'M', 'I'};
inline constexpr std::uint32_t kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorContainer {
  std::string format;
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
  }
};

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::string hash_hex(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

/// FNV-1a 64 of the file contents, as 16 hex digits.
inline std::string file_hash(const std::filesystem::path& path) {
  return hash_hex(read_file_bytes(path));
}

inline std::string encode_container(const TensorContainer& c) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  }
  nlohmann::json header = {{"format", c.format}, {"config", c.config}, {"tensors", manifest}};
  const std::string hs = header.dump();
  std::string out(kMagic, 4);
  auto put_u32 = [&](std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
  };
  put_u32(kFormatVersion);
  put_u32(static_cast<std::uint32_t>(hs.size()));
  out += hs;
  for (const auto& [name, t] : c.tensors)
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  return out;
}

inline TensorContainer decode_container(std::string_view bytes) {
  if (bytes.size() < 12) throw CheckpointError("checkpoint truncated: missing preamble");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("not a TSMI checkpoint: bad magic bytes");
  std::uint32_t version = 0, hlen = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&hlen, bytes.data() + 8, 4);
  if (version != kFormatVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  if (bytes.size() < 12 + static_cast<std::size_t>(hlen))
    throw CheckpointError("checkpoint truncated: header incomplete");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  TensorContainer c;
  c.format = header.at("format").get<std::string>();
  c.config = header.at("config");
  const std::string_view payload = bytes.substr(12 + hlen);
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (off + n * sizeof(float) > payload.size())
      throw CheckpointError("checkpoint truncated: tensor '" + entry.at("name").get<std::string>() +
                            "' extends past end of file");
    std::vector<float> data(n);
    std::memcpy(data.data(), payload.data() + off, n * sizeof(float));
    c.tensors.emplace_back(entry.at("name").get<std::string>(),
                           Tensor<float>(std::move(shape), std::move(data)));
  }
  return c;
}

inline void write_container(const std::filesystem::path& path, const TensorContainer& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::string bytes = encode_container(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline TensorContainer read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path));
}

inline TensorContainer model_container(const Model& model) {
  TensorContainer c;
  c.format = "tst_model";
  c.config = model.config();
  model.visit_tensors([&](const std::string& name, const Tensor<float>& t, bool) {
    c.tensors.emplace_back(name, t);
  });
  return c;
}

inline Model model_from_container(const TensorContainer& c) {
  if (c.format != "tst_model")
    throw CheckpointError("expected a tst_model checkpoint, found '" + c.format + "'");
  ModelConfig cfg;
  try {
    cfg = c.config.get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad model config in checkpoint: ") + e.what());
  }
  Model m(cfg);
  m.visit_tensors([&](const std::string& name, Tensor<float>& t, bool) {
    const Tensor<float>& src = c.get(name);
    if (src.shape() != t.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(src.shape()) +
                            " but config implies " + shape_str(t.shape()));
    t = src;
  });
  return m;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_container(path, model_container(model));
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  return model_from_container(read_container(path));
}

}  // namespace tsmi
