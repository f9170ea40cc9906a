// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//
//   "SBSE" | u32 version | u32 header length | JSON header | float32 payload
//
// Integers and floats are little-endian. The header records the model kind,
// band index (or "all"), w, h, the STFT frame length and hop the model was
// trained with, and a manifest of arrays (name, shape, byte offset into the
// payload). Each array is stored row-major.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbkd/error.hpp"
#include "sbkd/network.hpp"

namespace sbkd {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'S', 'B', 'S', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind { teacher, student };

struct Checkpoint {
  ModelKind kind = ModelKind::student;
  std::optional<int> band_index;  // teachers only
  int frame_len = 320;
  int hop = 160;
  ModelParams params;
};

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}
inline std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + pos, 4);
  return v;
}
}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["kind"] = ckpt.kind == ModelKind::teacher ? "teacher" : "student";
  if (ckpt.band_index)
    header["band_index"] = *ckpt.band_index;
  else
    header["band_index"] = "all";
  header["w"] = ckpt.params.width;
  header["h"] = ckpt.params.hidden;
  header["frame_len"] = ckpt.frame_len;
  header["hop"] = ckpt.hop;

  std::string payload;
  nlohmann::json manifest = nlohmann::json::array();
  const auto arrs = arrays(ckpt.params);
  for (std::size_t k = 0; k < kArrayCount; ++k) {
    const Matrix& a = *arrs[k];
    manifest.push_back({{"name", std::string(kArrayNames[k])},
                        {"shape", {a.rows(), a.cols()}},
                        {"offset", payload.size()}});
    for (Eigen::Index r = 0; r < a.rows(); ++r)
      for (Eigen::Index c = 0; c < a.cols(); ++c) {
        const float v = static_cast<float>(a(r, c));
        char b[4];
        std::memcpy(b, &v, 4);
        payload.append(b, 4);
      }
  }
  header["arrays"] = manifest;

  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += payload;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw DataError("not a checkpoint (bad magic)");
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t header_len = detail::get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len)) throw DataError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  const std::size_t payload_begin = 12 + header_len;

  Checkpoint ckpt;
  try {
    const std::string kind = header.at("kind").get<std::string>();
    if (kind == "teacher")
      ckpt.kind = ModelKind::teacher;
    else if (kind == "student")
      ckpt.kind = ModelKind::student;
    else
      throw DataError("unknown model kind '" + kind + "'");
    if (header.at("band_index").is_number_integer()) ckpt.band_index = header.at("band_index").get<int>();
    ckpt.frame_len = header.value("frame_len", 320);
    ckpt.hop = header.value("hop", 160);
    const int w = header.at("w").get<int>();
    const int h = header.at("h").get<int>();
    if (w < 1 || h < 1) throw DataError("checkpoint has invalid w/h");
    ckpt.params = ModelParams::zeros(w, h);

    const auto arrs = arrays(ckpt.params);
    const auto& manifest = header.at("arrays");
    if (manifest.size() != kArrayCount) throw DataError("checkpoint manifest has wrong array count");
    for (std::size_t k = 0; k < kArrayCount; ++k) {
      const auto& entry = manifest[k];
      if (entry.at("name").get<std::string>() != kArrayNames[k])
        throw DataError("unexpected array '" + entry.at("name").get<std::string>() + "' in checkpoint");
      Matrix& a = *arrs[k];
      const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
      if (shape.size() != 2 || shape[0] != a.rows() || shape[1] != a.cols())
        throw DataError("array '" + std::string(kArrayNames[k]) + "' has inconsistent shape");
      const std::size_t offset = payload_begin + entry.at("offset").get<std::size_t>();
      if (offset + static_cast<std::size_t>(a.size()) * 4 > bytes.size())
        throw DataError("truncated checkpoint payload");
      std::size_t pos = offset;
      for (Eigen::Index r = 0; r < a.rows(); ++r)
        for (Eigen::Index c = 0; c < a.cols(); ++c) {
          float v;
          std::memcpy(&v, bytes.data() + pos, 4);
          pos += 4;
          a(r, c) = v;
        }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

// Same values as after a save/load cycle.
inline ModelParams round_to_float(ModelParams p) {
  for (Matrix* a : arrays(p)) *a = a->cast<float>().cast<double>();
  return p;
}

}  // namespace sbkd
