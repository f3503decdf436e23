#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "acmn/common.hpp"
#include "acmn/model.hpp"

// Binary checkpoint: a JSON header carrying the model config plus arbitrary
// scalar metadata, followed by named float32 blobs. Model tensors are written
// in their canonical order and extra blobs (optimizer state) sorted by name,
// so a write -> read -> write round trip is byte identical.

namespace acmn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559,
              "checkpoint io assumes 32-bit ieee floats");

struct Checkpoint {
  ParamSet<float> params;
  nlohmann::json extra;
  std::map<std::string, std::vector<float>> blobs;
};

namespace detail {

constexpr char kCkptMagic[4] = {'A', 'C', 'M', 'N'};
constexpr std::uint32_t kCkptVersion = 1;

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
  if (!os) throw IoError("checkpoint: write failed");
}

inline void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (is.gcount() != std::streamsize(n))
    throw FormatError("checkpoint: truncated file");
}

inline void put_u32(std::ostream& os, std::uint32_t v) { put_bytes(os, &v, 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_bytes(os, &v, 8); }

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v;
  get_bytes(is, &v, 4);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v;
  get_bytes(is, &v, 8);
  return v;
}

inline void put_record(std::ostream& os, const std::string& name,
                       const Shape& shape, const std::vector<float>& data) {
  if (std::size_t(numel(shape)) != data.size())
    throw ContractError("checkpoint: shape does not match data for " + name);
  put_u32(os, std::uint32_t(name.size()));
  put_bytes(os, name.data(), name.size());
  put_u32(os, std::uint32_t(shape.size()));
  for (int d : shape) put_u32(os, std::uint32_t(d));
  put_bytes(os, data.data(), data.size() * sizeof(float));
}

}  // namespace detail

inline void write_checkpoint(const std::string& path,
                             const ParamSet<float>& params,
                             const nlohmann::json& extra = nlohmann::json::object(),
                             const std::map<std::string, std::vector<float>>& blobs = {}) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");

  nlohmann::json header;
  header["format"] = detail::kCkptVersion;
  header["config"] = params.cfg.to_json();
  header["extra"] = extra;
  std::string htext = header.dump();

  detail::put_bytes(os, detail::kCkptMagic, 4);
  detail::put_u32(os, detail::kCkptVersion);
  detail::put_u64(os, htext.size());
  detail::put_bytes(os, htext.data(), htext.size());

  for (const ParamTensor<float>& t : params.tensors)
    detail::put_record(os, t.name, t.shape, t.data);
  for (const auto& [name, data] : blobs) {
    if (params.index.count(name))
      throw ContractError("checkpoint: blob name collides with tensor " + name);
    detail::put_record(os, name, {int(data.size())}, data);
  }
  os.flush();
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);

  char magic[4];
  detail::get_bytes(is, magic, 4);
  if (std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic in " + path);
  std::uint32_t version = detail::get_u32(is);
  if (version != detail::kCkptVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));

  std::uint64_t hlen = detail::get_u64(is);
  std::string htext(hlen, '\0');
  detail::get_bytes(is, htext.data(), hlen);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header json: ") + e.what());
  }

  Checkpoint ck;
  ModelConfig cfg = ModelConfig::from_json(header.at("config"));
  ck.params = ParamSet<float>::zeros(cfg);
  ck.extra = header.value("extra", nlohmann::json::object());

  std::vector<bool> seen(ck.params.tensors.size(), false);
  while (true) {
    is.peek();
    if (is.eof()) break;
    std::uint32_t name_len = detail::get_u32(is);
    std::string name(name_len, '\0');
    detail::get_bytes(is, name.data(), name_len);
    std::uint32_t rank = detail::get_u32(is);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i)
      shape[i] = int(detail::get_u32(is));
    std::vector<float> data(std::size_t(numel(shape)));
    detail::get_bytes(is, data.data(), data.size() * sizeof(float));

    auto it = ck.params.index.find(name);
    if (it != ck.params.index.end()) {
      ParamTensor<float>& t = ck.params.tensors[it->second];
      if (!same_shape(t.shape, shape))
        throw FormatError("checkpoint: tensor " + name + " has shape " +
                          shape_str(shape) + ", expected " + shape_str(t.shape));
      t.data = std::move(data);
      seen[it->second] = true;
    } else {
      ck.blobs[name] = std::move(data);
    }
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i])
      throw FormatError("checkpoint: missing tensor " +
                        ck.params.tensors[i].name);
  return ck;
}

}  // namespace acmn
