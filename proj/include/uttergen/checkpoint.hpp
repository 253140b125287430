// Copyright 2026 The Uttergen Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Checkpoint container:
//   "UTGNCKPT" | u32 version | u32 n | n bytes of JSON LmConfig |
//   u32 tensor count | per tensor: u32 name length, name, u32 rows, u32 cols,
//   rows*cols float32
// All integers and floats little-endian.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "uttergen/lm.hpp"

namespace uttergen {

inline constexpr std::string_view kCheckpointMagic = "UTGNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A config together with float weights: the unit that gets checkpointed.
struct LmModel {
  LmConfig config;
  LmParams<float> params;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw DataError("checkpoint " + source_ + " is truncated while reading " + what);
    }
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint32_t u32(const char* what) {
    auto b = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return v;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  const std::string& source() const { return source_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string source_;
};

}  // namespace detail

inline std::string serialize_checkpoint(const LmParams<float>& params, const LmConfig& config) {
  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg = nlohmann::json(config).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  std::uint32_t count = 0;
  for_each_tensor(params, [&](const std::string&, const Mat<float>&) { ++count; });
  detail::put_u32(out, count);
  for_each_tensor(params, [&](const std::string& name, const Mat<float>& m) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      detail::put_u32(out, std::bit_cast<std::uint32_t>(m.data()[k]));
    }
  });
  return out;
}

/// Parses a checkpoint. Any inconsistency raises DataError before a model is
/// returned, so callers never see partially loaded weights.
inline LmModel deserialize_checkpoint(std::string_view bytes, const std::string& source = "<memory>") {
  detail::ByteReader r(bytes, source);
  if (r.take(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw DataError(source + " is not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError(source + ": checkpoint format version " + std::to_string(version) +
                    " is not supported (this build reads version " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t cfg_len = r.u32("config length");
  LmModel model;
  try {
    model.config = nlohmann::json::parse(r.take(cfg_len, "config")).get<LmConfig>();
    model.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(source + ": bad checkpoint config: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(source + ": bad checkpoint config: " + e.what());
  }
  const auto shapes = tensor_shapes(model.config);
  const std::uint32_t count = r.u32("tensor count");
  if (count != shapes.size()) {
    throw DataError(source + ": expected " + std::to_string(shapes.size()) + " tensors, found " +
                    std::to_string(count));
  }
  LmParams<float> params = zero_params<float>(model.config);
  std::size_t i = 0;
  for_each_tensor(params, [&](const std::string& name, Mat<float>& m) {
    const std::uint32_t name_len = r.u32("tensor name length");
    const auto got = r.take(name_len, "tensor name");
    if (got != name) throw DataError(source + ": expected tensor " + name + ", found " + std::string(got));
    const std::uint32_t rows = r.u32("tensor rows");
    const std::uint32_t cols = r.u32("tensor cols");
    if (static_cast<int>(rows) != shapes[i].rows || static_cast<int>(cols) != shapes[i].cols) {
      throw DataError(source + ": tensor " + name + " has shape " + std::to_string(rows) + "x" +
                      std::to_string(cols) + ", config implies " + std::to_string(shapes[i].rows) +
                      "x" + std::to_string(shapes[i].cols));
    }
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = std::bit_cast<float>(r.u32("tensor data"));
    ++i;
  });
  if (!r.at_end()) throw DataError(source + ": trailing bytes after last tensor");
  model.params = std::move(params);
  return model;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const LmParams<float>& params, const LmConfig& config, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  const auto bytes = serialize_checkpoint(params, config);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path);
}

inline LmModel load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file_bytes(path), path);
}

}  // namespace uttergen
