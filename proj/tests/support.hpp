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

#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "uttergen/corpus.hpp"
#include "uttergen/lm.hpp"

namespace uttergen::testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(UTTERGEN_FIXTURE_DIR) / name;
}

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("uttergen-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

  std::filesystem::path write(const std::string& rel, const std::string& content) const {
    const auto p = path_ / rel;
    std::filesystem::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << content;
    return p;
  }

 private:
  std::filesystem::path path_;
};

inline Corpus corpus_from(const std::string& jsonl) {
  std::istringstream in(jsonl);
  return parse_records(in, "<test>");
}

inline LmConfig micro_config(int vocab = 12, int dim = 8, int layers = 1, int heads = 2, int ff = 16,
                             int context = 10) {
  LmConfig c;
  c.vocab_size = vocab;
  c.embedding_dim = dim;
  c.num_layers = layers;
  c.num_heads = heads;
  c.ff_dim = ff;
  c.context_length = context;
  c.seed = 7;
  return c;
}

}  // namespace uttergen::testing
