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

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace uttergen {

inline bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) || c == '\'' || u >= 0x80;
}

/// Word-level normalization: lowercase, split on whitespace, and detach
/// every punctuation character as its own token. Apostrophes stay inside
/// words ("what's"); bytes >= 0x80 are treated as letters so UTF-8 text
/// survives intact.
inline std::vector<std::string> normalize_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      flush();
    } else if (is_word_char(c)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
      out.emplace_back(1, c);
    }
  }
  flush();
  return out;
}

/// Splits a schema label such as "BuyBusTicket" or "Buses_1" into lowercase
/// words. Non-alphanumerics separate words, a lowercase-to-uppercase change
/// starts a new word, and purely numeric pieces (instance suffixes) are dropped.
inline std::vector<std::string> label_words(std::string_view label) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    bool numeric = true;
    for (char c : cur) numeric = numeric && std::isdigit(static_cast<unsigned char>(c));
    if (!numeric) words.push_back(cur);
    cur.clear();
  };
  for (std::size_t i = 0; i < label.size(); ++i) {
    const auto u = static_cast<unsigned char>(label[i]);
    if (!std::isalnum(u)) {
      flush();
      continue;
    }
    if (std::isupper(u) && i > 0) {
      const auto prev = static_cast<unsigned char>(label[i - 1]);
      const bool next_lower =
          i + 1 < label.size() && std::islower(static_cast<unsigned char>(label[i + 1]));
      // "BuyBus" splits before B; "TVShow" splits before S.
      if (std::islower(prev) || std::isdigit(prev) || (std::isupper(prev) && next_lower)) {
        flush();
      }
    }
    cur.push_back(static_cast<char>(std::tolower(u)));
  }
  flush();
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

/// The generation condition: service words followed by intent words.
inline std::string derive_description(std::string_view service, std::string_view intent) {
  auto words = label_words(service);
  auto iw = label_words(intent);
  words.insert(words.end(), iw.begin(), iw.end());
  return join_words(words);
}

/// Inverse of normalize_tokens up to casing and spacing: punctuation is glued
/// to the preceding word.
inline std::string detokenize(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    const bool punct = w.size() == 1 && !is_word_char(w[0]);
    if (!out.empty() && !punct) out.push_back(' ');
    out += w;
  }
  return out;
}

}  // namespace uttergen
