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

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "uttergen/error.hpp"
#include "uttergen/text.hpp"

namespace uttergen {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// A service+intent pair and the text the generator is conditioned on.
struct IntentSpec {
  std::string service;
  std::string intent;
  std::string description;

  friend bool operator==(const IntentSpec&, const IntentSpec&) = default;
};

struct UtteranceRecord {
  std::size_t intent = 0;  // index into Corpus::intents()
  std::string text;
  std::vector<std::string> words;  // normalized tokens
};

/// Labeled utterances with interned intents. Records keep insertion order.
class Corpus {
 public:
  const std::vector<IntentSpec>& intents() const { return intents_; }
  const std::vector<UtteranceRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }
  std::size_t size() const { return records_.size(); }

  const IntentSpec& intent_of(const UtteranceRecord& r) const { return intents_[r.intent]; }

  std::optional<std::size_t> find_intent(const std::string& service,
                                         const std::string& intent) const {
    auto it = index_.find({service, intent});
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Interns (service, intent). An absent description is derived from the
  /// labels; a present one is normalized. Conflicting descriptions for the
  /// same pair are an error.
  std::size_t intern(const std::string& service, const std::string& intent,
                     const std::optional<std::string>& description = std::nullopt) {
    std::string desc = description ? join_words(normalize_tokens(*description))
                                   : derive_description(service, intent);
    if (desc.empty()) {
      throw DataError("intent " + service + "/" + intent + " has an empty description");
    }
    auto [it, inserted] = index_.try_emplace({service, intent}, intents_.size());
    if (inserted) {
      intents_.push_back({service, intent, std::move(desc)});
    } else if (description && intents_[it->second].description != desc) {
      throw DataError("conflicting descriptions for intent " + service + "/" + intent);
    }
    return it->second;
  }

  void add(const std::string& service, const std::string& intent, const std::string& text,
           const std::optional<std::string>& description = std::nullopt) {
    const std::size_t idx = intern(service, intent, description);
    records_.push_back({idx, text, normalize_tokens(text)});
  }

  /// Copies one record (and its intent) from another corpus.
  void add_from(const Corpus& other, const UtteranceRecord& r) {
    const IntentSpec& spec = other.intent_of(r);
    const std::size_t idx = intern(spec.service, spec.intent, spec.description);
    records_.push_back({idx, r.text, r.words});
  }

 private:
  std::vector<IntentSpec> intents_;
  std::vector<UtteranceRecord> records_;
  std::map<std::pair<std::string, std::string>, std::size_t> index_;
};

namespace detail {

inline std::string required_string(const nlohmann::json& obj, const char* key,
                                   const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DataError(where + ": missing field \"" + key + "\"");
  if (!it->is_string()) throw DataError(where + ": field \"" + key + "\" is not a string");
  return it->get<std::string>();
}

}  // namespace detail

/// Reads line-delimited JSON records {service, intent, description?, utterance}.
/// Blank lines are skipped. Errors cite `source:line`.
inline Corpus parse_records(std::istream& in, const std::string& source = "<stream>") {
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": malformed record: " + e.what());
    }
    if (!obj.is_object()) throw DataError(where + ": record is not an object");
    std::optional<std::string> desc;
    if (auto it = obj.find("description"); it != obj.end() && !it->is_null()) {
      desc = detail::required_string(obj, "description", where);
    }
    auto service = detail::required_string(obj, "service", where);
    auto intent = detail::required_string(obj, "intent", where);
    auto utterance = detail::required_string(obj, "utterance", where);
    try {
      corpus.add(service, intent, utterance, desc);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  if (corpus.empty()) throw DataError(source + ": empty corpus");
  return corpus;
}

inline Corpus load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path);
  return parse_records(in, path);
}

inline nlohmann::json record_to_json(const Corpus& corpus, const UtteranceRecord& r) {
  const IntentSpec& spec = corpus.intent_of(r);
  nlohmann::json obj;
  obj["service"] = spec.service;
  obj["intent"] = spec.intent;
  obj["description"] = spec.description;
  obj["utterance"] = r.text;
  return obj;
}

inline void write_records(const Corpus& corpus, std::ostream& out) {
  for (const auto& r : corpus.records()) out << record_to_json(corpus, r).dump() << '\n';
}

/// Token <-> id bijection. Ids 0..6 are reserved for special tokens whose
/// spellings contain '<', which normalization always detaches, so corpus
/// text can never produce them.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kMask = 3;
  static constexpr TokenId kCondOpen = 4;
  static constexpr TokenId kCondClose = 5;
  static constexpr TokenId kUnk = 6;
  static constexpr TokenId kNumSpecial = 7;

  Vocabulary() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<mask>", "<cond>", "</cond>", "<unk>"}) {
      push(s);
    }
  }

  /// Words must be added in a deterministic order; duplicates are ignored.
  void add_word(const std::string& w) {
    if (!token_to_id_.contains(w)) push(w);
  }

  std::size_t size() const { return id_to_token_.size(); }

  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }

  TokenId id(const std::string& w) const {
    auto it = token_to_id_.find(w);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& w) const {
    auto it = token_to_id_.find(w);
    return it != token_to_id_.end() && !is_special(it->second);
  }

  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

  TokenSeq encode(const std::vector<std::string>& words) const {
    TokenSeq ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  /// Drops PAD/BOS/EOS/MASK and condition brackets; keeps <unk>.
  std::vector<std::string> decode(const TokenSeq& ids) const {
    std::vector<std::string> words;
    for (TokenId t : ids) {
      if (is_special(t) && t != kUnk) continue;
      words.push_back(token(t));
    }
    return words;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"tokens", id_to_token_}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    const auto& toks = j.at("tokens");
    if (!toks.is_array() || toks.size() < static_cast<std::size_t>(kNumSpecial)) {
      throw DataError("vocabulary file is missing special tokens");
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(kNumSpecial); ++i) {
      if (toks[i].get<std::string>() != v.id_to_token_[i]) {
        throw DataError("vocabulary special token mismatch at id " + std::to_string(i));
      }
    }
    for (std::size_t i = kNumSpecial; i < toks.size(); ++i) {
      auto w = toks[i].get<std::string>();
      if (v.token_to_id_.contains(w)) throw DataError("duplicate vocabulary token " + w);
      v.push(w);
    }
    return v;
  }

 private:
  void push(const std::string& w) {
    token_to_id_.emplace(w, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(w);
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

struct VocabOptions {
  /// Also admit every description word regardless of frequency.
  bool include_descriptions = false;
};

/// Non-special tokens are utterance words with frequency >= min_freq, in
/// lexicographic order (plus description words when requested).
inline Vocabulary build_vocabulary(const Corpus& corpus, int min_freq, VocabOptions opts = {}) {
  if (corpus.empty()) throw std::invalid_argument("build_vocabulary: empty corpus");
  if (min_freq < 1) throw std::invalid_argument("build_vocabulary: min_freq must be >= 1");
  std::map<std::string, int> freq;
  for (const auto& r : corpus.records()) {
    for (const auto& w : r.words) ++freq[w];
  }
  std::set<std::string> words;
  for (const auto& [w, n] : freq) {
    if (n >= min_freq) words.insert(w);
  }
  if (opts.include_descriptions) {
    for (const auto& spec : corpus.intents()) {
      for (auto& w : normalize_tokens(spec.description)) words.insert(std::move(w));
    }
  }
  Vocabulary v;
  for (const auto& w : words) v.add_word(w);
  return v;
}

/// One conditional training sequence. Position t of `target_ids` holds the
/// token the model must predict from positions < t.
struct TrainingExample {
  TokenSeq input_ids;
  TokenSeq target_ids;
  std::vector<bool> loss_mask;
  bool truncated = false;

  std::size_t unmasked_count() const {
    return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true));
  }
};

/// [BOS, <cond>, description..., </cond>]: the prefix every conditional
/// sequence starts with.
inline TokenSeq condition_prompt(const IntentSpec& intent, const Vocabulary& vocab) {
  auto desc = vocab.encode(normalize_tokens(intent.description));
  if (desc.empty()) throw std::invalid_argument("intent description tokenizes to nothing");
  TokenSeq p{Vocabulary::kBos, Vocabulary::kCondOpen};
  p.insert(p.end(), desc.begin(), desc.end());
  p.push_back(Vocabulary::kCondClose);
  return p;
}

/// Prefix for the unconditional base model.
inline TokenSeq unconditional_prompt() { return {Vocabulary::kBos}; }

namespace detail {

inline TrainingExample layout_example(const TokenSeq& prefix, TokenSeq utt,
                                      std::size_t context_length) {
  if (utt.empty()) throw std::invalid_argument("utterance tokenizes to nothing");
  if (prefix.size() + 2 > context_length) {
    throw DataError("condition of " + std::to_string(prefix.size()) +
                    " tokens leaves no room for an utterance within context length " +
                    std::to_string(context_length));
  }
  TrainingExample ex;
  const std::size_t room = context_length - prefix.size() - 1;  // utterance tokens that fit
  if (utt.size() > room) {
    utt.resize(room);
    ex.truncated = true;
  }
  ex.input_ids = prefix;
  ex.input_ids.insert(ex.input_ids.end(), utt.begin(), utt.end());
  ex.input_ids.push_back(Vocabulary::kEos);
  ex.target_ids.assign(prefix.size(), Vocabulary::kMask);
  ex.target_ids.insert(ex.target_ids.end(), utt.begin(), utt.end());
  ex.target_ids.push_back(Vocabulary::kEos);
  ex.loss_mask.assign(prefix.size(), false);
  ex.loss_mask.resize(ex.input_ids.size(), true);
  return ex;
}

}  // namespace detail

/// Conditional example: the condition span is masked out of the loss; an
/// over-long utterance loses its tail (the condition never does).
inline TrainingExample encode_example(const IntentSpec& intent,
                                      const std::vector<std::string>& utterance,
                                      const Vocabulary& vocab, std::size_t context_length) {
  return detail::layout_example(condition_prompt(intent, vocab), vocab.encode(utterance),
                                context_length);
}

inline TrainingExample encode_unconditional(const std::vector<std::string>& utterance,
                                            const Vocabulary& vocab,
                                            std::size_t context_length) {
  return detail::layout_example(unconditional_prompt(), vocab.encode(utterance), context_length);
}

/// Which services are unseen and how seen services' intents are divided.
struct SplitPlan {
  std::set<std::string> unseen_services;
  struct SeenService {
    std::set<std::string> train_intents;
    std::set<std::string> test_intents;
  };
  std::map<std::string, SeenService> seen_services;

  void validate() const {
    for (const auto& [svc, part] : seen_services) {
      if (unseen_services.contains(svc)) {
        throw ConfigError("service " + svc + " is both seen and unseen");
      }
      for (const auto& i : part.train_intents) {
        if (part.test_intents.contains(i)) {
          throw ConfigError("intent " + svc + "/" + i + " is on both sides of the split");
        }
      }
    }
  }

  static SplitPlan from_json(const nlohmann::json& j) {
    SplitPlan plan;
    try {
      for (const auto& s : j.value("unseen_services", nlohmann::json::array())) {
        plan.unseen_services.insert(s.get<std::string>());
      }
      const nlohmann::json seen = j.value("seen_services", nlohmann::json::object());
      for (const auto& [svc, part] : seen.items()) {
        auto& dst = plan.seen_services[svc];
        for (const auto& i : part.value("train", nlohmann::json::array())) {
          dst.train_intents.insert(i.get<std::string>());
        }
        for (const auto& i : part.value("test", nlohmann::json::array())) {
          dst.test_intents.insert(i.get<std::string>());
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed split plan: ") + e.what());
    }
    plan.validate();
    return plan;
  }
};

inline SplitPlan load_split_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split plan " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("split plan " + path + ": " + e.what());
  }
  return SplitPlan::from_json(j);
}

struct SplitResult {
  Corpus train;
  Corpus test;
  /// Records whose intent the plan does not mention, as "service/intent" -> count.
  std::map<std::string, std::size_t> dropped;
};

/// Partitions records by the plan. Every service and intent the plan names
/// must exist in the corpus.
inline SplitResult make_split(const Corpus& corpus, const SplitPlan& plan) {
  plan.validate();
  std::set<std::string> services;
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& spec : corpus.intents()) {
    services.insert(spec.service);
    pairs.insert({spec.service, spec.intent});
  }
  for (const auto& s : plan.unseen_services) {
    if (!services.contains(s)) throw DataError("split plan names unknown service " + s);
  }
  for (const auto& [svc, part] : plan.seen_services) {
    if (!services.contains(svc)) throw DataError("split plan names unknown service " + svc);
    for (const auto* side : {&part.train_intents, &part.test_intents}) {
      for (const auto& i : *side) {
        if (!pairs.contains({svc, i})) {
          throw DataError("split plan names unknown intent " + svc + "/" + i);
        }
      }
    }
  }

  SplitResult out;
  for (const auto& r : corpus.records()) {
    const IntentSpec& spec = corpus.intent_of(r);
    if (plan.unseen_services.contains(spec.service)) {
      out.test.add_from(corpus, r);
      continue;
    }
    auto it = plan.seen_services.find(spec.service);
    if (it != plan.seen_services.end()) {
      if (it->second.train_intents.contains(spec.intent)) {
        out.train.add_from(corpus, r);
        continue;
      }
      if (it->second.test_intents.contains(spec.intent)) {
        out.test.add_from(corpus, r);
        continue;
      }
    }
    ++out.dropped[spec.service + "/" + spec.intent];
  }
  return out;
}

}  // namespace uttergen
