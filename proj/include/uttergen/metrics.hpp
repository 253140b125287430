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

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "uttergen/corpus.hpp"
#include "uttergen/error.hpp"
#include "uttergen/rng.hpp"
#include "uttergen/text.hpp"

namespace uttergen {

using Utterance = std::vector<std::string>;

namespace detail {

/// k-gram occurrence counts across utterances; k-grams never span utterances.
inline std::map<std::vector<std::string>, std::size_t> count_kgrams(const std::vector<Utterance>& utts,
                                                                    std::size_t k, std::size_t& total) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  std::map<std::vector<std::string>, std::size_t> counts;
  total = 0;
  for (const auto& u : utts) {
    for (std::size_t i = 0; i + k <= u.size(); ++i) {
      ++counts[std::vector<std::string>(u.begin() + static_cast<std::ptrdiff_t>(i),
                                        u.begin() + static_cast<std::ptrdiff_t>(i + k))];
      ++total;
    }
  }
  if (total == 0) {
    throw DataError("no utterance has at least " + std::to_string(k) + " tokens");
  }
  return counts;
}

}  // namespace detail

/// Distinct k-grams divided by the total number of tokens (not k-grams).
inline double dist_k(const std::vector<Utterance>& utts, std::size_t k) {
  std::size_t total = 0;
  const auto counts = detail::count_kgrams(utts, k, total);
  std::size_t tokens = 0;
  for (const auto& u : utts) tokens += u.size();
  return static_cast<double>(counts.size()) / static_cast<double>(tokens);
}

/// Entropy (natural log) of the empirical k-gram distribution.
inline double ent_k(const std::vector<Utterance>& utts, std::size_t k) {
  std::size_t total = 0;
  const auto counts = detail::count_kgrams(utts, k, total);
  double h = 0;
  for (const auto& [g, c] : counts) {
    const double f = static_cast<double>(c) / static_cast<double>(total);
    h -= f * std::log(f);
  }
  return h;
}

/// Diversity for k = 1..4; orders with no k-gram are omitted.
struct DiversityStats {
  std::size_t utterances = 0;
  std::size_t tokens = 0;
  std::map<int, double> dist;
  std::map<int, double> ent;
};

inline DiversityStats diversity_stats(const std::vector<Utterance>& utts, int max_k = 4) {
  DiversityStats s;
  s.utterances = utts.size();
  for (const auto& u : utts) s.tokens += u.size();
  for (int k = 1; k <= max_k; ++k) {
    try {
      s.dist[k] = dist_k(utts, static_cast<std::size_t>(k));
      s.ent[k] = ent_k(utts, static_cast<std::size_t>(k));
    } catch (const DataError&) {
      // No k-grams of this order.
    }
  }
  return s;
}

inline void to_json(nlohmann::json& j, const DiversityStats& s) {
  nlohmann::json dist = nlohmann::json::object(), ent = nlohmann::json::object();
  for (const auto& [k, v] : s.dist) dist["dist_" + std::to_string(k)] = v;
  for (const auto& [k, v] : s.ent) ent["ent_" + std::to_string(k)] = v;
  j = nlohmann::json{{"utterances", s.utterances}, {"tokens", s.tokens}, {"dist", dist}, {"ent", ent}};
}

/// Multinomial logistic regression over unigram + bigram counts.
class IntentClassifier {
 public:
  struct Options {
    int iterations = 300;
    double learning_rate = 0.5;
    double l2 = 1e-3;
  };

  static std::vector<std::string> features(const Utterance& u) {
    std::vector<std::string> f;
    for (std::size_t i = 0; i < u.size(); ++i) {
      f.push_back("1:" + u[i]);
      if (i + 1 < u.size()) f.push_back("2:" + u[i] + " " + u[i + 1]);
    }
    return f;
  }

  /// Full-batch gradient descent on mean cross-entropy + l2/2 * |W|^2.
  void fit(const std::vector<Utterance>& x, const std::vector<std::size_t>& y, std::size_t num_classes,
           Options opts) {
    num_classes_ = num_classes;
    feature_index_.clear();
    for (const auto& u : x) {
      for (const auto& f : features(u)) feature_index_.try_emplace(f, feature_index_.size());
    }
    const auto n = static_cast<Eigen::Index>(x.size());
    const auto d = static_cast<Eigen::Index>(feature_index_.size());
    const auto c = static_cast<Eigen::Index>(num_classes);
    const Eigen::MatrixXd xm = featurize(x);
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, c);
    for (Eigen::Index i = 0; i < n; ++i) onehot(i, static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)])) = 1;
    weights_ = Eigen::MatrixXd::Zero(d, c);
    bias_ = Eigen::RowVectorXd::Zero(c);
    for (int it = 0; it < opts.iterations; ++it) {
      const Eigen::MatrixXd probs = predict_proba_matrix(xm);
      const Eigen::MatrixXd diff = (probs - onehot) / static_cast<double>(n);
      weights_ -= opts.learning_rate * (xm.transpose() * diff + opts.l2 * weights_);
      bias_ -= opts.learning_rate * diff.colwise().sum();
    }
  }

  /// Argmax class; ties go to the smaller class index.
  std::size_t predict(const Utterance& u) const {
    const Eigen::MatrixXd p = predict_proba_matrix(featurize({u}));
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < p.cols(); ++j) {
      if (p(0, j) > p(0, best)) best = j;
    }
    return static_cast<std::size_t>(best);
  }

  double accuracy(const std::vector<Utterance>& x, const std::vector<std::size_t>& y) const {
    if (x.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < x.size(); ++i) hit += predict(x[i]) == y[i];
    return static_cast<double>(hit) / static_cast<double>(x.size());
  }

 private:
  Eigen::MatrixXd featurize(const std::vector<Utterance>& x) const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(x.size()),
                                              static_cast<Eigen::Index>(feature_index_.size()));
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (const auto& f : features(x[i])) {
        if (auto it = feature_index_.find(f); it != feature_index_.end()) {
          m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(it->second)) += 1;
        }
      }
    }
    return m;
  }

  Eigen::MatrixXd predict_proba_matrix(const Eigen::MatrixXd& xm) const {
    Eigen::MatrixXd z = xm * weights_;
    z.rowwise() += bias_;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double mx = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - mx).exp();
      z.row(i) /= z.row(i).sum();
    }
    return z;
  }

  std::size_t num_classes_ = 0;
  std::map<std::string, std::size_t> feature_index_;
  Eigen::MatrixXd weights_;
  Eigen::RowVectorXd bias_;
};

/// Labeled utterances for classifier training.
struct LabeledUtterance {
  std::string label;  // "service/intent"
  Utterance words;
};

struct ClassifierResult {
  IntentClassifier classifier;
  std::vector<std::string> classes;
  double accuracy = 0;        // held-out
  double train_accuracy = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

/// Stratified shuffle-split (per class, the first round(n * fraction) of a
/// seeded permutation go to training), then fit and score on the rest.
inline ClassifierResult train_intent_classifier(const std::vector<LabeledUtterance>& data,
                                                double split_fraction, std::uint64_t seed,
                                                IntentClassifier::Options opts = {}) {
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ConfigError("classifier split fraction must be in (0, 1)");
  }
  ClassifierResult res;
  std::map<std::string, std::size_t> class_index;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto [it, inserted] = class_index.try_emplace(data[i].label, res.classes.size());
    if (inserted) {
      res.classes.push_back(data[i].label);
      members.emplace_back();
    }
    members[it->second].push_back(i);
  }
  if (res.classes.size() < 2) throw DataError("classifier needs at least 2 intents");
  for (std::size_t c = 0; c < members.size(); ++c) {
    if (members[c].size() < 4) {
      throw DataError("intent " + res.classes[c] + " has " + std::to_string(members[c].size()) +
                      " samples; the classifier needs at least 4");
    }
  }
  std::vector<Utterance> xtr, xte;
  std::vector<std::size_t> ytr, yte;
  Rng rng(derive_seed(seed, "classifier-split"));
  for (std::size_t c = 0; c < members.size(); ++c) {
    auto idx = members[c];
    rng.shuffle(idx.begin(), idx.end());
    const auto cut = static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * split_fraction));
    if (cut == 0 || cut == idx.size()) {
      throw DataError("intent " + res.classes[c] + " is absent from one side of the split");
    }
    for (std::size_t i = 0; i < idx.size(); ++i) {
      (i < cut ? xtr : xte).push_back(data[idx[i]].words);
      (i < cut ? ytr : yte).push_back(c);
    }
  }
  res.classifier.fit(xtr, ytr, res.classes.size(), opts);
  res.accuracy = res.classifier.accuracy(xte, yte);
  res.train_accuracy = res.classifier.accuracy(xtr, ytr);
  res.train_size = xtr.size();
  res.test_size = xte.size();
  return res;
}

enum class FluencyRule { kLeadingLowercase, kLowercaseI, kRepeatedPunctuation, kPhraseRepetition, kOutOfVocabulary };

inline std::string to_string(FluencyRule r) {
  switch (r) {
    case FluencyRule::kLeadingLowercase:
      return "leading_lowercase";
    case FluencyRule::kLowercaseI:
      return "lowercase_i";
    case FluencyRule::kRepeatedPunctuation:
      return "repeated_punctuation";
    case FluencyRule::kPhraseRepetition:
      return "phrase_repetition";
    case FluencyRule::kOutOfVocabulary:
      return "out_of_vocabulary";
  }
  return "?";
}

inline const std::vector<FluencyRule>& all_fluency_rules() {
  static const std::vector<FluencyRule> rules{FluencyRule::kLeadingLowercase, FluencyRule::kLowercaseI,
                                              FluencyRule::kRepeatedPunctuation, FluencyRule::kPhraseRepetition,
                                              FluencyRule::kOutOfVocabulary};
  return rules;
}

struct FluencyViolation {
  FluencyRule rule;
  std::string detail;
};

/// Rule-based stand-in for a grammar checker. Every rule can be switched
/// off; the out-of-vocabulary rule only runs when a vocabulary is supplied.
class FluencyChecker {
 public:
  FluencyChecker() {
    for (auto r : all_fluency_rules()) enabled_.insert(r);
  }
  explicit FluencyChecker(const Vocabulary* vocab) : FluencyChecker() { vocab_ = vocab; }

  void set_enabled(FluencyRule r, bool on) {
    if (on) {
      enabled_.insert(r);
    } else {
      enabled_.erase(r);
    }
  }

  std::vector<FluencyViolation> check(const std::string& text) const {
    std::vector<FluencyViolation> out;
    auto on = [&](FluencyRule r) { return enabled_.contains(r); };

    if (on(FluencyRule::kLeadingLowercase)) {
      for (char c : text) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isalpha(u)) {
          if (std::islower(u)) out.push_back({FluencyRule::kLeadingLowercase, std::string(1, c)});
          break;
        }
      }
    }

    // Raw-case tokens for the "i" rule; lowercased ones for the rest.
    std::vector<std::string> raw;
    {
      std::string cur;
      for (char c : text) {
        if (is_word_char(c)) {
          cur.push_back(c);
        } else if (!cur.empty()) {
          raw.push_back(cur);
          cur.clear();
        }
      }
      if (!cur.empty()) raw.push_back(cur);
    }
    if (on(FluencyRule::kLowercaseI)) {
      for (const auto& w : raw) {
        if (w == "i" || w.rfind("i'", 0) == 0) out.push_back({FluencyRule::kLowercaseI, w});
      }
    }

    if (on(FluencyRule::kRepeatedPunctuation)) {
      for (std::size_t i = 0; i + 1 < text.size(); ++i) {
        const auto a = static_cast<unsigned char>(text[i]), b = static_cast<unsigned char>(text[i + 1]);
        if (std::ispunct(a) && std::ispunct(b) && text[i] != '\'' && text[i + 1] != '\'') {
          out.push_back({FluencyRule::kRepeatedPunctuation, text.substr(i, 2)});
          while (i + 1 < text.size() && std::ispunct(static_cast<unsigned char>(text[i + 1]))) ++i;
        }
      }
    }

    const auto words = normalize_tokens(text);
    if (on(FluencyRule::kPhraseRepetition)) {
      for (std::size_t n : {2u, 3u}) {
        for (std::size_t i = 0; i + 2 * n <= words.size(); ++i) {
          if (std::equal(words.begin() + static_cast<std::ptrdiff_t>(i),
                         words.begin() + static_cast<std::ptrdiff_t>(i + n),
                         words.begin() + static_cast<std::ptrdiff_t>(i + n))) {
            std::vector<std::string> phrase(words.begin() + static_cast<std::ptrdiff_t>(i),
                                            words.begin() + static_cast<std::ptrdiff_t>(i + n));
            out.push_back({FluencyRule::kPhraseRepetition, join_words(phrase)});
          }
        }
      }
    }

    if (on(FluencyRule::kOutOfVocabulary) && vocab_ != nullptr) {
      for (const auto& w : words) {
        if (!vocab_->contains(w)) out.push_back({FluencyRule::kOutOfVocabulary, w});
      }
    }
    return out;
  }

 private:
  std::set<FluencyRule> enabled_;
  const Vocabulary* vocab_ = nullptr;
};

inline std::vector<FluencyViolation> fluency_check(const std::string& text) { return FluencyChecker().check(text); }

/// Keyword probe for one intent's semantic shift (e.g. "bus" for a train intent).
struct ShiftProbe {
  std::string service;
  std::string intent;
  std::set<std::string> undesirable;
  std::set<std::string> desirable;
};

inline void from_json(const nlohmann::json& j, ShiftProbe& p) {
  p.service = j.at("service").get<std::string>();
  p.intent = j.at("intent").get<std::string>();
  for (const auto& k : j.at("undesirable")) {
    for (auto& w : normalize_tokens(k.get<std::string>())) p.undesirable.insert(std::move(w));
  }
  for (const auto& k : j.value("desirable", nlohmann::json::array())) {
    for (auto& w : normalize_tokens(k.get<std::string>())) p.desirable.insert(std::move(w));
  }
  if (p.undesirable.empty()) throw ConfigError("probe " + p.service + "/" + p.intent + " has no keywords");
}

struct ProbeResult {
  std::string service;
  std::string intent;
  std::size_t samples = 0;
  std::size_t undesirable_hits = 0;
  std::size_t desirable_hits = 0;
  double fraction() const { return samples ? static_cast<double>(undesirable_hits) / static_cast<double>(samples) : 0.0; }
};

inline void to_json(nlohmann::json& j, const ProbeResult& r) {
  j = nlohmann::json{{"service", r.service},   {"intent", r.intent},
                     {"samples", r.samples},   {"undesirable_hits", r.undesirable_hits},
                     {"fraction", r.fraction()}, {"desirable_hits", r.desirable_hits}};
}

/// An utterance with its intent, as the probe sees it.
struct ProbeSample {
  std::string service;
  std::string intent;
  Utterance words;  // normalized (lowercase)
};

/// Counts, per probe, the intent's samples containing at least one
/// undesirable keyword token.
inline std::vector<ProbeResult> semantic_shift_probe(const std::vector<ProbeSample>& samples,
                                                     const std::vector<ShiftProbe>& probes) {
  std::vector<ProbeResult> out;
  for (const auto& p : probes) {
    ProbeResult r{p.service, p.intent};
    for (const auto& s : samples) {
      if (s.service != p.service || s.intent != p.intent) continue;
      ++r.samples;
      auto hit = [&](const std::set<std::string>& keys) {
        return std::any_of(s.words.begin(), s.words.end(), [&](const std::string& w) { return keys.contains(w); });
      };
      r.undesirable_hits += hit(p.undesirable);
      if (!p.desirable.empty()) r.desirable_hits += hit(p.desirable);
    }
    out.push_back(r);
  }
  return out;
}

/// Dist-k / Ent-k of human data, the anchor generated data is compared to.
inline DiversityStats evaluate_reference_corpus(const Corpus& corpus) {
  if (corpus.empty()) throw DataError("reference corpus is empty");
  std::vector<Utterance> utts;
  for (const auto& r : corpus.records()) utts.push_back(r.words);
  auto stats = diversity_stats(utts);
  if (stats.dist.empty()) throw DataError("reference corpus has no tokens");
  return stats;
}

}  // namespace uttergen
