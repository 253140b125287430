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

// Beam search, top-k sampling, nucleus sampling and post-decoding clustering
// over any model that maps a token context to next-token logits.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "uttergen/corpus.hpp"
#include "uttergen/lm.hpp"
#include "uttergen/rng.hpp"

namespace uttergen {

template <class M>
concept NextTokenModel = requires(const M& m, std::span<const TokenId> context) {
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
  { m.context_length() } -> std::convertible_to<std::size_t>;
  { m.next_logits(context) } -> std::convertible_to<std::vector<double>>;
};

/// Adapts transformer weights to NextTokenModel.
class TransformerLm {
 public:
  TransformerLm(const LmParams<float>& params, const LmConfig& config)
      : params_(&params), config_(&config) {}

  std::size_t vocab_size() const { return static_cast<std::size_t>(config_->vocab_size); }
  std::size_t context_length() const { return static_cast<std::size_t>(config_->context_length); }

  std::vector<double> next_logits(std::span<const TokenId> context) const {
    const auto row = next_token_logits(*params_, *config_, context);
    std::vector<double> out(static_cast<std::size_t>(row.size()));
    for (Eigen::Index j = 0; j < row.size(); ++j) out[static_cast<std::size_t>(j)] = row(j);
    return out;
  }

 private:
  const LmParams<float>* params_;
  const LmConfig* config_;
};

enum class Strategy { kBeam, kTopK, kNucleus };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kBeam:
      return "beam";
    case Strategy::kTopK:
      return "top_k";
    case Strategy::kNucleus:
      return "nucleus";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "beam") return Strategy::kBeam;
  if (s == "top_k") return Strategy::kTopK;
  if (s == "nucleus") return Strategy::kNucleus;
  throw ConfigError("unknown decoding strategy \"" + s + "\" (expected beam, top_k or nucleus)");
}

struct GenerationConfig {
  Strategy strategy = Strategy::kNucleus;
  int beam_width = 3;
  int k = 4;
  double p = 0.4;
  double temperature = 1.0;
  int max_length = 24;
  int samples_per_intent = 100;
  bool pdc_enabled = false;
  double pdc_distance_threshold = 0.3;
  std::uint64_t seed = 0;

  void validate(std::size_t vocab_size) const {
    if (beam_width < 1) throw ConfigError("GenerationConfig: beam_width must be >= 1");
    if (k < 1 || static_cast<std::size_t>(k) > vocab_size) {
      throw ConfigError("GenerationConfig: k must be in [1, vocab_size]");
    }
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("GenerationConfig: p must be in (0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("GenerationConfig: temperature must be > 0");
    if (max_length < 1) throw ConfigError("GenerationConfig: max_length must be >= 1");
    if (samples_per_intent < 1) throw ConfigError("GenerationConfig: samples_per_intent must be >= 1");
    if (!(pdc_distance_threshold >= 0.0 && pdc_distance_threshold <= 2.0)) {
      throw ConfigError("GenerationConfig: PDC threshold must be in [0, 2]");
    }
  }

  /// Short label such as "nucleus(p=0.4)+pdc(0.3)".
  std::string tag() const {
    std::ostringstream os;
    switch (strategy) {
      case Strategy::kBeam:
        os << "beam(b=" << beam_width << ")";
        break;
      case Strategy::kTopK:
        os << "top_k(k=" << k << ")";
        break;
      case Strategy::kNucleus:
        os << "nucleus(p=" << p << ")";
        break;
    }
    if (temperature != 1.0) os << "@t=" << temperature;
    if (pdc_enabled) os << "+pdc(" << pdc_distance_threshold << ")";
    return os.str();
  }
};

inline void to_json(nlohmann::json& j, const GenerationConfig& g) {
  j = nlohmann::json{{"strategy", to_string(g.strategy)},
                     {"beam_width", g.beam_width},
                     {"k", g.k},
                     {"p", g.p},
                     {"temperature", g.temperature},
                     {"max_length", g.max_length},
                     {"samples_per_intent", g.samples_per_intent},
                     {"pdc_enabled", g.pdc_enabled},
                     {"pdc_distance_threshold", g.pdc_distance_threshold},
                     {"seed", g.seed}};
}

inline void from_json(const nlohmann::json& j, GenerationConfig& g) {
  const GenerationConfig d = g;
  g.strategy = strategy_from_string(j.value("strategy", to_string(d.strategy)));
  g.beam_width = j.value("beam_width", d.beam_width);
  g.k = j.value("k", d.k);
  g.p = j.value("p", d.p);
  g.temperature = j.value("temperature", d.temperature);
  g.max_length = j.value("max_length", d.max_length);
  g.samples_per_intent = j.value("samples_per_intent", d.samples_per_intent);
  g.pdc_enabled = j.value("pdc_enabled", d.pdc_enabled);
  g.pdc_distance_threshold = j.value("pdc_distance_threshold", d.pdc_distance_threshold);
  g.seed = j.value("seed", d.seed);
}

/// softmax(logits / temperature), in double.
inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
  std::vector<double> out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l / temperature);
  double sum = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp(logits[j] / temperature - mx);
    sum += out[j];
  }
  for (double& x : out) x /= sum;
  return out;
}

/// Token ids by descending probability; equal probabilities order by id.
inline std::vector<std::size_t> rank_tokens(std::span<const double> probs) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return idx;
}

/// The k most probable tokens, in rank order.
inline std::vector<std::size_t> top_k_set(std::span<const double> probs, std::size_t k) {
  auto ranked = rank_tokens(probs);
  ranked.resize(std::min(k, ranked.size()));
  return ranked;
}

/// Smallest rank-ordered prefix whose cumulative probability reaches p.
inline std::vector<std::size_t> nucleus_set(std::span<const double> probs, double p) {
  auto ranked = rank_tokens(probs);
  double cum = 0;
  std::size_t n = 0;
  while (n < ranked.size()) {
    cum += probs[ranked[n]];
    ++n;
    if (cum >= p) break;
  }
  ranked.resize(n);
  return ranked;
}

/// What a sampler saw and did at one step.
struct StepRecord {
  std::size_t step = 0;
  std::vector<double> probs;  // tempered distribution before filtering
  std::vector<std::size_t> permitted;
  TokenId chosen = 0;
};
using StepObserver = std::function<void(const StepRecord&)>;

/// A decoded continuation. `log_prob` is under the untempered model.
struct Decoded {
  TokenSeq tokens;  // ends with EOS when finished
  double log_prob = 0;
  bool finished = false;
};

namespace detail {

inline double log_softmax_at(std::span<const double> logits, std::size_t j) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l);
  double sum = 0;
  for (double l : logits) sum += std::exp(l - mx);
  return logits[j] - mx - std::log(sum);
}

inline std::size_t draw(std::span<const double> probs, const std::vector<std::size_t>& permitted, Rng& rng) {
  double total = 0;
  for (auto j : permitted) total += probs[j];
  const double u = rng.uniform() * total;
  double cum = 0;
  for (auto j : permitted) {
    cum += probs[j];
    if (u < cum) return j;
  }
  return permitted.back();
}

template <NextTokenModel M>
std::size_t usable_length(const M& model, const TokenSeq& prompt, int max_length) {
  const std::size_t ctx = model.context_length();
  const std::size_t room = ctx > prompt.size() ? ctx - prompt.size() : 0;
  // The last generated token is never fed back, hence +1.
  return std::min(static_cast<std::size_t>(max_length), room + 1);
}

template <NextTokenModel M, class Filter>
Decoded sample_filtered(const M& model, const TokenSeq& prompt, TokenId eos, int max_length,
                        double temperature, Rng& rng, Filter&& filter, const StepObserver& observer) {
  Decoded out;
  TokenSeq context = prompt;
  const std::size_t limit = usable_length(model, prompt, max_length);
  for (std::size_t step = 0; step < limit; ++step) {
    const auto logits = model.next_logits(context);
    const auto probs = softmax(logits, temperature);
    auto permitted = filter(probs);
    const std::size_t choice = draw(probs, permitted, rng);
    const auto tok = static_cast<TokenId>(choice);
    out.log_prob += log_softmax_at(logits, choice);
    out.tokens.push_back(tok);
    if (observer) observer({step, probs, std::move(permitted), tok});
    if (tok == eos) {
      out.finished = true;
      break;
    }
    context.push_back(tok);
  }
  return out;
}

}  // namespace detail

/// Samples each token from the renormalized k most probable tokens.
template <NextTokenModel M>
Decoded sample_top_k(const M& model, const TokenSeq& prompt, TokenId eos, std::size_t k,
                     double temperature, int max_length, Rng& rng, const StepObserver& observer = {}) {
  if (k < 1) throw std::invalid_argument("sample_top_k: k must be >= 1");
  return detail::sample_filtered(model, prompt, eos, max_length, temperature, rng,
                                 [k](const std::vector<double>& probs) { return top_k_set(probs, k); },
                                 observer);
}

/// Samples each token from the renormalized nucleus (see nucleus_set).
template <NextTokenModel M>
Decoded sample_nucleus(const M& model, const TokenSeq& prompt, TokenId eos, double p,
                       double temperature, int max_length, Rng& rng, const StepObserver& observer = {}) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("sample_nucleus: p must be in (0, 1]");
  return detail::sample_filtered(model, prompt, eos, max_length, temperature, rng,
                                 [p](const std::vector<double>& probs) { return nucleus_set(probs, p); },
                                 observer);
}

/// Argmax decoding (smallest id on ties).
template <NextTokenModel M>
Decoded greedy_decode(const M& model, const TokenSeq& prompt, TokenId eos, int max_length) {
  Rng unused(0);
  return detail::sample_filtered(model, prompt, eos, max_length, 1.0, unused,
                                 [](const std::vector<double>& probs) { return top_k_set(probs, 1); },
                                 {});
}

/// Orders hypotheses by total log-prob, then lexicographically by tokens.
inline bool hypothesis_before(const Decoded& a, const Decoded& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

/// Keeps the `beam_width` best partial hypotheses (by cumulative log-prob,
/// no length normalization) at every step. Hypotheses that emit EOS retire;
/// those still open at max_length retire unfinished. Returns up to
/// beam_width retired hypotheses, best first.
template <NextTokenModel M>
std::vector<Decoded> beam_search(const M& model, const TokenSeq& prompt, TokenId eos,
                                 std::size_t beam_width, int max_length) {
  if (beam_width < 1) throw std::invalid_argument("beam_search: beam width must be >= 1");
  const std::size_t limit = detail::usable_length(model, prompt, max_length);
  std::vector<Decoded> beam{Decoded{}};
  std::vector<Decoded> retired;
  for (std::size_t step = 0; step < limit && !beam.empty(); ++step) {
    std::vector<Decoded> candidates;
    for (const auto& hyp : beam) {
      TokenSeq context = prompt;
      context.insert(context.end(), hyp.tokens.begin(), hyp.tokens.end());
      const auto logits = model.next_logits(context);
      const auto lp = log_softmax(Eigen::Map<const Eigen::RowVectorXd>(logits.data(),
                                                                        static_cast<Eigen::Index>(logits.size())));
      for (std::size_t j = 0; j < lp.size(); ++j) {
        Decoded next = hyp;
        next.tokens.push_back(static_cast<TokenId>(j));
        next.log_prob += lp[j];
        next.finished = static_cast<TokenId>(j) == eos;
        candidates.push_back(std::move(next));
      }
    }
    const std::size_t keep = std::min(beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), hypothesis_before);
    candidates.resize(keep);
    beam.clear();
    for (auto& c : candidates) {
      if (c.finished) {
        retired.push_back(std::move(c));
      } else {
        beam.push_back(std::move(c));
      }
    }
  }
  for (auto& open : beam) retired.push_back(std::move(open));
  std::sort(retired.begin(), retired.end(), hypothesis_before);
  if (retired.size() > beam_width) retired.resize(beam_width);
  return retired;
}

struct GeneratedSample {
  IntentSpec intent;
  TokenSeq tokens;  // includes the terminating EOS when one was produced
  std::string text;
  double log_prob = 0;
  std::string strategy;

  /// Tokens without the trailing EOS.
  TokenSeq utterance_tokens() const {
    TokenSeq t = tokens;
    if (!t.empty() && t.back() == Vocabulary::kEos) t.pop_back();
    return t;
  }
};

/// Cosine distance 1 - cos(a, b), in [0, 2]. A zero vector is at distance 1
/// from everything.
inline double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  const double cos = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return 1.0 - cos;
}

/// Distances within this slack of the threshold count as within it, so that
/// identical embeddings merge at threshold 0 despite rounding.
inline constexpr double kDistanceSlack = 1e-12;

/// Single-linkage agglomerative clustering with a distance threshold, which
/// is the connected components of the graph joining pairs at distance <= tau.
/// Labels are numbered by first appearance.
inline std::vector<std::size_t> single_linkage_clusters(const std::vector<Eigen::VectorXd>& embeddings,
                                                        double tau) {
  const std::size_t n = embeddings.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (cosine_distance(embeddings[i], embeddings[j]) <= tau + kDistanceSlack) {
        const auto a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  }
  std::vector<std::size_t> label(n);
  std::vector<std::size_t> root_label(n, n);
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = find(i);
    if (root_label[r] == n) root_label[r] = next++;
    label[i] = root_label[r];
  }
  return label;
}

/// Clusters samples by embedding and keeps the most probable member of each
/// cluster (earliest on ties), in cluster order.
template <class Embed>
std::vector<GeneratedSample> post_decoding_cluster(const std::vector<GeneratedSample>& samples,
                                                   Embed&& embed, double tau) {
  if (samples.empty()) throw std::invalid_argument("post_decoding_cluster: no samples");
  std::vector<Eigen::VectorXd> emb;
  emb.reserve(samples.size());
  for (const auto& s : samples) emb.push_back(embed(s.utterance_tokens()));
  const auto labels = single_linkage_clusters(emb, tau);
  const std::size_t clusters = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> best(clusters, samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& b = best[labels[i]];
    if (b == samples.size() || samples[i].log_prob > samples[b].log_prob) b = i;
  }
  std::vector<GeneratedSample> out;
  for (auto i : best) out.push_back(samples[i]);
  return out;
}

struct IntentGenerationStats {
  IntentSpec intent;
  std::size_t requested = 0;
  std::size_t raw = 0;
  std::size_t kept = 0;
  std::size_t duplicates = 0;  // raw samples repeating an earlier token sequence
  std::size_t shortfall = 0;   // requested - raw (beam search can return fewer)
};

struct GenerationResult {
  std::vector<GeneratedSample> samples;
  std::vector<IntentGenerationStats> stats;
};

/// Generates cfg.samples_per_intent samples for one intent. Beam search
/// contributes its ranked hypotheses; the samplers draw independently from a
/// stream seeded by (cfg.seed, intent_index).
template <NextTokenModel M, class Embed>
std::pair<std::vector<GeneratedSample>, IntentGenerationStats> generate_for_intent(
    const M& model, const IntentSpec& intent, std::size_t intent_index, const Vocabulary& vocab,
    const GenerationConfig& cfg, Embed&& embed) {
  cfg.validate(model.vocab_size());
  const TokenSeq prompt = condition_prompt(intent, vocab);
  const std::string tag = cfg.tag();
  std::vector<Decoded> decoded;
  if (cfg.strategy == Strategy::kBeam) {
    decoded = beam_search(model, prompt, Vocabulary::kEos,
                          std::min<std::size_t>(static_cast<std::size_t>(cfg.beam_width),
                                                static_cast<std::size_t>(cfg.samples_per_intent)),
                          cfg.max_length);
  } else {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(intent_index)));
    for (int i = 0; i < cfg.samples_per_intent; ++i) {
      decoded.push_back(cfg.strategy == Strategy::kTopK
                            ? sample_top_k(model, prompt, Vocabulary::kEos, static_cast<std::size_t>(cfg.k),
                                           cfg.temperature, cfg.max_length, rng)
                            : sample_nucleus(model, prompt, Vocabulary::kEos, cfg.p, cfg.temperature,
                                             cfg.max_length, rng));
    }
  }
  std::vector<GeneratedSample> samples;
  std::set<TokenSeq> seen;
  IntentGenerationStats stats{intent, static_cast<std::size_t>(cfg.samples_per_intent), decoded.size(), 0, 0, 0};
  for (auto& d : decoded) {
    if (!seen.insert(d.tokens).second) ++stats.duplicates;
    GeneratedSample s{intent, std::move(d.tokens), {}, d.log_prob, tag};
    s.text = detokenize(vocab.decode(s.utterance_tokens()));
    samples.push_back(std::move(s));
  }
  stats.shortfall = stats.requested - std::min(stats.requested, stats.raw);
  if (cfg.pdc_enabled && !samples.empty()) {
    samples = post_decoding_cluster(samples, embed, cfg.pdc_distance_threshold);
  }
  stats.kept = samples.size();
  return {std::move(samples), stats};
}

/// Runs generate_for_intent for every intent; `model_for(i)` supplies the
/// model for intent i (the same model for zero-shot, an adapted one per
/// intent for one-shot).
template <class ModelFor, class Embed>
GenerationResult generate_dataset(ModelFor&& model_for, std::span<const IntentSpec> intents,
                                  const Vocabulary& vocab, const GenerationConfig& cfg, Embed&& embed) {
  if (intents.empty()) throw std::invalid_argument("generate_dataset: no intents");
  GenerationResult result;
  for (std::size_t i = 0; i < intents.size(); ++i) {
    auto [samples, stats] = generate_for_intent(model_for(i), intents[i], i, vocab, cfg, embed);
    for (auto& s : samples) result.samples.push_back(std::move(s));
    result.stats.push_back(std::move(stats));
  }
  return result;
}

/// One line per sample, in the corpus record format plus generation fields.
inline void write_generated(const std::vector<GeneratedSample>& samples, std::uint64_t seed, std::ostream& out) {
  for (const auto& s : samples) {
    nlohmann::json obj;
    obj["service"] = s.intent.service;
    obj["intent"] = s.intent.intent;
    obj["description"] = s.intent.description;
    obj["utterance"] = s.text;
    obj["log_prob"] = s.log_prob;
    obj["strategy"] = s.strategy;
    obj["seed"] = seed;
    out << obj.dump() << '\n';
  }
}

}  // namespace uttergen
