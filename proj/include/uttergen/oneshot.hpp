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

// One-shot adaptation: PPO on a single intent, rewarding similarity to one
// reference utterance plus in-batch n-gram rarity, with a per-token entropy
// bonus and a per-token KL penalty toward the unconditioned base model.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "uttergen/decoding.hpp"
#include "uttergen/lm.hpp"
#include "uttergen/optim.hpp"

namespace uttergen {

/// Contextual token vectors from a frozen model: final hidden states of
/// [BOS, utterance...], read without any condition prefix.
class ContextualEmbedder {
 public:
  ContextualEmbedder(const LmParams<float>& params, const LmConfig& config)
      : params_(&params), config_(&config) {}

  /// One row per utterance token (truncated to the context window).
  Eigen::MatrixXd token_embeddings(const TokenSeq& utterance) const {
    TokenSeq ids{Vocabulary::kBos};
    const std::size_t room = static_cast<std::size_t>(config_->context_length) - 1;
    ids.insert(ids.end(), utterance.begin(), utterance.begin() + static_cast<std::ptrdiff_t>(std::min(room, utterance.size())));
    const auto h = hidden_states(*params_, *config_, ids);
    return h.bottomRows(h.rows() - 1).cast<double>();
  }

  /// Mean of the token rows; the BOS state for an empty utterance.
  Eigen::VectorXd sentence_embedding(const TokenSeq& utterance) const {
    if (utterance.empty()) {
      const TokenSeq bos{Vocabulary::kBos};
      return hidden_states(*params_, *config_, bos).row(0).cast<double>().transpose();
    }
    return token_embeddings(utterance).colwise().mean().transpose();
  }

 private:
  const LmParams<float>* params_;
  const LmConfig* config_;
};

struct BertScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

/// Greedy-matching similarity over token embeddings (rows). Recall averages,
/// over reference tokens, the best cosine to any candidate token; precision
/// is the mirror image; F1 is their harmonic mean (0 when P + R = 0, clamped
/// to [-1, 1]). No IDF weighting.
inline BertScore bertscore(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& candidate) {
  if (reference.rows() == 0 || candidate.rows() == 0) {
    throw std::invalid_argument("bertscore: empty token sequence");
  }
  auto unit = [](Eigen::MatrixXd m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double n = m.row(i).norm();
      if (n > 0) m.row(i) /= n;
    }
    return m;
  };
  const Eigen::MatrixXd sim = unit(reference) * unit(candidate).transpose();
  BertScore s;
  s.recall = sim.rowwise().maxCoeff().mean();
  s.precision = sim.colwise().maxCoeff().mean();
  const double denom = s.precision + s.recall;
  s.f1 = denom == 0.0 ? 0.0 : std::clamp(2.0 * s.precision * s.recall / denom, -1.0, 1.0);
  return s;
}

inline double bertscore_f1(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& candidate) {
  return bertscore(reference, candidate).f1;
}

inline double bertscore_f1(const TokenSeq& reference, const TokenSeq& candidate,
                           const ContextualEmbedder& embedder) {
  if (reference.empty() || candidate.empty()) throw std::invalid_argument("bertscore: empty token sequence");
  return bertscore_f1(embedder.token_embeddings(reference), embedder.token_embeddings(candidate));
}

struct DiversityReward {
  double value = 0;
  bool no_ngrams = false;  // candidate shorter than n
};

/// R_div(x) = -sum over the n-gram occurrences s of x of nu_s, where nu_s is
/// the relative frequency of s among all n-gram occurrences in the batch.
inline DiversityReward diversity_reward(const TokenSeq& candidate, const std::vector<TokenSeq>& batch,
                                        std::size_t n) {
  if (n < 1) throw std::invalid_argument("diversity_reward: n must be >= 1");
  if (std::find(batch.begin(), batch.end(), candidate) == batch.end()) {
    throw std::invalid_argument("diversity_reward: candidate is not a member of the batch");
  }
  if (candidate.size() < n) return {0.0, true};
  std::map<std::vector<TokenId>, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& seq : batch) {
    for (std::size_t i = 0; i + n <= seq.size(); ++i) {
      ++counts[std::vector<TokenId>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                    seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
      ++total;
    }
  }
  double r = 0;
  for (std::size_t i = 0; i + n <= candidate.size(); ++i) {
    const std::vector<TokenId> g(candidate.begin() + static_cast<std::ptrdiff_t>(i),
                                 candidate.begin() + static_cast<std::ptrdiff_t>(i + n));
    r -= static_cast<double>(counts.at(g)) / static_cast<double>(total);
  }
  return {r, false};
}

struct RewardBreakdown {
  double r_sim = 0;
  double r_div = 0;
  double total = 0;
};

struct PpoConfig {
  double clip_epsilon = 0.2;
  double kl_weight = 0.1;        // alpha
  double entropy_weight = 0.01;  // beta
  std::vector<int> div_orders{2};
  bool use_diversity_reward = true;
  int batch_size = 16;
  int ppo_epochs = 4;
  int outer_iterations = 20;
  double learning_rate = 1e-4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  GenerationConfig rollout = [] {
    GenerationConfig g;
    g.strategy = Strategy::kNucleus;
    g.p = 0.4;
    return g;
  }();

  void validate() const {
    if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) throw ConfigError("PpoConfig: clip epsilon must be in (0, 1)");
    if (kl_weight < 0.0 || entropy_weight < 0.0) throw ConfigError("PpoConfig: alpha and beta must be >= 0");
    if (div_orders.empty()) throw ConfigError("PpoConfig: at least one n-gram order is required");
    for (int n : div_orders) {
      if (n < 1) throw ConfigError("PpoConfig: n-gram orders must be >= 1");
    }
    if (batch_size < 2) throw ConfigError("PpoConfig: batch size must be >= 2");
    if (ppo_epochs < 1 || outer_iterations < 0) throw ConfigError("PpoConfig: bad iteration counts");
    if (!(learning_rate >= 0.0)) throw ConfigError("PpoConfig: learning rate must be >= 0");
    if (rollout.strategy == Strategy::kBeam) throw ConfigError("PpoConfig: rollouts must be sampled");
  }
};

inline void to_json(nlohmann::json& j, const PpoConfig& c) {
  j = nlohmann::json{{"clip_epsilon", c.clip_epsilon},
                     {"kl_weight", c.kl_weight},
                     {"entropy_weight", c.entropy_weight},
                     {"div_orders", c.div_orders},
                     {"use_diversity_reward", c.use_diversity_reward},
                     {"batch_size", c.batch_size},
                     {"ppo_epochs", c.ppo_epochs},
                     {"outer_iterations", c.outer_iterations},
                     {"learning_rate", c.learning_rate},
                     {"clip_norm", c.clip_norm},
                     {"seed", c.seed},
                     {"rollout", c.rollout}};
}

inline void from_json(const nlohmann::json& j, PpoConfig& c) {
  const PpoConfig d = c;
  c.clip_epsilon = j.value("clip_epsilon", d.clip_epsilon);
  c.kl_weight = j.value("kl_weight", d.kl_weight);
  c.entropy_weight = j.value("entropy_weight", d.entropy_weight);
  c.div_orders = j.value("div_orders", d.div_orders);
  c.use_diversity_reward = j.value("use_diversity_reward", d.use_diversity_reward);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.ppo_epochs = j.value("ppo_epochs", d.ppo_epochs);
  c.outer_iterations = j.value("outer_iterations", d.outer_iterations);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.seed = j.value("seed", d.seed);
  if (j.contains("rollout")) {
    c.rollout = d.rollout;
    from_json(j.at("rollout"), c.rollout);
  }
}

/// R = R_sim + R_div. `embed(tokens)` returns one embedding row per token.
template <class Embed>
RewardBreakdown total_reward(const TokenSeq& reference, const TokenSeq& candidate,
                             const std::vector<TokenSeq>& batch, Embed&& embed, const PpoConfig& cfg) {
  if (reference.empty() || candidate.empty()) throw std::invalid_argument("total_reward: empty utterance");
  RewardBreakdown r;
  r.r_sim = bertscore_f1(embed(reference), embed(candidate));
  if (cfg.use_diversity_reward) {
    for (int n : cfg.div_orders) r.r_div += diversity_reward(candidate, batch, static_cast<std::size_t>(n)).value;
  }
  r.total = r.r_sim + r.r_div;
  return r;
}

struct TokenTerms {
  double kl = 0;       // KL(p || q)
  double entropy = 0;  // H(p)
};

/// Per-row KL(policy || base) and policy entropy from two logit matrices.
template <class A, class B>
std::vector<TokenTerms> kl_and_entropy_terms(const A& policy_logits, const B& base_logits) {
  if (policy_logits.rows() != base_logits.rows() || policy_logits.cols() != base_logits.cols()) {
    throw std::invalid_argument("kl_and_entropy_terms: shape mismatch");
  }
  std::vector<TokenTerms> out;
  for (Eigen::Index t = 0; t < policy_logits.rows(); ++t) {
    const auto lp = log_softmax(policy_logits.row(t));
    const auto lq = log_softmax(base_logits.row(t));
    TokenTerms term;
    for (std::size_t j = 0; j < lp.size(); ++j) {
      const double p = std::exp(lp[j]);
      if (p == 0.0) continue;
      term.kl += p * (lp[j] - lq[j]);
      term.entropy -= p * lp[j];
    }
    term.kl = std::max(term.kl, 0.0);
    term.entropy = std::max(term.entropy, 0.0);
    out.push_back(term);
  }
  return out;
}

/// (r - mean) / (std + 1e-8), population std.
inline std::vector<double> whiten_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("whiten_advantages: need at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out;
  for (double r : rewards) out.push_back((r - mean) / (sd + 1e-8));
  return out;
}

/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)
inline double clipped_surrogate(double ratio, double advantage, double epsilon) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage);
}

/// A sampled continuation with everything PPO needs held fixed.
struct Rollout {
  TokenSeq tokens;                             // including EOS when produced
  std::vector<double> old_log_probs;           // per token, under the rollout params
  std::vector<std::vector<double>> base_log_q; // per token, base log-distribution over the vocab
  RewardBreakdown reward;
  double advantage = 0;
};

struct RolloutBatch {
  TokenSeq prompt;
  std::vector<Rollout> rollouts;
};

struct PpoStepStats {
  double objective = 0;    // mean per-token objective (maximized)
  double policy_term = 0;  // mean clipped surrogate
  double entropy = 0;      // mean per-token entropy
  double kl = 0;           // mean per-token KL to the base model
  double clip_fraction = 0;
  double grad_norm = 0;
};

namespace detail {

inline TokenSeq policy_input(const TokenSeq& prompt, const TokenSeq& tokens) {
  TokenSeq ids = prompt;
  ids.insert(ids.end(), tokens.begin(), tokens.end() - 1);
  return ids;
}

}  // namespace detail

/// One gradient-ascent step on
///   mean over tokens of [ min(r A, clip(r) A) + beta H(p_t) - alpha KL(p_t || q_t) ],
/// where r is the per-token probability ratio against the rollout params and
/// A the sentence's whitened advantage broadcast to its tokens.
inline PpoStepStats ppo_step(LmParams<float>& policy, const LmConfig& config, const RolloutBatch& batch,
                             const PpoConfig& cfg, Adam<float>& adam) {
  if (batch.rollouts.size() < 2) throw std::invalid_argument("ppo_step: batch size must be >= 2");
  std::size_t n_tokens = 0;
  for (const auto& r : batch.rollouts) n_tokens += r.tokens.size();
  if (n_tokens == 0) throw std::invalid_argument("ppo_step: empty rollouts");
  const double inv_n = 1.0 / static_cast<double>(n_tokens);
  const double eps = cfg.clip_epsilon, alpha = cfg.kl_weight, beta = cfg.entropy_weight;
  const double max_entropy = std::log(static_cast<double>(config.vocab_size));

  LmParams<float> grads = zeros_like(policy);
  PpoStepStats st;
  std::size_t clipped = 0;
  for (std::size_t ri = 0; ri < batch.rollouts.size(); ++ri) {
    const Rollout& ro = batch.rollouts[ri];
    if (ro.tokens.empty()) continue;
    const TokenSeq ids = detail::policy_input(batch.prompt, ro.tokens);
    const auto cache = forward_cached(policy, config, ids);
    Mat<float> dlogits = Mat<float>::Zero(cache.logits.rows(), cache.logits.cols());
    for (std::size_t i = 0; i < ro.tokens.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(batch.prompt.size() - 1 + i);
      const auto lp = log_softmax(cache.logits.row(row));
      const auto& lq = ro.base_log_q[i];
      const auto tok = static_cast<std::size_t>(ro.tokens[i]);
      const double ratio = std::exp(lp[tok] - ro.old_log_probs[i]);
      const double a = ro.advantage;
      const double unclipped = ratio * a;
      const double surrogate = clipped_surrogate(ratio, a, eps);
      const bool active = unclipped <= surrogate;
      if (!active) ++clipped;

      double entropy = 0, kl = 0;
      for (std::size_t j = 0; j < lp.size(); ++j) {
        const double p = std::exp(lp[j]);
        entropy -= p * lp[j];
        kl += p * (lp[j] - lq[j]);
      }
      if (!(entropy >= -1e-9 && entropy <= max_entropy + 1e-9) || !(kl >= -1e-9)) {
        throw NumericalError("ppo_step: entropy/KL out of range (H=" + std::to_string(entropy) +
                             ", KL=" + std::to_string(kl) + ") in rollout " + std::to_string(ri));
      }
      st.policy_term += surrogate * inv_n;
      st.entropy += entropy * inv_n;
      st.kl += kl * inv_n;

      // d(-objective)/dlogits, averaged over all batch tokens.
      for (std::size_t j = 0; j < lp.size(); ++j) {
        const double p = std::exp(lp[j]);
        double g = beta * (-p * (lp[j] + entropy)) - alpha * (p * ((lp[j] - lq[j]) - kl));
        if (active) g += unclipped * ((j == tok ? 1.0 : 0.0) - p);
        dlogits(row, static_cast<Eigen::Index>(j)) = static_cast<float>(-g * inv_n);
      }
    }
    backward(policy, config, cache, dlogits, grads);
  }
  st.objective = st.policy_term + beta * st.entropy - alpha * st.kl;
  st.clip_fraction = static_cast<double>(clipped) * inv_n;
  if (!std::isfinite(st.objective) || !all_finite(grads)) {
    throw NumericalError("ppo_step: non-finite objective (policy=" + std::to_string(st.policy_term) +
                         ", H=" + std::to_string(st.entropy) + ", KL=" + std::to_string(st.kl) + ")");
  }
  st.grad_norm = clip_grad_norm(grads, cfg.clip_norm);
  adam.step(policy, grads);
  return st;
}

struct IterationTrace {
  int iteration = 0;
  double mean_reward = 0;
  double mean_r_sim = 0;
  double mean_r_div = 0;
  double mean_entropy = 0;  // from the first PPO epoch (fresh rollouts)
  double mean_kl = 0;
  double clip_fraction = 0;  // from the last PPO epoch
  double reference_log_prob = 0;  // log p(reference | intent) after the iteration
};

inline void to_json(nlohmann::json& j, const IterationTrace& t) {
  j = nlohmann::json{{"iteration", t.iteration},         {"mean_reward", t.mean_reward},
                     {"mean_r_sim", t.mean_r_sim},       {"mean_r_div", t.mean_r_div},
                     {"mean_entropy", t.mean_entropy},   {"mean_kl", t.mean_kl},
                     {"clip_fraction", t.clip_fraction}, {"reference_log_prob", t.reference_log_prob}};
}

struct AdaptResult {
  LmParams<float> params;
  std::vector<IterationTrace> trace;
};

/// Reward for a rollout whose utterance is empty (EOS only): the similarity
/// floor and no diversity term.
inline constexpr double kEmptyUtteranceReward = -1.0;

/// Samples cfg.batch_size rollouts from `rollout_params` and scores them.
inline RolloutBatch collect_rollouts(const LmParams<float>& rollout_params, const LmParams<float>& base,
                                     const LmConfig& config, const TokenSeq& prompt,
                                     const TokenSeq& reference, const Eigen::MatrixXd& reference_emb,
                                     const ContextualEmbedder& embedder, const PpoConfig& cfg, Rng& rng) {
  RolloutBatch batch;
  batch.prompt = prompt;
  const TransformerLm model(rollout_params, config);
  for (int i = 0; i < cfg.batch_size; ++i) {
    const auto& g = cfg.rollout;
    Decoded d = g.strategy == Strategy::kTopK
                    ? sample_top_k(model, prompt, Vocabulary::kEos, static_cast<std::size_t>(g.k),
                                   g.temperature, g.max_length, rng)
                    : sample_nucleus(model, prompt, Vocabulary::kEos, g.p, g.temperature, g.max_length, rng);
    Rollout ro;
    ro.tokens = std::move(d.tokens);
    batch.rollouts.push_back(std::move(ro));
  }

  std::vector<TokenSeq> utterances;
  for (const auto& ro : batch.rollouts) {
    TokenSeq u = ro.tokens;
    if (!u.empty() && u.back() == Vocabulary::kEos) u.pop_back();
    utterances.push_back(std::move(u));
  }
  std::vector<double> totals;
  for (std::size_t i = 0; i < batch.rollouts.size(); ++i) {
    auto& ro = batch.rollouts[i];
    const TokenSeq& u = utterances[i];
    if (u.empty()) {
      ro.reward = {kEmptyUtteranceReward, 0.0, kEmptyUtteranceReward};
    } else {
      auto embed = [&](const TokenSeq& t) {
        return t == reference ? reference_emb : embedder.token_embeddings(t);
      };
      ro.reward = total_reward(reference, u, utterances, embed, cfg);
    }
    totals.push_back(ro.reward.total);

    // Rollout-time log-probs and base distributions, fixed for all PPO epochs.
    const auto cache = forward_cached(rollout_params, config, detail::policy_input(prompt, ro.tokens));
    TokenSeq base_ids{Vocabulary::kBos};
    base_ids.insert(base_ids.end(), ro.tokens.begin(), ro.tokens.end() - 1);
    const auto base_logits = forward(base, config, base_ids);
    for (std::size_t t = 0; t < ro.tokens.size(); ++t) {
      const auto lp = log_softmax(cache.logits.row(static_cast<Eigen::Index>(prompt.size() - 1 + t)));
      ro.old_log_probs.push_back(lp[static_cast<std::size_t>(ro.tokens[t])]);
      ro.base_log_q.push_back(log_softmax(base_logits.row(static_cast<Eigen::Index>(t))));
    }
  }
  const auto adv = whiten_advantages(totals);
  for (std::size_t i = 0; i < adv.size(); ++i) batch.rollouts[i].advantage = adv[i];
  return batch;
}

/// Adapts a copy of the zero-shot params to one intent from one reference
/// utterance. `base` is the frozen unconditioned model: it anchors the KL
/// term and provides the embeddings for the similarity reward.
inline AdaptResult adapt_one_shot(const LmParams<float>& zero_shot, const LmParams<float>& base,
                                  const LmConfig& config, const IntentSpec& intent,
                                  const TokenSeq& reference, const Vocabulary& vocab, const PpoConfig& cfg) {
  cfg.validate();
  if (reference.empty()) throw std::invalid_argument("adapt_one_shot: empty reference utterance");
  const TokenSeq prompt = condition_prompt(intent, vocab);
  const ContextualEmbedder embedder(base, config);
  const Eigen::MatrixXd reference_emb = embedder.token_embeddings(reference);

  AdaptResult result{zero_shot, {}};
  Adam<float> adam(result.params, {cfg.learning_rate, 0.9, 0.999, 1e-8});
  Rng rng(derive_seed(cfg.seed, "rollout"));
  for (int it = 0; it < cfg.outer_iterations; ++it) {
    const LmParams<float> rollout_params = result.params;
    const RolloutBatch batch =
        collect_rollouts(rollout_params, base, config, prompt, reference, reference_emb, embedder, cfg, rng);
    IterationTrace tr;
    tr.iteration = it;
    const double n = static_cast<double>(batch.rollouts.size());
    for (const auto& ro : batch.rollouts) {
      tr.mean_reward += ro.reward.total / n;
      tr.mean_r_sim += ro.reward.r_sim / n;
      tr.mean_r_div += ro.reward.r_div / n;
    }
    for (int e = 0; e < cfg.ppo_epochs; ++e) {
      const auto st = ppo_step(result.params, config, batch, cfg, adam);
      if (e == 0) {
        tr.mean_entropy = st.entropy;
        tr.mean_kl = st.kl;
      }
      tr.clip_fraction = st.clip_fraction;
    }
    tr.reference_log_prob = sequence_log_prob(result.params, config, intent, reference, vocab);
    result.trace.push_back(tr);
  }
  return result;
}

}  // namespace uttergen
