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


#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "support.hpp"
#include "uttergen/oneshot.hpp"
#include "uttergen/train.hpp"

namespace uttergen {
namespace {

Eigen::MatrixXd rows(std::initializer_list<std::initializer_list<double>> r) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

TEST(BertScore, IdenticalSequencesScoreOne) {
  std::mt19937 gen(3);
  std::normal_distribution<double> n;
  Eigen::MatrixXd e(5, 7);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = n(gen);
  EXPECT_NEAR(bertscore_f1(e, e), 1.0, 1e-6);
}

TEST(BertScore, OrthogonalToyMatchesHandGreedyMatching) {
  // Reference tokens a=(1,0), b=(0,1). The candidate shares a and replaces b
  // with -a: recall = (1 + 0) / 2, precision = (1 + 0) / 2.
  const auto ref = rows({{1, 0}, {0, 1}});
  const auto cand = rows({{1, 0}, {-1, 0}});
  const auto s = bertscore(ref, cand);
  EXPECT_NEAR(s.recall, 0.5, 1e-12);
  EXPECT_NEAR(s.precision, 0.5, 1e-12);
  EXPECT_NEAR(s.f1, 0.5, 1e-12);
}

TEST(BertScore, SymmetricAndBounded) {
  std::mt19937 gen(11);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::MatrixXd a(1 + trial % 4, 6), b(1 + trial % 7, 6);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(gen);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = n(gen);
    const double f = bertscore_f1(a, b);
    EXPECT_NEAR(f, bertscore_f1(b, a), 1e-12);
    EXPECT_GE(f, -1.0);
    EXPECT_LE(f, 1.0);
  }
}

TEST(BertScore, EmptySequenceIsAnError) {
  const auto a = rows({{1, 0}});
  EXPECT_THROW(bertscore_f1(Eigen::MatrixXd(0, 2), a), std::invalid_argument);
  EXPECT_THROW(bertscore_f1(a, Eigen::MatrixXd(0, 2)), std::invalid_argument);
}

TEST(BertScore, TokenOverloadUsesBaseModelStates) {
  const auto c = testing::micro_config();
  const auto p = init_params<float>(c);
  const ContextualEmbedder emb(p, c);
  const TokenSeq u{4, 5, 6};
  EXPECT_NEAR(bertscore_f1(u, u, emb), 1.0, 1e-6);
  EXPECT_EQ(emb.token_embeddings(u).rows(), 3);
  EXPECT_THROW(bertscore_f1(TokenSeq{}, u, emb), std::invalid_argument);
}

TEST(DiversityReward, SingleUtteranceBigrams) {
  const TokenSeq abc{10, 11, 12};
  const auto r = diversity_reward(abc, {abc}, 2);
  EXPECT_FALSE(r.no_ngrams);
  EXPECT_DOUBLE_EQ(r.value, -1.0);
}

TEST(DiversityReward, RepetitionInTheBatchIsPenalizedHarder) {
  const TokenSeq x{10, 11, 12}, y{20, 21, 22};
  const double same = diversity_reward(x, {x, x}, 2).value;
  const double disjoint = diversity_reward(x, {x, y}, 2).value;
  EXPECT_LT(same, disjoint);
  EXPECT_DOUBLE_EQ(disjoint, -0.5);
}

TEST(DiversityReward, LengthNCandidateHasOneGram) {
  const TokenSeq x{10, 11}, y{10, 11, 12, 13};
  // Bigrams: x {10 11}; y {10 11, 11 12, 12 13}; nu(10 11) = 2/4.
  EXPECT_DOUBLE_EQ(diversity_reward(x, {x, y}, 2).value, -0.5);
}

TEST(DiversityReward, ShortCandidateIsFlaggedAndNonMemberIsAnError) {
  const TokenSeq x{10}, y{10, 11, 12};
  const auto r = diversity_reward(x, {x, y}, 2);
  EXPECT_TRUE(r.no_ngrams);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_THROW(diversity_reward(TokenSeq{99, 98}, {y}, 2), std::invalid_argument);
}

TEST(DiversityReward, BoundedByMinusGramCount) {
  std::mt19937 gen(5);
  std::uniform_int_distribution<int> tok(10, 13), len(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TokenSeq> batch(4);
    for (auto& s : batch) {
      const int l = len(gen);
      for (int i = 0; i < l; ++i) s.push_back(tok(gen));
    }
    if (batch[0].size() < 2) continue;
    const auto r = diversity_reward(batch[0], batch, 2);
    EXPECT_LE(r.value, 0.0);
    EXPECT_GE(r.value, -static_cast<double>(batch[0].size() - 1));
  }
}

TEST(TotalReward, IsTheExactSumOfItsParts) {
  const auto c = testing::micro_config();
  const auto p = init_params<float>(c);
  const ContextualEmbedder emb(p, c);
  const TokenSeq ref{4, 5, 6, 7}, cand{4, 8, 9}, other{10, 11};
  const std::vector<TokenSeq> batch{cand, other};
  PpoConfig cfg;
  auto embed = [&](const TokenSeq& t) { return emb.token_embeddings(t); };
  const auto r = total_reward(ref, cand, batch, embed, cfg);
  EXPECT_DOUBLE_EQ(r.r_sim, bertscore_f1(ref, cand, emb));
  EXPECT_DOUBLE_EQ(r.r_div, diversity_reward(cand, batch, 2).value);
  EXPECT_DOUBLE_EQ(r.total, r.r_sim + r.r_div);
  EXPECT_THROW(total_reward(ref, TokenSeq{}, batch, embed, cfg), std::invalid_argument);
}

TEST(TotalReward, ReferenceCandidateAmongDisjointOthers) {
  const auto c = testing::micro_config();
  const auto p = init_params<float>(c);
  const ContextualEmbedder emb(p, c);
  const TokenSeq ref{4, 5, 6};
  const std::vector<TokenSeq> batch{ref, {7, 8, 9}, {10, 11, 3}};
  auto embed = [&](const TokenSeq& t) { return emb.token_embeddings(t); };
  const auto r = total_reward(ref, ref, batch, embed, PpoConfig{});
  // Two unique bigrams out of six.
  EXPECT_NEAR(r.total, 1.0 - 2.0 / 6.0, 1e-6);
}

TEST(KlEntropy, HandThreeClassValues) {
  Eigen::MatrixXd p(1, 3), q(1, 3);
  p << std::log(0.7), std::log(0.2), std::log(0.1);
  q << 0.0, 0.0, 0.0;
  const auto t = kl_and_entropy_terms(p, q);
  double kl = 0, h = 0;
  for (double pi : {0.7, 0.2, 0.1}) {
    kl += pi * std::log(pi / (1.0 / 3.0));
    h -= pi * std::log(pi);
  }
  EXPECT_NEAR(t[0].kl, kl, 1e-12);
  EXPECT_NEAR(t[0].kl, 0.2968, 1e-4);
  EXPECT_NEAR(t[0].entropy, h, 1e-12);
}

TEST(KlEntropy, EqualDistributionsAndUniformEntropy) {
  const Eigen::MatrixXd u = Eigen::MatrixXd::Zero(2, 50);
  const auto t = kl_and_entropy_terms(u, u);
  for (const auto& term : t) {
    EXPECT_NEAR(term.kl, 0.0, 1e-12);
    EXPECT_NEAR(term.entropy, std::log(50.0), 1e-9);
  }
  EXPECT_THROW(kl_and_entropy_terms(u, Eigen::MatrixXd::Zero(2, 49)), std::invalid_argument);
}

TEST(Ppo, ClipArithmetic) {
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
  for (double a : {-2.0, -0.3, 0.0, 0.7, 3.0}) EXPECT_DOUBLE_EQ(clipped_surrogate(1.0, a, 0.2), a);
}

TEST(Ppo, SurrogateIsAPessimisticBound) {
  std::mt19937 gen(9);
  std::uniform_real_distribution<double> ratio(0.0, 3.0), adv(-3.0, 3.0);
  for (int i = 0; i < 1000; ++i) {
    const double r = ratio(gen), a = adv(gen);
    EXPECT_LE(clipped_surrogate(r, a, 0.2), r * a + 1e-15);
  }
}

TEST(Ppo, WhitenedAdvantagesHaveZeroMeanUnitStd) {
  std::mt19937 gen(2);
  std::normal_distribution<double> n(3.0, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> r(16);
    for (double& v : r) v = n(gen);
    const auto a = whiten_advantages(r);
    const double mean = std::accumulate(a.begin(), a.end(), 0.0) / 16.0;
    double var = 0;
    for (double v : a) var += (v - mean) * (v - mean);
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_NEAR(std::sqrt(var / 16.0), 1.0, 1e-3);
  }
  for (double v : whiten_advantages({0.4, 0.4, 0.4})) EXPECT_NEAR(v, 0.0, 1e-6);
  EXPECT_THROW(whiten_advantages({1.0}), std::invalid_argument);
}

// A tiny conditional model with two intents, trained just enough to prefer
// in-intent words.
struct MicroWorld {
  Corpus corpus;
  Vocabulary vocab;
  LmConfig config;
  LmParams<float> base;
  LmParams<float> zero_shot;
  IntentSpec intent;
  TokenSeq reference;

  MicroWorld() {
    corpus = testing::corpus_from(
        R"({"service": "Trains", "intent": "Buy", "utterance": "buy a train ticket"}
{"service": "Trains", "intent": "Buy", "utterance": "i need a train ticket"}
{"service": "Trains", "intent": "Buy", "utterance": "get me a ticket"}
{"service": "Music", "intent": "Play", "utterance": "play some music"}
{"service": "Music", "intent": "Play", "utterance": "play a song"}
{"service": "Music", "intent": "Play", "utterance": "i want some music"}
)");
    vocab = build_vocabulary(corpus, 1, {.include_descriptions = true});
    config = testing::micro_config(static_cast<int>(vocab.size()), 16, 1, 2, 32, 16);
    std::vector<TrainingExample> plain, cond;
    for (const auto& r : corpus.records()) {
      plain.push_back(encode_unconditional(r.words, vocab, 16));
      cond.push_back(encode_example(corpus.intent_of(r), r.words, vocab, 16));
    }
    TrainHyper h;
    h.batch_size = 3;
    h.learning_rate = 3e-3;
    h.epochs = 30;
    h.seed = 4;
    base = train(init_params<float>(config), config, plain, h).params;
    h.epochs = 10;
    zero_shot = train(base, config, cond, h).params;
    intent = corpus.intent_of(corpus.records()[0]);
    reference = vocab.encode(corpus.records()[0].words);
  }

  PpoConfig ppo() const {
    PpoConfig c;
    c.batch_size = 8;
    c.ppo_epochs = 2;
    c.outer_iterations = 10;
    c.learning_rate = 3e-3;
    c.seed = 21;
    c.rollout.max_length = 8;
    c.rollout.p = 0.9;
    return c;
  }
};

const MicroWorld& world() {
  static const MicroWorld w;
  return w;
}

TEST(Adapt, ZeroIterationsLeaveParamsUnchanged) {
  const auto& w = world();
  auto cfg = w.ppo();
  cfg.outer_iterations = 0;
  const auto res = adapt_one_shot(w.zero_shot, w.base, w.config, w.intent, w.reference, w.vocab, cfg);
  EXPECT_TRUE(params_equal(res.params, w.zero_shot));
  EXPECT_TRUE(res.trace.empty());
}

TEST(Adapt, SimilarityOnlyRaisesReferenceLogProb) {
  const auto& w = world();
  auto cfg = w.ppo();
  cfg.kl_weight = 0;
  cfg.entropy_weight = 0;
  cfg.use_diversity_reward = false;
  const auto res = adapt_one_shot(w.zero_shot, w.base, w.config, w.intent, w.reference, w.vocab, cfg);
  const double before = sequence_log_prob(w.zero_shot, w.config, w.intent, w.reference, w.vocab);
  const double after = sequence_log_prob(res.params, w.config, w.intent, w.reference, w.vocab);
  EXPECT_GT(after, before);
}

// Per-run pair monotonicity on this fixture is dominated by rollout noise
// (about two thirds of pairs across seeds), so the trend is checked over ten
// fixed seeds: final reward above initial in every run, and the pooled share
// of non-decreasing pairs above 0.6.
TEST(Adapt, MeanRewardTrendsUpward) {
  const auto& w = world();
  int pairs = 0, up = 0, gains = 0;
  for (std::uint64_t seed = 21; seed < 31; ++seed) {
    auto cfg = w.ppo();
    cfg.batch_size = 16;
    cfg.ppo_epochs = 4;
    cfg.learning_rate = 1e-3;
    cfg.seed = seed;
    const auto res = adapt_one_shot(w.zero_shot, w.base, w.config, w.intent, w.reference, w.vocab, cfg);
    ASSERT_EQ(res.trace.size(), 10u);
    for (std::size_t i = 1; i < res.trace.size(); ++i) {
      ++pairs;
      if (res.trace[i].mean_reward >= res.trace[i - 1].mean_reward) ++up;
    }
    if (res.trace.back().mean_reward > res.trace.front().mean_reward) ++gains;
    for (const auto& t : res.trace) {
      EXPECT_LE(t.mean_r_div, 0.0);
      EXPECT_GE(t.mean_kl, 0.0);
      EXPECT_LE(t.mean_entropy, std::log(static_cast<double>(w.config.vocab_size)) + 1e-9);
    }
  }
  EXPECT_EQ(gains, 10);
  EXPECT_GT(static_cast<double>(up) / pairs, 0.6) << up << " of " << pairs;
}

TEST(Adapt, DeterministicGivenSeed) {
  const auto& w = world();
  auto cfg = w.ppo();
  cfg.outer_iterations = 2;
  const auto a = adapt_one_shot(w.zero_shot, w.base, w.config, w.intent, w.reference, w.vocab, cfg);
  const auto b = adapt_one_shot(w.zero_shot, w.base, w.config, w.intent, w.reference, w.vocab, cfg);
  EXPECT_TRUE(params_equal(a.params, b.params));
}

double mean_entropy_under(const LmParams<float>& p, const MicroWorld& w) {
  const TokenSeq prompt = condition_prompt(w.intent, w.vocab);
  TokenSeq ids = prompt;
  ids.insert(ids.end(), w.reference.begin(), w.reference.end());
  const auto logits = forward(p, w.config, ids);
  const auto terms = kl_and_entropy_terms(logits, logits);
  double h = 0;
  for (std::size_t t = prompt.size() - 1; t < terms.size(); ++t) h += terms[t].entropy;
  return h / static_cast<double>(terms.size() - prompt.size() + 1);
}

TEST(Adapt, LargeEntropyBonusKeepsEntropyHigher) {
  const auto& w = world();
  auto cfg = w.ppo();
  cfg.kl_weight = 0;
  cfg.entropy_weight = 0;
  const auto plain = adapt_one_shot(w.zero_shot, w.base, w.config, w.intent, w.reference, w.vocab, cfg);
  cfg.entropy_weight = 5.0;
  const auto smooth = adapt_one_shot(w.zero_shot, w.base, w.config, w.intent, w.reference, w.vocab, cfg);
  EXPECT_GE(mean_entropy_under(smooth.params, w), mean_entropy_under(plain.params, w));
}

TEST(Adapt, BatchBelowTwoIsRejected) {
  const auto& w = world();
  auto cfg = w.ppo();
  cfg.batch_size = 1;
  EXPECT_THROW(adapt_one_shot(w.zero_shot, w.base, w.config, w.intent, w.reference, w.vocab, cfg), ConfigError);
  RolloutBatch one;
  one.prompt = {Vocabulary::kBos};
  one.rollouts.resize(1);
  LmParams<float> p = w.zero_shot;
  Adam<float> adam(p, {1e-3, 0.9, 0.999, 1e-8});
  EXPECT_THROW(ppo_step(p, w.config, one, cfg, adam), std::invalid_argument);
}

TEST(Adapt, EqualRewardsMoveParamsOnlyThroughRegularizers) {
  const auto& w = world();
  const ContextualEmbedder emb(w.base, w.config);
  auto cfg = w.ppo();
  Rng rng(1);
  auto batch = collect_rollouts(w.zero_shot, w.base, w.config, condition_prompt(w.intent, w.vocab), w.reference,
                                emb.token_embeddings(w.reference), emb, cfg, rng);
  for (auto& r : batch.rollouts) r.advantage = 0;
  cfg.kl_weight = 0;
  cfg.entropy_weight = 0;
  LmParams<float> p = w.zero_shot;
  Adam<float> adam(p, {1e-3, 0.9, 0.999, 1e-8});
  const auto st = ppo_step(p, w.config, batch, cfg, adam);
  EXPECT_EQ(st.grad_norm, 0.0);
  EXPECT_TRUE(params_equal(p, w.zero_shot));
}

}  // namespace
}  // namespace uttergen
