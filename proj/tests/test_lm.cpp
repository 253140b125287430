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

#include "support.hpp"
#include "uttergen/checkpoint.hpp"
#include "uttergen/lm.hpp"
#include "uttergen/train.hpp"

namespace uttergen {
namespace {

using testing::micro_config;

TEST(LmConfig, HeadDimAndValidation) {
  LmConfig c = micro_config();
  c.embedding_dim = 32;
  c.num_heads = 4;
  EXPECT_EQ(c.head_dim(), 8);
  c.num_heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(nlohmann::json(micro_config()).get<LmConfig>(), micro_config());
}

TEST(Init, DeterministicPerSeedAndDifferentAcrossSeeds) {
  auto c = micro_config();
  const auto a = init_params<float>(c);
  const auto b = init_params<float>(c);
  EXPECT_TRUE(params_equal(a, b));
  c.seed = 8;
  EXPECT_FALSE(params_equal(a, init_params<float>(c)));
  EXPECT_TRUE(a.layers[0].attn_qkv_bias.isZero());
  EXPECT_TRUE(a.final_ln_bias.isZero());
  EXPECT_TRUE(a.final_ln_gain.isOnes());
}

TEST(Init, WeightStdIsNearPointZeroTwo) {
  LmConfig c = micro_config(40, 64, 2, 4, 256, 48);
  const auto p = init_params<double>(c);
  const auto& w = p.layers[0].ff_in;
  const double mean = w.mean();
  const double var = (w.array() - mean).square().mean();
  EXPECT_NEAR(std::sqrt(var), 0.02, 0.002);
}

TEST(Forward, ShapesFinitenessAndSoftmaxNormalization) {
  const auto c = micro_config();
  const auto p = init_params<float>(c);
  const TokenSeq one{3};
  const auto l1 = forward(p, c, one);
  EXPECT_EQ(l1.rows(), 1);
  EXPECT_EQ(l1.cols(), c.vocab_size);
  EXPECT_TRUE(l1.allFinite());
  const TokenSeq ids{1, 4, 7, 2, 9, 11};
  const auto l = forward(p, c, ids);
  for (Eigen::Index t = 0; t < l.rows(); ++t) {
    double s = 0;
    for (double v : log_softmax(l.row(t))) s += std::exp(v);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_EQ(hidden_states(p, c, ids).cols(), c.embedding_dim);
}

TEST(Forward, CausalityUnderAppendAndPerturbation) {
  const auto c = micro_config(12, 8, 2, 2, 16, 10);
  const auto p = init_params<double>(c);
  const TokenSeq base{1, 5, 6, 7, 8, 9};
  const auto ref = forward(p, c, base);
  TokenSeq longer = base;
  longer.push_back(3);
  const auto lo = forward(p, c, longer);
  EXPECT_TRUE(lo.topRows(ref.rows()).isApprox(ref, 1e-12));
  for (std::size_t t = 1; t < base.size(); ++t) {
    TokenSeq changed = base;
    changed[t] = (changed[t] + 1) % c.vocab_size;
    const auto l = forward(p, c, changed);
    EXPECT_TRUE(l.topRows(static_cast<Eigen::Index>(t)).isApprox(ref.topRows(static_cast<Eigen::Index>(t)), 1e-12));
    EXPECT_FALSE(l.row(static_cast<Eigen::Index>(t)).isApprox(ref.row(static_cast<Eigen::Index>(t)), 1e-12));
  }
}

TEST(Forward, RejectsOutOfRangeIdsAndOverlongInput) {
  const auto c = micro_config();
  const auto p = init_params<float>(c);
  EXPECT_THROW(forward(p, c, TokenSeq{1, 12}), std::out_of_range);
  EXPECT_THROW(forward(p, c, TokenSeq{-1}), std::out_of_range);
  EXPECT_THROW(forward(p, c, TokenSeq(11, 1)), std::out_of_range);
}

TEST(Forward, HiddenStatesArePureAndSelfCosineIsOne) {
  const auto c = micro_config();
  const auto p = init_params<float>(c);
  const TokenSeq ids{1, 4, 5};
  const auto a = hidden_states(p, c, ids);
  const auto b = hidden_states(p, c, ids);
  EXPECT_EQ(a, b);
  const Eigen::VectorXd v = a.row(2).cast<double>().transpose();
  EXPECT_NEAR(v.dot(v) / (v.norm() * v.norm()), 1.0, 1e-6);
}

TrainingExample two_token_example() {
  TrainingExample ex;
  ex.input_ids = {Vocabulary::kBos, 2};
  ex.target_ids = {Vocabulary::kMask, 2};
  ex.loss_mask = {false, true};
  return ex;
}

TEST(Loss, UniformLogitsGiveLogVocab) {
  auto c = micro_config(50);
  const auto p = zero_params<double>(c);
  EXPECT_NEAR(nll_loss(p, c, two_token_example()), std::log(50.0), 1e-12);
}

TEST(Loss, HandSetLogitsMatchHandSoftmax) {
  auto c = micro_config(8);
  auto p = zero_params<double>(c);
  // Zero weights make every logits row equal to the output bias.
  const double b[8] = {0.5, -1.0, 2.0, 0.0, 0.25, -0.5, 1.5, 0.0};
  for (int j = 0; j < 8; ++j) p.output_bias(0, j) = b[j];
  double z = 0;
  for (double v : b) z += std::exp(v);
  const double expected = -(2.0 - std::log(z));
  EXPECT_NEAR(nll_loss(p, c, two_token_example()), expected, 1e-12);
  EXPECT_NEAR(continuation_log_prob(p, c, {Vocabulary::kBos}, {2}), -expected, 1e-12);
}

TEST(Loss, SequenceLogProbIsMinusCountTimesMeanNll) {
  const auto corpus = testing::corpus_from(R"({"service":"Music","intent":"PlaySong","utterance":"play a song now"})");
  const auto vocab = build_vocabulary(corpus, 1, {.include_descriptions = true});
  LmConfig c = micro_config(static_cast<int>(vocab.size()), 8, 1, 2, 16, 16);
  const auto p = init_params<double>(c);
  const auto& r = corpus.records()[0];
  const auto ex = encode_example(corpus.intents()[0], r.words, vocab, 16);
  const double lp = sequence_log_prob(p, c, corpus.intents()[0], vocab.encode(r.words), vocab);
  EXPECT_NEAR(lp, -static_cast<double>(ex.unmasked_count()) * nll_loss(p, c, ex), 1e-10);
  EXPECT_LE(lp, 0.0);
  // Empty utterance: the only term is EOS.
  const auto prompt = condition_prompt(corpus.intents()[0], vocab);
  const double eos_only = sequence_log_prob(p, c, corpus.intents()[0], {}, vocab);
  EXPECT_NEAR(eos_only, log_softmax(next_token_logits(p, c, prompt))[Vocabulary::kEos], 1e-12);
}

TEST(Loss, LongerConditionKeepsTheUnmaskedCount) {
  Vocabulary v;
  for (const char* w : {"a", "b", "c", "d"}) v.add_word(w);
  const IntentSpec shortc{"S", "I", "a b"};
  const IntentSpec longc{"S", "I", "a b a b"};
  const auto e1 = encode_example(shortc, {"c", "d"}, v, 20);
  const auto e2 = encode_example(longc, {"c", "d"}, v, 20);
  EXPECT_EQ(e1.unmasked_count(), e2.unmasked_count());
}

/// Central-difference oracle for d(mean NLL)/dθ at a single coordinate.
double numeric_grad(LmParams<double>& p, const LmConfig& c, const std::vector<TrainingExample>& data,
                    double* x, double h) {
  auto loss = [&] {
    double total = 0;
    std::size_t tokens = 0;
    for (const auto& ex : data) {
      total += masked_nll_sum(forward(p, c, ex.input_ids), ex);
      tokens += ex.unmasked_count();
    }
    return total / static_cast<double>(tokens);
  };
  const double old = *x;
  *x = old + h;
  const double up = loss();
  *x = old - h;
  const double down = loss();
  *x = old;
  return (up - down) / (2 * h);
}

TEST(Gradient, AnalyticMatchesFiniteDifferences) {
  const LmConfig c = micro_config(12, 8, 1, 2, 16, 10);
  auto p = init_params<double>(c);
  // Larger weights than the 0.02 init so every path carries signal.
  Rng rng(3);
  for_each_tensor(p, [&](const std::string&, Mat<double>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.3 * rng.normal();
  });
  std::vector<TrainingExample> data;
  for (int k = 0; k < 3; ++k) {
    TrainingExample ex;
    const int n = 5 + k;
    for (int t = 0; t < n; ++t) ex.input_ids.push_back(t == 0 ? 1 : static_cast<TokenId>(2 + rng.below(10)));
    ex.target_ids = ex.input_ids;
    ex.loss_mask.assign(static_cast<std::size_t>(n), true);
    ex.loss_mask[0] = ex.loss_mask[1] = false;
    ex.target_ids[0] = ex.target_ids[1] = Vocabulary::kMask;
    data.push_back(ex);
  }
  std::size_t tokens = 0;
  for (const auto& ex : data) tokens += ex.unmasked_count();
  auto grads = zeros_like(p);
  for (const auto& ex : data) accumulate_nll_grad(p, c, ex, 1.0 / static_cast<double>(tokens), grads);

  std::vector<double*> px, gx;
  std::vector<std::string> names;
  for_each_tensor(p, [&](const std::string& name, Mat<double>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      px.push_back(m.data() + i);
      names.push_back(name);
    }
  });
  for_each_tensor(grads, [&](const std::string&, Mat<double>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) gx.push_back(m.data() + i);
  });
  ASSERT_EQ(px.size(), gx.size());

  int checked = 0;
  double worst = 0;
  for (int trial = 0; trial < 400 && checked < 150; ++trial) {
    const std::size_t i = rng.below(px.size());
    const double a = *gx[i];
    const double n = numeric_grad(p, c, data, px[i], 1e-5);
    const double scale = std::max(std::abs(a), std::abs(n));
    if (scale < 1e-6) continue;
    const double rel = std::abs(a - n) / scale;
    worst = std::max(worst, rel);
    EXPECT_LT(rel, 1e-4) << names[i] << " analytic " << a << " numeric " << n;
    ++checked;
  }
  EXPECT_GE(checked, 100);
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Gradient, MaskedPositionsContributeNothingToOutputProjection) {
  const LmConfig c = micro_config(12, 8, 1, 2, 16, 10);
  const auto p = init_params<double>(c);
  TrainingExample ex;
  ex.input_ids = {1, 4, 5, 6, 7, 8};
  ex.target_ids = {3, 3, 3, 6, 7, 8};
  ex.loss_mask = {false, false, false, true, true, true};
  auto grads = zeros_like(p);
  accumulate_nll_grad(p, c, ex, 1.0, grads);
  // Oracle: sum over unmasked t of h_{t-1}^T (softmax_{t-1} - onehot(target_t)).
  const auto cache = forward_cached(p, c, ex.input_ids);
  Mat<double> expected = Mat<double>::Zero(c.embedding_dim, c.vocab_size);
  for (std::size_t t = 3; t < ex.input_ids.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(t - 1);
    const auto lp = log_softmax(cache.logits.row(row));
    Eigen::RowVectorXd d(c.vocab_size);
    for (int j = 0; j < c.vocab_size; ++j) d(j) = std::exp(lp[static_cast<std::size_t>(j)]);
    d(ex.target_ids[t]) -= 1.0;
    expected += cache.hidden.row(row).transpose() * d;
  }
  EXPECT_TRUE(grads.output_proj.isApprox(expected, 1e-10));
}

std::vector<TrainingExample> fixture_dataset(Vocabulary& vocab_out, std::size_t context) {
  const auto corpus = load_records(testing::fixture("corpus.jsonl").string());
  vocab_out = build_vocabulary(corpus, 1, {.include_descriptions = true});
  std::vector<TrainingExample> data;
  for (const auto& r : corpus.records()) {
    data.push_back(encode_example(corpus.intent_of(r), r.words, vocab_out, context));
  }
  return data;
}

TEST(Train, ZeroLearningRateLeavesParamsUnchanged) {
  const LmConfig c = micro_config(12, 8, 1, 2, 16, 10);
  const auto p = init_params<float>(c);
  std::vector<TrainingExample> data(3, two_token_example());
  TrainHyper h = TrainHyper::desk();
  h.learning_rate = 0;
  h.epochs = 1;
  const auto res = train(p, c, data, h);
  EXPECT_TRUE(params_equal(p, res.params));
}

TEST(Train, FixtureLossStrictlyDecreasesForFiveEpochsAndIsDeterministic) {
  Vocabulary vocab;
  const auto data = fixture_dataset(vocab, 48);
  LmConfig c;
  c.vocab_size = static_cast<int>(vocab.size());
  c.embedding_dim = 32;
  c.ff_dim = 64;
  c.seed = 1;
  TrainHyper h;
  h.batch_size = 8;
  h.learning_rate = 3e-4;
  h.epochs = 5;
  h.seed = 2;
  const auto init = init_params<float>(c);
  const double before = dataset_loss(init, c, data);
  const auto res = train(init, c, data, h);
  ASSERT_EQ(res.epoch_losses.size(), 5u);
  for (std::size_t e = 1; e < res.epoch_losses.size(); ++e) {
    EXPECT_LT(res.epoch_losses[e], res.epoch_losses[e - 1]) << "epoch " << e;
  }
  EXPECT_LT(dataset_loss(res.params, c, data), before);
  h.epochs = 1;
  EXPECT_TRUE(params_equal(train(init, c, data, h).params, train(init, c, data, h).params));
}

TEST(Train, NonFiniteLossIsReportedWithBatch) {
  const LmConfig c = micro_config(12, 8, 1, 2, 16, 10);
  auto p = init_params<float>(c);
  p.output_bias(0, 2) = std::numeric_limits<float>::quiet_NaN();
  std::vector<TrainingExample> data(2, two_token_example());
  try {
    train(p, c, data, TrainHyper::desk());
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos) << e.what();
  }
}

TEST(Optim, ClipReturnsPreClipNormAndRescales) {
  const LmConfig c = micro_config();
  auto g = zero_params<double>(c);
  g.output_bias(0, 0) = 3;
  g.output_bias(0, 1) = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-12);
  EXPECT_NEAR(g.output_bias(0, 0), 0.6, 1e-12);
}

TEST(Optim, FirstAdamStepMovesEachCoordinateByLearningRate) {
  const LmConfig c = micro_config();
  auto p = zero_params<double>(c);
  auto g = zero_params<double>(c);
  g.output_bias(0, 0) = 0.5;
  g.output_bias(0, 1) = -2.0;
  Adam<double> adam(p, {0.01, 0.9, 0.999, 1e-12});
  adam.step(p, g);
  EXPECT_NEAR(p.output_bias(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(p.output_bias(0, 1), 0.01, 1e-9);
  EXPECT_EQ(p.output_bias(0, 2), 0.0);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const LmConfig c = micro_config();
  const auto p = init_params<float>(c);
  const auto bytes = serialize_checkpoint(p, c);
  const auto m = deserialize_checkpoint(bytes);
  EXPECT_EQ(m.config, c);
  EXPECT_TRUE(params_equal(m.params, p));
  EXPECT_EQ(serialize_checkpoint(m.params, m.config), bytes);
  testing::TempDir dir("ckpt");
  save_checkpoint(p, c, (dir / "m.ckpt").string());
  EXPECT_TRUE(params_equal(load_checkpoint((dir / "m.ckpt").string()).params, p));
}

TEST(Checkpoint, EveryTruncationIsAnError) {
  const LmConfig c = micro_config(12, 8, 1, 2, 16, 10);
  const auto bytes = serialize_checkpoint(init_params<float>(c), c);
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    EXPECT_THROW(deserialize_checkpoint(std::string_view(bytes).substr(0, n)), DataError) << n;
  }
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), DataError);
}

TEST(Checkpoint, NewerVersionAndBadMagicAreNamed) {
  const LmConfig c = micro_config();
  auto bytes = serialize_checkpoint(init_params<float>(c), c);
  auto newer = bytes;
  newer[kCheckpointMagic.size()] = 2;
  try {
    deserialize_checkpoint(newer);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), DataError);
}

TEST(Checkpoint, ShapeMismatchIsAnError) {
  LmConfig c = micro_config();
  const auto p = init_params<float>(c);
  LmConfig lie = c;
  lie.ff_dim = 17;
  EXPECT_THROW(deserialize_checkpoint(serialize_checkpoint(p, lie)), DataError);
}

}  // namespace
}  // namespace uttergen
