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

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "uttergen/lm.hpp"
#include "uttergen/optim.hpp"

namespace uttergen {

struct TrainHyper {
  int batch_size = 32;
  double learning_rate = 5e-5;
  int epochs = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("TrainHyper: batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("TrainHyper: learning_rate must be >= 0");
    if (epochs < 0) throw ConfigError("TrainHyper: epochs must be >= 0");
  }

  /// Fine-tuning settings reported for the pretrained setting: batch 32,
  /// lr 5e-5, Adam defaults, one epoch.
  static TrainHyper paper_faithful() { return TrainHyper{}; }

  /// Fine-tuning settings for the desk-scale base model: a few short passes,
  /// so the base model's vocabulary knowledge survives conditioning.
  static TrainHyper desk() {
    TrainHyper h;
    h.batch_size = 8;
    h.learning_rate = 1e-4;
    h.epochs = 3;
    return h;
  }
};

inline void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = nlohmann::json{{"batch_size", h.batch_size}, {"learning_rate", h.learning_rate},
                     {"epochs", h.epochs},         {"beta1", h.beta1},
                     {"beta2", h.beta2},           {"epsilon", h.epsilon},
                     {"clip_norm", h.clip_norm},   {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, TrainHyper& h) {
  const TrainHyper d = h;
  h.batch_size = j.value("batch_size", d.batch_size);
  h.learning_rate = j.value("learning_rate", d.learning_rate);
  h.epochs = j.value("epochs", d.epochs);
  h.beta1 = j.value("beta1", d.beta1);
  h.beta2 = j.value("beta2", d.beta2);
  h.epsilon = j.value("epsilon", d.epsilon);
  h.clip_norm = j.value("clip_norm", d.clip_norm);
  h.seed = j.value("seed", d.seed);
}

template <class S>
struct TrainResult {
  LmParams<S> params;
  std::vector<double> epoch_losses;  // mean NLL per unmasked token, measured during the epoch
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Minibatch Adam on the masked NLL. Each batch's gradient is the mean over
/// its unmasked tokens. Deterministic in hyper.seed.
template <class S>
TrainResult<S> train(LmParams<S> params, const LmConfig& config,
                     const std::vector<TrainingExample>& dataset, const TrainHyper& hyper,
                     const EpochCallback& on_epoch = {}) {
  hyper.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& ex : dataset) check_example(ex);

  Adam<S> adam(params, {hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.epsilon});
  Rng rng(derive_seed(hyper.seed, "train"));
  Rng dropout_rng(derive_seed(hyper.seed, "dropout"));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  LmParams<S> grads = zeros_like(params);

  TrainResult<S> result;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t token_count = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(hyper.batch_size), ++batch_index) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
      std::size_t batch_tokens = 0;
      for (std::size_t i = start; i < end; ++i) batch_tokens += dataset[order[i]].unmasked_count();
      if (batch_tokens == 0) continue;
      for_each_tensor(grads, [](const std::string&, Mat<S>& m) { m.setZero(); });
      double batch_loss = 0;
      const double weight = 1.0 / static_cast<double>(batch_tokens);
      for (std::size_t i = start; i < end; ++i) {
        batch_loss += accumulate_nll_grad(params, config, dataset[order[i]], weight, grads, &dropout_rng);
      }
      if (!std::isfinite(batch_loss) || !all_finite(grads)) {
        throw NumericalError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index) + " (examples " + std::to_string(start) +
                             ".." + std::to_string(end - 1) + " of the shuffled order)");
      }
      clip_grad_norm(grads, hyper.clip_norm);
      adam.step(params, grads);
      loss_sum += batch_loss;
      token_count += batch_tokens;
    }
    if (!all_finite(params)) {
      throw NumericalError("non-finite parameters after epoch " + std::to_string(epoch));
    }
    const double mean = loss_sum / static_cast<double>(token_count);
    result.epoch_losses.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  result.params = std::move(params);
  return result;
}

/// Mean NLL per unmasked token over a dataset, without updating anything.
template <class S>
double dataset_loss(const LmParams<S>& params, const LmConfig& config,
                    const std::vector<TrainingExample>& dataset) {
  double total = 0;
  std::size_t tokens = 0;
  for (const auto& ex : dataset) {
    total += masked_nll_sum(forward(params, config, ex.input_ids), ex);
    tokens += ex.unmasked_count();
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

}  // namespace uttergen
