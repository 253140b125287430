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

#include "uttergen/lm.hpp"

namespace uttergen {

struct AdamOptions {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction, keeping its moments alongside the params.
template <class S>
class Adam {
 public:
  Adam(const LmParams<S>& like, AdamOptions opts)
      : opts_(opts), m_(zeros_like(like)), v_(zeros_like(like)) {}

  /// params -= lr * m_hat / (sqrt(v_hat) + eps)
  void step(LmParams<S>& params, const LmParams<S>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(opts_.beta1), b2 = static_cast<S>(opts_.beta2);
    const S lr = static_cast<S>(opts_.learning_rate), eps = static_cast<S>(opts_.epsilon);
    const S ic1 = static_cast<S>(1.0 / c1), ic2 = static_cast<S>(1.0 / c2);
    std::vector<Mat<S>*> ps, ms, vs;
    std::vector<const Mat<S>*> gs;
    for_each_tensor(params, [&](const std::string&, Mat<S>& x) { ps.push_back(&x); });
    for_each_tensor(m_, [&](const std::string&, Mat<S>& x) { ms.push_back(&x); });
    for_each_tensor(v_, [&](const std::string&, Mat<S>& x) { vs.push_back(&x); });
    for_each_tensor(grads, [&](const std::string&, const Mat<S>& x) { gs.push_back(&x); });
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& m = *ms[i];
      auto& v = *vs[i];
      const auto& g = *gs[i];
      m = b1 * m + (S(1) - b1) * g;
      v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
      ps[i]->array() -= lr * (m.array() * ic1) / ((v.array() * ic2).sqrt() + eps);
    }
  }

  long steps() const { return t_; }
  const AdamOptions& options() const { return opts_; }

 private:
  AdamOptions opts_;
  LmParams<S> m_;
  LmParams<S> v_;
  long t_ = 0;
};

template <class S>
double global_norm(const LmParams<S>& g) {
  double sq = 0;
  for_each_tensor(g, [&](const std::string&, const Mat<S>& m) {
    sq += m.template cast<double>().squaredNorm();
  });
  return std::sqrt(sq);
}

/// Rescales gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping. max_norm <= 0 disables clipping.
template <class S>
double clip_grad_norm(LmParams<S>& g, double max_norm) {
  const double norm = global_norm(g);
  if (max_norm > 0 && norm > max_norm) {
    const S s = static_cast<S>(max_norm / norm);
    for_each_tensor(g, [&](const std::string&, Mat<S>& m) { m *= s; });
  }
  return norm;
}

}  // namespace uttergen
