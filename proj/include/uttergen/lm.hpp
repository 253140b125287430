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

// A small pre-layer-norm decoder-only transformer with hand-written
// backpropagation. Everything is templated on the scalar type: float for
// training and checkpoints, double for finite-difference gradient checks.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "uttergen/corpus.hpp"
#include "uttergen/error.hpp"
#include "uttergen/rng.hpp"

namespace uttergen {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LmConfig {
  int vocab_size = 0;
  int context_length = 48;
  int embedding_dim = 64;
  int num_layers = 2;
  int num_heads = 4;
  int ff_dim = 256;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  int head_dim() const { return embedding_dim / num_heads; }

  void validate() const {
    if (vocab_size < 1 || context_length < 1 || embedding_dim < 1 || num_layers < 1 ||
        num_heads < 1 || ff_dim < 1) {
      throw ConfigError("LmConfig: all dimensions must be >= 1");
    }
    if (embedding_dim % num_heads != 0) {
      throw ConfigError("LmConfig: embedding_dim must be divisible by num_heads");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("LmConfig: dropout must be in [0, 1)");
  }

  friend bool operator==(const LmConfig&, const LmConfig&) = default;
};

inline void to_json(nlohmann::json& j, const LmConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},       {"context_length", c.context_length},
                     {"embedding_dim", c.embedding_dim}, {"num_layers", c.num_layers},
                     {"num_heads", c.num_heads},         {"ff_dim", c.ff_dim},
                     {"dropout", c.dropout},             {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, LmConfig& c) {
  LmConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.context_length = j.value("context_length", d.context_length);
  c.embedding_dim = j.value("embedding_dim", d.embedding_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.ff_dim = j.value("ff_dim", d.ff_dim);
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
}

template <class S>
struct LayerParams {
  Mat<S> ln1_gain, ln1_bias;
  Mat<S> attn_qkv, attn_qkv_bias;  // D x 3D, packed [q | k | v]
  Mat<S> attn_out, attn_out_bias;
  Mat<S> ln2_gain, ln2_bias;
  Mat<S> ff_in, ff_in_bias;
  Mat<S> ff_out, ff_out_bias;
};

/// Model weights. Bias and gain vectors are stored as 1 x n matrices so every
/// tensor has the same type.
template <class S>
struct LmParams {
  Mat<S> token_embedding;     // V x D
  Mat<S> position_embedding;  // C x D
  std::vector<LayerParams<S>> layers;
  Mat<S> final_ln_gain, final_ln_bias;
  Mat<S> output_proj;  // D x V
  Mat<S> output_bias;
};

/// Visits every tensor in a fixed order with its stable name. Works for both
/// const and mutable params.
template <class P, class F>
void for_each_tensor(P& p, F&& f) {
  f(std::string("token_embedding"), p.token_embedding);
  f(std::string("position_embedding"), p.position_embedding);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    f(pre + "ln1_gain", l.ln1_gain);
    f(pre + "ln1_bias", l.ln1_bias);
    f(pre + "attn_qkv", l.attn_qkv);
    f(pre + "attn_qkv_bias", l.attn_qkv_bias);
    f(pre + "attn_out", l.attn_out);
    f(pre + "attn_out_bias", l.attn_out_bias);
    f(pre + "ln2_gain", l.ln2_gain);
    f(pre + "ln2_bias", l.ln2_bias);
    f(pre + "ff_in", l.ff_in);
    f(pre + "ff_in_bias", l.ff_in_bias);
    f(pre + "ff_out", l.ff_out);
    f(pre + "ff_out_bias", l.ff_out_bias);
  }
  f(std::string("final_ln_gain"), p.final_ln_gain);
  f(std::string("final_ln_bias"), p.final_ln_bias);
  f(std::string("output_proj"), p.output_proj);
  f(std::string("output_bias"), p.output_bias);
}

/// Visits matching tensors of two params structs pairwise.
template <class P, class Q, class F>
void zip_tensors(P& a, Q& b, F&& f) {
  std::vector<decltype(&a.token_embedding)> as;
  std::vector<decltype(&b.token_embedding)> bs;
  for_each_tensor(a, [&](const std::string&, auto& m) { as.push_back(&m); });
  for_each_tensor(b, [&](const std::string&, auto& m) { bs.push_back(&m); });
  if (as.size() != bs.size()) throw std::invalid_argument("zip_tensors: layer count mismatch");
  for (std::size_t i = 0; i < as.size(); ++i) f(*as[i], *bs[i]);
}

enum class TensorInit { kNormal, kZeros, kOnes };

/// Shape and initialization of every tensor for a config, in visit order.
struct TensorShape {
  std::string name;
  int rows;
  int cols;
  TensorInit init;
};

inline std::vector<TensorShape> tensor_shapes(const LmConfig& c) {
  const int v = c.vocab_size, d = c.embedding_dim, f = c.ff_dim;
  std::vector<TensorShape> out{{"token_embedding", v, d, TensorInit::kNormal},
                               {"position_embedding", c.context_length, d, TensorInit::kNormal}};
  for (int i = 0; i < c.num_layers; ++i) {
    const std::string pre = "layers." + std::to_string(i) + ".";
    out.push_back({pre + "ln1_gain", 1, d, TensorInit::kOnes});
    out.push_back({pre + "ln1_bias", 1, d, TensorInit::kZeros});
    out.push_back({pre + "attn_qkv", d, 3 * d, TensorInit::kNormal});
    out.push_back({pre + "attn_qkv_bias", 1, 3 * d, TensorInit::kZeros});
    out.push_back({pre + "attn_out", d, d, TensorInit::kNormal});
    out.push_back({pre + "attn_out_bias", 1, d, TensorInit::kZeros});
    out.push_back({pre + "ln2_gain", 1, d, TensorInit::kOnes});
    out.push_back({pre + "ln2_bias", 1, d, TensorInit::kZeros});
    out.push_back({pre + "ff_in", d, f, TensorInit::kNormal});
    out.push_back({pre + "ff_in_bias", 1, f, TensorInit::kZeros});
    out.push_back({pre + "ff_out", f, d, TensorInit::kNormal});
    out.push_back({pre + "ff_out_bias", 1, d, TensorInit::kZeros});
  }
  out.push_back({"final_ln_gain", 1, d, TensorInit::kOnes});
  out.push_back({"final_ln_bias", 1, d, TensorInit::kZeros});
  out.push_back({"output_proj", d, v, TensorInit::kNormal});
  out.push_back({"output_bias", 1, v, TensorInit::kZeros});
  return out;
}

/// Allocates correctly-shaped zero tensors.
template <class S>
LmParams<S> zero_params(const LmConfig& config) {
  config.validate();
  LmParams<S> p;
  p.layers.resize(static_cast<std::size_t>(config.num_layers));
  const auto shapes = tensor_shapes(config);
  std::size_t i = 0;
  for_each_tensor(p, [&](const std::string&, Mat<S>& m) {
    m = Mat<S>::Zero(shapes[i].rows, shapes[i].cols);
    ++i;
  });
  return p;
}

/// Normal(0, 0.02) weights, zero biases, unit layer-norm gains; deterministic
/// in config.seed.
template <class S = float>
LmParams<S> init_params(const LmConfig& config) {
  LmParams<S> p = zero_params<S>(config);
  const auto shapes = tensor_shapes(config);
  Rng rng(derive_seed(config.seed, "init"));
  std::size_t i = 0;
  for_each_tensor(p, [&](const std::string&, Mat<S>& m) {
    switch (shapes[i].init) {
      case TensorInit::kNormal:
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<S>(0.02 * rng.normal());
        break;
      case TensorInit::kOnes:
        m.setOnes();
        break;
      case TensorInit::kZeros:
        break;
    }
    ++i;
  });
  return p;
}

template <class S>
LmParams<S> zeros_like(const LmParams<S>& p) {
  LmParams<S> g = p;
  for_each_tensor(g, [](const std::string&, Mat<S>& m) { m.setZero(); });
  return g;
}

template <class To, class From>
LmParams<To> cast_params(const LmParams<From>& p) {
  LmParams<To> out;
  out.layers.resize(p.layers.size());
  zip_tensors(out, p, [](Mat<To>& dst, const Mat<From>& src) { dst = src.template cast<To>(); });
  return out;
}

template <class S>
std::size_t parameter_count(const LmParams<S>& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, const Mat<S>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <class S>
bool all_finite(const LmParams<S>& p) {
  bool ok = true;
  for_each_tensor(p, [&](const std::string&, const Mat<S>& m) { ok = ok && m.allFinite(); });
  return ok;
}

template <class S>
bool params_equal(const LmParams<S>& a, const LmParams<S>& b) {
  if (a.layers.size() != b.layers.size()) return false;
  bool eq = true;
  zip_tensors(a, b, [&](const Mat<S>& x, const Mat<S>& y) {
    eq = eq && x.rows() == y.rows() && x.cols() == y.cols() && x == y;
  });
  return eq;
}

namespace detail {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

template <class S>
void layer_norm_forward(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias, Mat<S>& hat,
                        std::vector<S>& rstd, Mat<S>& out) {
  const Eigen::Index t = x.rows(), d = x.cols();
  hat.resize(t, d);
  out.resize(t, d);
  rstd.resize(static_cast<std::size_t>(t));
  for (Eigen::Index i = 0; i < t; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    const S r = S(1) / std::sqrt(var + S(kLayerNormEps));
    rstd[static_cast<std::size_t>(i)] = r;
    hat.row(i) = (x.row(i).array() - mean) * r;
    out.row(i) = hat.row(i).cwiseProduct(gain) + bias;
  }
}

template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dout, const Mat<S>& hat, const std::vector<S>& rstd,
                           const Mat<S>& gain, Mat<S>& dgain, Mat<S>& dbias) {
  dgain += dout.cwiseProduct(hat).colwise().sum();
  dbias += dout.colwise().sum();
  Mat<S> dx(dout.rows(), dout.cols());
  for (Eigen::Index i = 0; i < dout.rows(); ++i) {
    const auto dhat = dout.row(i).cwiseProduct(gain).eval();
    const S mean_dhat = dhat.mean();
    const S mean_dhat_hat = dhat.cwiseProduct(hat.row(i)).mean();
    dx.row(i) = rstd[static_cast<std::size_t>(i)] *
                (dhat.array() - mean_dhat - hat.row(i).array() * mean_dhat_hat).matrix();
  }
  return dx;
}

template <class S>
S gelu(S u) {
  return S(0.5) * u * (S(1) + std::tanh(S(kGeluC) * (u + S(0.044715) * u * u * u)));
}

template <class S>
S gelu_grad(S u) {
  const S inner = S(kGeluC) * (u + S(0.044715) * u * u * u);
  const S th = std::tanh(inner);
  return S(0.5) * (S(1) + th) +
         S(0.5) * u * (S(1) - th * th) * S(kGeluC) * (S(1) + S(3 * 0.044715) * u * u);
}

/// Inverted-dropout mask (entries 0 or 1/(1-rate)).
template <class S>
Mat<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Mat<S> m(rows, cols);
  const S keep = S(1) / S(1.0 - rate);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform() < rate ? S(0) : keep;
  return m;
}

}  // namespace detail

template <class S>
struct LayerCache {
  Mat<S> x_in;
  Mat<S> ln1_hat, h1;
  std::vector<S> ln1_rstd;
  Mat<S> qkv;
  std::vector<Mat<S>> probs;  // per head, T x T, causal
  Mat<S> attn_concat;
  Mat<S> drop_attn;
  Mat<S> x_mid;
  Mat<S> ln2_hat, h2;
  std::vector<S> ln2_rstd;
  Mat<S> ff_pre, ff_act;
  Mat<S> drop_ff;
};

/// Activations retained for backpropagation.
template <class S>
struct ForwardCache {
  TokenSeq ids;
  Mat<S> drop_emb;
  std::vector<LayerCache<S>> layers;
  Mat<S> lnf_hat;
  std::vector<S> lnf_rstd;
  Mat<S> hidden;  // final layer-norm output, T x D
  Mat<S> logits;  // T x V
};

inline void check_ids(const LmConfig& c, std::span<const TokenId> ids) {
  if (ids.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(ids.size()) > c.context_length) {
    throw std::out_of_range("forward: sequence of " + std::to_string(ids.size()) +
                            " tokens exceeds context length " + std::to_string(c.context_length));
  }
  for (TokenId t : ids) {
    if (t < 0 || t >= c.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(c.vocab_size));
    }
  }
}

/// Runs the network. With `dropout_rng` set and config.dropout > 0 the
/// training-mode dropout masks are drawn from it; otherwise inference mode.
/// `project_rows` limits the output projection to the last n rows (0 = all).
template <class S>
ForwardCache<S> forward_cached(const LmParams<S>& p, const LmConfig& c,
                               std::span<const TokenId> ids, Rng* dropout_rng = nullptr,
                               Eigen::Index project_rows = 0) {
  check_ids(c, ids);
  const Eigen::Index t = static_cast<Eigen::Index>(ids.size());
  const int d = c.embedding_dim, heads = c.num_heads, dh = c.head_dim();
  const bool drop = dropout_rng != nullptr && c.dropout > 0.0;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  ForwardCache<S> cache;
  cache.ids.assign(ids.begin(), ids.end());
  Mat<S> x(t, d);
  for (Eigen::Index i = 0; i < t; ++i) {
    x.row(i) = p.token_embedding.row(ids[static_cast<std::size_t>(i)]) + p.position_embedding.row(i);
  }
  if (drop) {
    cache.drop_emb = detail::dropout_mask<S>(t, d, c.dropout, *dropout_rng);
    x = x.cwiseProduct(cache.drop_emb);
  }

  cache.layers.resize(p.layers.size());
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& w = p.layers[li];
    auto& lc = cache.layers[li];
    lc.x_in = x;
    detail::layer_norm_forward(x, w.ln1_gain, w.ln1_bias, lc.ln1_hat, lc.ln1_rstd, lc.h1);
    lc.qkv = lc.h1 * w.attn_qkv;
    lc.qkv.rowwise() += w.attn_qkv_bias.row(0);
    lc.attn_concat.resize(t, d);
    lc.probs.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      Mat<S> scores = (q * k.transpose()) * scale;
      Mat<S>& probs = lc.probs[static_cast<std::size_t>(h)];
      probs.setZero(t, t);
      for (Eigen::Index i = 0; i < t; ++i) {
        const S mx = scores.row(i).head(i + 1).maxCoeff();
        S sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const S e = std::exp(scores(i, j) - mx);
          probs(i, j) = e;
          sum += e;
        }
        probs.row(i).head(i + 1) /= sum;
      }
      lc.attn_concat.middleCols(h * dh, dh) = probs * v;
    }
    Mat<S> a = lc.attn_concat * w.attn_out;
    a.rowwise() += w.attn_out_bias.row(0);
    if (drop) {
      lc.drop_attn = detail::dropout_mask<S>(t, d, c.dropout, *dropout_rng);
      a = a.cwiseProduct(lc.drop_attn);
    }
    lc.x_mid = lc.x_in + a;
    detail::layer_norm_forward(lc.x_mid, w.ln2_gain, w.ln2_bias, lc.ln2_hat, lc.ln2_rstd, lc.h2);
    lc.ff_pre = lc.h2 * w.ff_in;
    lc.ff_pre.rowwise() += w.ff_in_bias.row(0);
    lc.ff_act = lc.ff_pre.unaryExpr([](S u) { return detail::gelu(u); });
    Mat<S> f = lc.ff_act * w.ff_out;
    f.rowwise() += w.ff_out_bias.row(0);
    if (drop) {
      lc.drop_ff = detail::dropout_mask<S>(t, d, c.dropout, *dropout_rng);
      f = f.cwiseProduct(lc.drop_ff);
    }
    x = lc.x_mid + f;
  }
  detail::layer_norm_forward(x, p.final_ln_gain, p.final_ln_bias, cache.lnf_hat, cache.lnf_rstd,
                             cache.hidden);
  const Eigen::Index rows = project_rows > 0 ? std::min(project_rows, t) : t;
  cache.logits = cache.hidden.bottomRows(rows) * p.output_proj;
  cache.logits.rowwise() += p.output_bias.row(0);
  return cache;
}

/// Per-position logits (T x V). Row t depends only on ids[0..t].
template <class S>
Mat<S> forward(const LmParams<S>& p, const LmConfig& c, std::span<const TokenId> ids) {
  return forward_cached(p, c, ids).logits;
}

/// Logits for the token following `ids`.
template <class S>
Eigen::Matrix<S, 1, Eigen::Dynamic> next_token_logits(const LmParams<S>& p, const LmConfig& c,
                                                      std::span<const TokenId> ids) {
  return forward_cached(p, c, ids, nullptr, 1).logits.row(0);
}

/// Final-layer (post layer-norm, pre-projection) vectors, T x D.
template <class S>
Mat<S> hidden_states(const LmParams<S>& p, const LmConfig& c, std::span<const TokenId> ids) {
  return forward_cached(p, c, ids, nullptr, 1).hidden;
}

/// Accumulates parameter gradients given dLoss/dlogits (same shape as
/// cache.logits, which must cover every position).
template <class S>
void backward(const LmParams<S>& p, const LmConfig& c, const ForwardCache<S>& cache,
              const Mat<S>& dlogits, LmParams<S>& grads) {
  const Eigen::Index t = static_cast<Eigen::Index>(cache.ids.size());
  if (dlogits.rows() != t || cache.logits.rows() != t) {
    throw std::invalid_argument("backward: logits must cover every position");
  }
  const int d = c.embedding_dim, heads = c.num_heads, dh = c.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  grads.output_proj.noalias() += cache.hidden.transpose() * dlogits;
  grads.output_bias += dlogits.colwise().sum();
  Mat<S> dhidden = dlogits * p.output_proj.transpose();
  Mat<S> dx = detail::layer_norm_backward(dhidden, cache.lnf_hat, cache.lnf_rstd, p.final_ln_gain,
                                          grads.final_ln_gain, grads.final_ln_bias);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& w = p.layers[li];
    auto& g = grads.layers[li];
    const auto& lc = cache.layers[li];

    // Feed-forward block.
    Mat<S> df = lc.drop_ff.size() ? dx.cwiseProduct(lc.drop_ff).eval() : dx;
    g.ff_out.noalias() += lc.ff_act.transpose() * df;
    g.ff_out_bias += df.colwise().sum();
    Mat<S> dpre = (df * w.ff_out.transpose())
                      .cwiseProduct(lc.ff_pre.unaryExpr([](S u) { return detail::gelu_grad(u); }));
    g.ff_in.noalias() += lc.h2.transpose() * dpre;
    g.ff_in_bias += dpre.colwise().sum();
    Mat<S> dh2 = dpre * w.ff_in.transpose();
    Mat<S> dx_mid =
        dx + detail::layer_norm_backward(dh2, lc.ln2_hat, lc.ln2_rstd, w.ln2_gain, g.ln2_gain, g.ln2_bias);

    // Attention block.
    Mat<S> da = lc.drop_attn.size() ? dx_mid.cwiseProduct(lc.drop_attn).eval() : dx_mid;
    g.attn_out.noalias() += lc.attn_concat.transpose() * da;
    g.attn_out_bias += da.colwise().sum();
    Mat<S> dconcat = da * w.attn_out.transpose();
    Mat<S> dqkv = Mat<S>::Zero(t, 3 * d);
    for (int h = 0; h < heads; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      const Mat<S>& probs = lc.probs[static_cast<std::size_t>(h)];
      const auto dy = dconcat.middleCols(h * dh, dh);
      Mat<S> dprobs = dy * v.transpose();
      dqkv.middleCols(2 * d + h * dh, dh).noalias() += probs.transpose() * dy;
      Mat<S> dscores(t, t);
      for (Eigen::Index i = 0; i < t; ++i) {
        const S dot = dprobs.row(i).dot(probs.row(i));
        dscores.row(i) = probs.row(i).cwiseProduct((dprobs.row(i).array() - dot).matrix());
      }
      dqkv.middleCols(h * dh, dh).noalias() += (dscores * k) * scale;
      dqkv.middleCols(d + h * dh, dh).noalias() += (dscores.transpose() * q) * scale;
    }
    g.attn_qkv.noalias() += lc.h1.transpose() * dqkv;
    g.attn_qkv_bias += dqkv.colwise().sum();
    Mat<S> dh1 = dqkv * w.attn_qkv.transpose();
    dx = dx_mid +
         detail::layer_norm_backward(dh1, lc.ln1_hat, lc.ln1_rstd, w.ln1_gain, g.ln1_gain, g.ln1_bias);
  }

  if (cache.drop_emb.size()) dx = dx.cwiseProduct(cache.drop_emb);
  for (Eigen::Index i = 0; i < t; ++i) {
    grads.token_embedding.row(cache.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    grads.position_embedding.row(i) += dx.row(i);
  }
}

/// log-softmax of one row, computed in double.
template <class Row>
std::vector<double> log_softmax(const Row& logits) {
  const Eigen::Index n = logits.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(logits(j)));
  double sum = 0;
  for (Eigen::Index j = 0; j < n; ++j) sum += std::exp(static_cast<double>(logits(j)) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] = static_cast<double>(logits(j)) - lse;
  return out;
}

/// Sum of -log p(target_t | inputs_<t) over loss-mask positions.
template <class S>
double masked_nll_sum(const Mat<S>& logits, const TrainingExample& ex) {
  double total = 0;
  for (std::size_t t = 1; t < ex.input_ids.size(); ++t) {
    if (!ex.loss_mask[t]) continue;
    const auto lp = log_softmax(logits.row(static_cast<Eigen::Index>(t - 1)));
    total -= lp[static_cast<std::size_t>(ex.target_ids[t])];
  }
  return total;
}

inline void check_example(const TrainingExample& ex) {
  if (ex.input_ids.size() != ex.target_ids.size() || ex.input_ids.size() != ex.loss_mask.size()) {
    throw std::invalid_argument("TrainingExample: mismatched lengths");
  }
  if (!ex.loss_mask.empty() && ex.loss_mask[0]) {
    throw std::invalid_argument("TrainingExample: first position cannot carry loss");
  }
}

/// Mean negative log-likelihood per unmasked token.
template <class S>
double nll_loss(const LmParams<S>& p, const LmConfig& c, const TrainingExample& ex) {
  check_example(ex);
  const std::size_t n = ex.unmasked_count();
  if (n == 0) throw std::invalid_argument("nll_loss: example has no unmasked positions");
  return masked_nll_sum(forward(p, c, ex.input_ids), ex) / static_cast<double>(n);
}

/// Adds `weight` * d(sum NLL)/dparams into grads and returns the NLL sum.
template <class S>
double accumulate_nll_grad(const LmParams<S>& p, const LmConfig& c, const TrainingExample& ex,
                           double weight, LmParams<S>& grads, Rng* dropout_rng = nullptr) {
  check_example(ex);
  const auto cache = forward_cached(p, c, ex.input_ids, dropout_rng);
  Mat<S> dlogits = Mat<S>::Zero(cache.logits.rows(), cache.logits.cols());
  double total = 0;
  for (std::size_t t = 1; t < ex.input_ids.size(); ++t) {
    if (!ex.loss_mask[t]) continue;
    const auto row = static_cast<Eigen::Index>(t - 1);
    const auto lp = log_softmax(cache.logits.row(row));
    const auto target = static_cast<std::size_t>(ex.target_ids[t]);
    total -= lp[target];
    for (std::size_t j = 0; j < lp.size(); ++j) {
      dlogits(row, static_cast<Eigen::Index>(j)) += static_cast<S>(weight * std::exp(lp[j]));
    }
    dlogits(row, static_cast<Eigen::Index>(target)) -= static_cast<S>(weight);
  }
  backward(p, c, cache, dlogits, grads);
  return total;
}

/// Sum of log p(continuation_i | prompt, continuation_<i).
template <class S>
double continuation_log_prob(const LmParams<S>& p, const LmConfig& c, const TokenSeq& prompt,
                             const TokenSeq& continuation) {
  if (prompt.empty()) throw std::invalid_argument("continuation_log_prob: empty prompt");
  if (continuation.empty()) return 0.0;
  TokenSeq ids = prompt;
  ids.insert(ids.end(), continuation.begin(), continuation.end() - 1);
  const auto logits = forward_cached(p, c, ids, nullptr, static_cast<Eigen::Index>(continuation.size())).logits;
  double total = 0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const auto lp = log_softmax(logits.row(static_cast<Eigen::Index>(i)));
    total += lp[static_cast<std::size_t>(continuation[i])];
  }
  return total;
}

/// log p(utterance, EOS | intent): the sum over the example's unmasked span.
template <class S>
double sequence_log_prob(const LmParams<S>& p, const LmConfig& c, const IntentSpec& intent,
                         const TokenSeq& utterance, const Vocabulary& vocab) {
  TokenSeq cont = utterance;
  cont.push_back(Vocabulary::kEos);
  const TokenSeq prompt = condition_prompt(intent, vocab);
  if (prompt.size() + cont.size() > static_cast<std::size_t>(c.context_length)) {
    throw std::out_of_range("sequence_log_prob: sequence exceeds context length");
  }
  return continuation_log_prob(p, c, prompt, cont);
}

}  // namespace uttergen
