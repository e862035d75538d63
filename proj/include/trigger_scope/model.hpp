#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trigger_scope/errors.hpp"
#include "trigger_scope/kernels.hpp"
#include "trigger_scope/log.hpp"
#include "trigger_scope/matrix.hpp"
#include "trigger_scope/rng.hpp"
#include "trigger_scope/tokenizer.hpp"

// A compact pre-norm transformer encoder classifier. It exposes the three
// things the defense needs from a victim model: class probabilities,
// per-layer per-head attention matrices, and exact gradients of the loss
// with respect to the input embeddings.

namespace trigger_scope::model {

using numerics::Matrix;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  std::size_t n_classes = 2;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 ||
        vocab_size < 1 || max_len < 3 || n_classes < 1) {
      throw ConfigError("model config: all counts must be >= 1 (max_len >= 3)");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
  }
};

struct LayerParams {
  Matrix ln1_gamma, ln1_beta;  // 1 x d_model
  Matrix w_q, w_k, w_v, w_o;   // d_model x d_model, heads packed by column
  Matrix ln2_gamma, ln2_beta;  // 1 x d_model
  Matrix ff_w1, ff_b1;         // d_ff x d_model, 1 x d_ff
  Matrix ff_w2, ff_b2;         // d_model x d_ff, 1 x d_model
};

// Model parameters. Doubles as the gradient container (zeros_like), since
// gradients share every shape.
struct ModelCheckpoint {
  ModelConfig config;
  Matrix token_embeddings;     // vocab_size x d_model
  Matrix position_embeddings;  // max_len x d_model
  std::vector<LayerParams> layers;
  Matrix head_w;  // n_classes x d_model
  Matrix head_b;  // 1 x n_classes

  // Visits every parameter matrix in a fixed declared order; this order is
  // the checkpoint file layout and the Adam state layout.
  template <typename Self, typename Visitor>
  static void visit(Self& self, Visitor&& fn) {
    fn("token_embeddings", self.token_embeddings);
    fn("position_embeddings", self.position_embeddings);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& layer = self.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      fn(p + "ln1_gamma", layer.ln1_gamma);
      fn(p + "ln1_beta", layer.ln1_beta);
      fn(p + "w_q", layer.w_q);
      fn(p + "w_k", layer.w_k);
      fn(p + "w_v", layer.w_v);
      fn(p + "w_o", layer.w_o);
      fn(p + "ln2_gamma", layer.ln2_gamma);
      fn(p + "ln2_beta", layer.ln2_beta);
      fn(p + "ff_w1", layer.ff_w1);
      fn(p + "ff_b1", layer.ff_b1);
      fn(p + "ff_w2", layer.ff_w2);
      fn(p + "ff_b2", layer.ff_b2);
    }
    fn("head_w", self.head_w);
    fn("head_b", self.head_b);
  }

  template <typename Visitor>
  void for_each_parameter(Visitor&& fn) {
    visit(*this, std::forward<Visitor>(fn));
  }
  template <typename Visitor>
  void for_each_parameter(Visitor&& fn) const {
    visit(*this, std::forward<Visitor>(fn));
  }

  static ModelCheckpoint zeros_like(const ModelCheckpoint& src) {
    ModelCheckpoint out = src;
    out.for_each_parameter(
        [](const std::string&, Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); });
    return out;
  }
};

// Everything forward produces that callers may want to inspect.
struct ForwardTrace {
  std::vector<double> logits;               // n_classes
  std::vector<double> probs;                // n_classes, sums to 1
  int predicted = 0;                        // argmax, lowest index on ties
  std::vector<std::vector<Matrix>> attention;  // [layer][head], n x n rows=queries
  Matrix input_embeddings;                  // n x d_model (token + position)
  std::vector<Matrix> hidden;               // per-layer output, n x d_model
  std::vector<double> cls_encoding;         // last-layer CLS row
};

namespace detail {

struct LayerCache {
  Matrix x_in;      // n x d
  Matrix ln1_out;   // n x d
  Matrix q, k, v;   // n x d (heads packed)
  std::vector<Matrix> att;  // per head, n x n
  Matrix ctx;       // n x d
  Matrix x_mid;     // n x d
  Matrix ln2_out;   // n x d
  Matrix ff_pre;    // n x d_ff
  Matrix ff_act;    // n x d_ff
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix x_final;  // n x d
};

inline Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t end) {
  Matrix out(m.rows, end - begin);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = begin; j < end; ++j) {
      out.at(i, j - begin) = m.at(i, j);
    }
  }
  return out;
}

inline void add_into_cols(Matrix& dst, const Matrix& src, std::size_t begin) {
  for (std::size_t i = 0; i < src.rows; ++i) {
    for (std::size_t j = 0; j < src.cols; ++j) {
      dst.at(i, begin + j) += src.at(i, j);
    }
  }
}

inline std::vector<double> row_of(const Matrix& m, std::size_t i) {
  return std::vector<double>(m.data.begin() + i * m.cols,
                             m.data.begin() + (i + 1) * m.cols);
}

constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm with 1 x d gamma/beta matrices.
inline Matrix layer_norm_rows(const Matrix& x, const Matrix& gamma,
                              const Matrix& beta) {
  Matrix out(x.rows, x.cols);
  const std::vector<double> g(gamma.data.begin(), gamma.data.end());
  const std::vector<double> b(beta.data.begin(), beta.data.end());
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto row = numerics::layer_norm(row_of(x, i), g, b, kLayerNormEps);
    std::copy(row.begin(), row.end(), out.data.begin() + i * x.cols);
  }
  return out;
}

// y = x * w^T + b (b is 1 x d_out, may be empty for no bias)
inline Matrix linear(const Matrix& x, const Matrix& w, const Matrix* b) {
  Matrix y = numerics::matmul(x, numerics::transpose(w));
  if (b != nullptr) {
    for (std::size_t i = 0; i < y.rows; ++i) {
      for (std::size_t j = 0; j < y.cols; ++j) y.at(i, j) += b->at(0, j);
    }
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// init

// All weight matrices ~ Normal(0, 0.02), layer-norm gamma 1 / beta 0, biases
// 0. Draw order follows the declared parameter order, so a seed pins the
// checkpoint bit-for-bit.
inline ModelCheckpoint init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const double stddev = 0.02;
  ModelCheckpoint m;
  m.config = config;
  m.token_embeddings = Matrix::randn(config.vocab_size, config.d_model, rng, stddev);
  m.position_embeddings = Matrix::randn(config.max_len, config.d_model, rng, stddev);
  m.layers.resize(config.n_layers);
  for (LayerParams& layer : m.layers) {
    layer.ln1_gamma = Matrix(1, config.d_model, 1.0);
    layer.ln1_beta = Matrix::zeros(1, config.d_model);
    layer.w_q = Matrix::randn(config.d_model, config.d_model, rng, stddev);
    layer.w_k = Matrix::randn(config.d_model, config.d_model, rng, stddev);
    layer.w_v = Matrix::randn(config.d_model, config.d_model, rng, stddev);
    layer.w_o = Matrix::randn(config.d_model, config.d_model, rng, stddev);
    layer.ln2_gamma = Matrix(1, config.d_model, 1.0);
    layer.ln2_beta = Matrix::zeros(1, config.d_model);
    layer.ff_w1 = Matrix::randn(config.d_ff, config.d_model, rng, stddev);
    layer.ff_b1 = Matrix::zeros(1, config.d_ff);
    layer.ff_w2 = Matrix::randn(config.d_model, config.d_ff, rng, stddev);
    layer.ff_b2 = Matrix::zeros(1, config.d_model);
  }
  m.head_w = Matrix::randn(config.n_classes, config.d_model, rng, stddev);
  m.head_b = Matrix::zeros(1, config.n_classes);
  return m;
}

// ---------------------------------------------------------------------------
// forward

namespace detail {

inline ForwardTrace forward_impl(const ModelCheckpoint& m, Matrix embeddings,
                                 ForwardCache* cache) {
  const ModelConfig& cfg = m.config;
  const std::size_t n = embeddings.rows;
  const std::size_t dh = cfg.head_dim();
  // Attention scores are scaled by 1/sqrt(d_model).
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

  ForwardTrace trace;
  trace.input_embeddings = embeddings;
  trace.attention.resize(cfg.n_layers);
  if (cache != nullptr) cache->layers.resize(cfg.n_layers);

  Matrix x = std::move(embeddings);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& layer = m.layers[l];
    LayerCache local;
    local.x_in = x;

    local.ln1_out = layer_norm_rows(x, layer.ln1_gamma, layer.ln1_beta);
    local.q = linear(local.ln1_out, layer.w_q, nullptr);
    local.k = linear(local.ln1_out, layer.w_k, nullptr);
    local.v = linear(local.ln1_out, layer.w_v, nullptr);

    local.ctx = Matrix::zeros(n, cfg.d_model);
    local.att.resize(cfg.n_heads);
    trace.attention[l].resize(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t c0 = h * dh;
      Matrix qh = slice_cols(local.q, c0, c0 + dh);
      Matrix kh = slice_cols(local.k, c0, c0 + dh);
      Matrix vh = slice_cols(local.v, c0, c0 + dh);
      Matrix scores = numerics::matmul(qh, numerics::transpose(kh));
      numerics::scale_inplace(scores, inv_scale);
      Matrix att = numerics::softmax_rows(scores);
      Matrix ctx_h = numerics::matmul(att, vh);
      add_into_cols(local.ctx, ctx_h, c0);
      trace.attention[l][h] = att;
      local.att[h] = std::move(att);
    }

    Matrix attn_out = linear(local.ctx, layer.w_o, nullptr);
    local.x_mid = numerics::add(local.x_in, attn_out);

    local.ln2_out = layer_norm_rows(local.x_mid, layer.ln2_gamma, layer.ln2_beta);
    local.ff_pre = linear(local.ln2_out, layer.ff_w1, &layer.ff_b1);
    local.ff_act = numerics::gelu(local.ff_pre);
    Matrix ff_out = linear(local.ff_act, layer.ff_w2, &layer.ff_b2);
    x = numerics::add(local.x_mid, ff_out);

    trace.hidden.push_back(x);
    if (cache != nullptr) cache->layers[l] = std::move(local);
  }

  numerics::require_finite(x, "forward hidden state");
  if (cache != nullptr) cache->x_final = x;

  // Classification reads the CLS row of the last layer.
  trace.cls_encoding = row_of(x, 0);
  trace.logits.assign(cfg.n_classes, 0.0);
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    double acc = m.head_b.at(0, c);
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      acc += m.head_w.at(c, j) * trace.cls_encoding[j];
    }
    trace.logits[c] = acc;
  }
  Matrix logit_row(1, cfg.n_classes);
  logit_row.data = trace.logits;
  trace.probs = numerics::softmax_rows(logit_row).data;

  trace.predicted = 0;
  for (std::size_t c = 1; c < cfg.n_classes; ++c) {
    if (trace.probs[c] > trace.probs[trace.predicted]) {
      trace.predicted = static_cast<int>(c);
    }
  }
  return trace;
}

}  // namespace detail

// Token + position embedding for an encoded input.
inline Matrix embed(const ModelCheckpoint& m, const tokenizer::EncodedInput& input) {
  const ModelConfig& cfg = m.config;
  if (input.seq_len() > cfg.max_len) {
    throw ShapeError("forward: input length " + std::to_string(input.seq_len()) +
                     " exceeds max_len " + std::to_string(cfg.max_len));
  }
  Matrix e(input.seq_len(), cfg.d_model);
  for (std::size_t i = 0; i < input.seq_len(); ++i) {
    const int id = input.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw ShapeError("forward: token id " + std::to_string(id) +
                       " outside vocab of size " + std::to_string(cfg.vocab_size));
    }
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      e.at(i, j) = m.token_embeddings.at(static_cast<std::size_t>(id), j) +
                   m.position_embeddings.at(i, j);
    }
  }
  return e;
}

inline ForwardTrace forward(const ModelCheckpoint& m,
                            const tokenizer::EncodedInput& input) {
  return detail::forward_impl(m, embed(m, input), nullptr);
}

// Runs the stack on caller-supplied embeddings. This is the entry point the
// finite-difference oracle perturbs.
inline ForwardTrace forward_from_embeddings(const ModelCheckpoint& m,
                                            const Matrix& embeddings) {
  if (embeddings.cols != m.config.d_model || embeddings.rows > m.config.max_len) {
    throw ShapeError("forward_from_embeddings: embeddings " +
                     numerics::shape_string(embeddings) + " incompatible with model");
  }
  return detail::forward_impl(m, embeddings, nullptr);
}

inline std::vector<double> encode_cls(const ModelCheckpoint& m,
                                      const tokenizer::EncodedInput& input) {
  return forward(m, input).cls_encoding;
}

// ---------------------------------------------------------------------------
// backward

namespace detail {

// Full reverse pass from dlogits. Adds parameter gradients into `grads`
// (when non-null) and returns the gradient with respect to the input
// embeddings.
inline Matrix backward_impl(const ModelCheckpoint& m, const ForwardCache& cache,
                            const std::vector<double>& cls_encoding,
                            const std::vector<double>& dlogits,
                            ModelCheckpoint* grads) {
  const ModelConfig& cfg = m.config;
  const std::size_t n = cache.x_final.rows;
  const std::size_t dh = cfg.head_dim();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

  // Head: logits_c = head_w[c] . x_final[0] + head_b[c]
  Matrix dx = Matrix::zeros(n, cfg.d_model);
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      dx.at(0, j) += dlogits[c] * m.head_w.at(c, j);
    }
  }
  if (grads != nullptr) {
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
      grads->head_b.at(0, c) += dlogits[c];
      for (std::size_t j = 0; j < cfg.d_model; ++j) {
        grads->head_w.at(c, j) += dlogits[c] * cls_encoding[j];
      }
    }
  }

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const LayerParams& layer = m.layers[l];
    const LayerCache& local = cache.layers[l];
    LayerParams* lg = grads != nullptr ? &grads->layers[l] : nullptr;

    // FFN block: x_out = x_mid + gelu(ln2(x_mid) W1^T + b1) W2^T + b2
    Matrix dff_out = dx;  // gradient into the ffn branch
    Matrix dact = numerics::matmul(dff_out, layer.ff_w2);
    if (lg != nullptr) {
      numerics::add_inplace(lg->ff_w2, numerics::matmul(numerics::transpose(dff_out), local.ff_act));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cfg.d_model; ++j) {
          lg->ff_b2.at(0, j) += dff_out.at(i, j);
        }
      }
    }
    Matrix dpre = numerics::gelu_backward(local.ff_pre, dact);
    Matrix dln2 = numerics::matmul(dpre, layer.ff_w1);
    if (lg != nullptr) {
      numerics::add_inplace(lg->ff_w1, numerics::matmul(numerics::transpose(dpre), local.ln2_out));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cfg.d_ff; ++j) {
          lg->ff_b1.at(0, j) += dpre.at(i, j);
        }
      }
    }
    // dx currently holds dL/dx_out; residual passes it through to x_mid.
    Matrix dx_mid = dx;
    {
      const std::vector<double> gamma2(layer.ln2_gamma.data.begin(), layer.ln2_gamma.data.end());
      for (std::size_t i = 0; i < n; ++i) {
        auto g = numerics::layer_norm_backward(row_of(local.x_mid, i), gamma2,
                                               kLayerNormEps, row_of(dln2, i));
        for (std::size_t j = 0; j < cfg.d_model; ++j) {
          dx_mid.at(i, j) += g.dinput[j];
          if (lg != nullptr) {
            lg->ln2_gamma.at(0, j) += g.dgamma[j];
            lg->ln2_beta.at(0, j) += g.dbeta[j];
          }
        }
      }
    }

    // Attention block: x_mid = x_in + (ctx W_o^T)
    Matrix dattn_out = dx_mid;
    Matrix dctx = numerics::matmul(dattn_out, layer.w_o);
    if (lg != nullptr) {
      numerics::add_inplace(lg->w_o, numerics::matmul(numerics::transpose(dattn_out), local.ctx));
    }

    Matrix dq = Matrix::zeros(n, cfg.d_model);
    Matrix dk = Matrix::zeros(n, cfg.d_model);
    Matrix dv = Matrix::zeros(n, cfg.d_model);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t c0 = h * dh;
      Matrix qh = slice_cols(local.q, c0, c0 + dh);
      Matrix kh = slice_cols(local.k, c0, c0 + dh);
      Matrix vh = slice_cols(local.v, c0, c0 + dh);
      Matrix dctx_h = slice_cols(dctx, c0, c0 + dh);
      const Matrix& att = local.att[h];

      Matrix datt = numerics::matmul(dctx_h, numerics::transpose(vh));
      Matrix dvh = numerics::matmul(numerics::transpose(att), dctx_h);
      Matrix dscores = numerics::softmax_rows_backward(att, datt);
      numerics::scale_inplace(dscores, inv_scale);
      Matrix dqh = numerics::matmul(dscores, kh);
      Matrix dkh = numerics::matmul(numerics::transpose(dscores), qh);

      add_into_cols(dq, dqh, c0);
      add_into_cols(dk, dkh, c0);
      add_into_cols(dv, dvh, c0);
    }

    Matrix dln1 = numerics::matmul(dq, layer.w_q);
    numerics::add_inplace(dln1, numerics::matmul(dk, layer.w_k));
    numerics::add_inplace(dln1, numerics::matmul(dv, layer.w_v));
    if (lg != nullptr) {
      numerics::add_inplace(lg->w_q, numerics::matmul(numerics::transpose(dq), local.ln1_out));
      numerics::add_inplace(lg->w_k, numerics::matmul(numerics::transpose(dk), local.ln1_out));
      numerics::add_inplace(lg->w_v, numerics::matmul(numerics::transpose(dv), local.ln1_out));
    }

    Matrix dx_in = dx_mid;
    {
      const std::vector<double> gamma1(layer.ln1_gamma.data.begin(), layer.ln1_gamma.data.end());
      for (std::size_t i = 0; i < n; ++i) {
        auto g = numerics::layer_norm_backward(row_of(local.x_in, i), gamma1,
                                               kLayerNormEps, row_of(dln1, i));
        for (std::size_t j = 0; j < cfg.d_model; ++j) {
          dx_in.at(i, j) += g.dinput[j];
          if (lg != nullptr) {
            lg->ln1_gamma.at(0, j) += g.dgamma[j];
            lg->ln1_beta.at(0, j) += g.dbeta[j];
          }
        }
      }
    }
    dx = std::move(dx_in);
  }
  return dx;  // dL/d(input embeddings)
}

}  // namespace detail

struct InputGradients {
  Matrix grad;                // n x d_model, rows aligned with input ids
  std::vector<double> norms;  // per-token L2 norm of the rows
};

namespace detail {

inline InputGradients input_gradients_impl(const ModelCheckpoint& m,
                                           const tokenizer::EncodedInput& input,
                                           int label, bool use_predicted,
                                           ForwardTrace* trace_out) {
  detail::ForwardCache cache;
  ForwardTrace trace = detail::forward_impl(m, embed(m, input), &cache);
  const int target = use_predicted ? trace.predicted : label;
  if (target < 0 || static_cast<std::size_t>(target) >= m.config.n_classes) {
    throw DomainError("input_gradients: label out of range");
  }
  auto dlogits = numerics::softmax_cross_entropy_grad(
      trace.probs, static_cast<std::size_t>(target));
  InputGradients out;
  out.grad = detail::backward_impl(m, cache, trace.cls_encoding, dlogits, nullptr);
  out.norms.resize(out.grad.rows);
  for (std::size_t i = 0; i < out.grad.rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < out.grad.cols; ++j) {
      acc += out.grad.at(i, j) * out.grad.at(i, j);
    }
    out.norms[i] = std::sqrt(acc);
  }
  if (trace_out != nullptr) *trace_out = std::move(trace);
  return out;
}

}  // namespace detail

// Gradient of cross_entropy(probs, label) with respect to the token+position
// embedding sum.
inline InputGradients input_gradients(const ModelCheckpoint& m,
                                      const tokenizer::EncodedInput& input,
                                      int label) {
  return detail::input_gradients_impl(m, input, label, false, nullptr);
}

// Same, but scored against the model's own prediction, which is how an input
// is scored at inference time when the true label is unknown. Also hands back
// the forward trace so callers do not pay for a second pass.
inline InputGradients input_gradients_predicted(const ModelCheckpoint& m,
                                                const tokenizer::EncodedInput& input,
                                                ForwardTrace* trace_out = nullptr) {
  return detail::input_gradients_impl(m, input, 0, true, trace_out);
}

// ---------------------------------------------------------------------------
// training

struct TrainExample {
  tokenizer::EncodedInput input;
  int label = 0;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t shuffle_seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct EpochStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  ModelCheckpoint model;
  std::vector<EpochStats> history;
};

// Adam over seeded-shuffled mini-batches; loss is the mean cross-entropy
// against the true labels. Passing an already-poisoned checkpoint plus clean
// data is the clean fine-tuning regime.
inline TrainResult train(const ModelCheckpoint& start,
                         const std::vector<TrainExample>& data,
                         const TrainConfig& tc) {
  if (data.empty()) throw InputError("train: empty dataset");
  for (const TrainExample& ex : data) {
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= start.config.n_classes) {
      throw DataError("train: label " + std::to_string(ex.label) +
                      " out of range for " + std::to_string(start.config.n_classes) +
                      " classes");
    }
  }
  if (tc.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");

  TrainResult result;
  result.model = start;

  std::vector<numerics::AdamState> states;
  std::vector<Matrix*> params;
  result.model.for_each_parameter([&](const std::string&, Matrix& p) {
    states.push_back(numerics::AdamState::for_param(p));
    params.push_back(&p);
  });
  numerics::AdamConfig adam{tc.lr, tc.beta1, tc.beta2, tc.eps};

  Rng shuffle_rng(tc.shuffle_seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t batch_start = 0; batch_start < order.size();
         batch_start += tc.batch_size) {
      const std::size_t batch_end = std::min(order.size(), batch_start + tc.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(batch_end - batch_start);
      ModelCheckpoint grads = ModelCheckpoint::zeros_like(result.model);

      for (std::size_t pos = batch_start; pos < batch_end; ++pos) {
        const TrainExample& ex = data[order[pos]];
        detail::ForwardCache cache;
        ForwardTrace trace = detail::forward_impl(result.model, embed(result.model, ex.input), &cache);
        loss_sum += numerics::cross_entropy(trace.probs, static_cast<std::size_t>(ex.label));
        if (trace.predicted == ex.label) ++correct;
        auto dlogits = numerics::softmax_cross_entropy_grad(
            trace.probs, static_cast<std::size_t>(ex.label));
        for (double& d : dlogits) d *= inv_batch;
        Matrix d_embed = detail::backward_impl(result.model, cache,
                                               trace.cls_encoding, dlogits, &grads);
        // scatter the input-embedding gradient into the two embedding tables
        for (std::size_t i = 0; i < ex.input.ids.size(); ++i) {
          const auto token_row = static_cast<std::size_t>(ex.input.ids[i]);
          for (std::size_t j = 0; j < d_embed.cols; ++j) {
            grads.token_embeddings.at(token_row, j) += d_embed.at(i, j);
            grads.position_embeddings.at(i, j) += d_embed.at(i, j);
          }
        }
      }

      ++step;
      // grads shares the visit order with the model
      std::vector<Matrix*> grad_ptrs;
      grads.for_each_parameter(
          [&](const std::string&, Matrix& g) { grad_ptrs.push_back(&g); });
      for (std::size_t i = 0; i < params.size(); ++i) {
        numerics::adam_step(*params[i], *grad_ptrs[i], states[i], step, adam);
      }
    }

    EpochStats stats;
    stats.mean_loss = loss_sum / static_cast<double>(data.size());
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    result.history.push_back(stats);
    log_debug("epoch " + std::to_string(epoch + 1) + " loss " +
              std::to_string(stats.mean_loss) + " acc " +
              std::to_string(stats.accuracy));
  }
  return result;
}

// ---------------------------------------------------------------------------
// checkpoint file: one JSON header line, then raw little-endian f64 matrices
// in the declared parameter order

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

inline void save_checkpoint(const ModelCheckpoint& m, const std::string& path) {
  nlohmann::json header;
  header["format"] = "trigger-scope-checkpoint";
  header["version"] = 1;
  header["config"] = {{"n_layers", m.config.n_layers},
                      {"n_heads", m.config.n_heads},
                      {"d_model", m.config.d_model},
                      {"d_ff", m.config.d_ff},
                      {"vocab_size", m.config.vocab_size},
                      {"max_len", m.config.max_len},
                      {"n_classes", m.config.n_classes},
                      {"seed", m.config.seed}};
  nlohmann::json manifest = nlohmann::json::array();
  m.for_each_parameter([&](const std::string& name, const Matrix& mat) {
    manifest.push_back({{"name", name}, {"rows", mat.rows}, {"cols", mat.cols}});
  });
  header["matrices"] = manifest;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw PathError("checkpoint: cannot write " + path);
  out << header.dump() << "\n";
  m.for_each_parameter([&](const std::string&, const Matrix& mat) {
    out.write(reinterpret_cast<const char*>(mat.data.data()),
              static_cast<std::streamsize>(mat.data.size() * sizeof(double)));
  });
  if (!out) throw PathError("checkpoint: write failed for " + path);
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("checkpoint: cannot read " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) {
    throw DataError("checkpoint: missing header in " + path);
  }
  nlohmann::json header = nlohmann::json::parse(header_line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "trigger-scope-checkpoint") {
    throw DataError("checkpoint: bad header in " + path);
  }
  if (header.value("version", 0) != 1) {
    throw DataError("checkpoint: unsupported version in " + path);
  }
  const auto& jc = header.at("config");
  ModelConfig config;
  config.n_layers = jc.at("n_layers").get<std::size_t>();
  config.n_heads = jc.at("n_heads").get<std::size_t>();
  config.d_model = jc.at("d_model").get<std::size_t>();
  config.d_ff = jc.at("d_ff").get<std::size_t>();
  config.vocab_size = jc.at("vocab_size").get<std::size_t>();
  config.max_len = jc.at("max_len").get<std::size_t>();
  config.n_classes = jc.at("n_classes").get<std::size_t>();
  config.seed = jc.at("seed").get<std::uint64_t>();
  config.validate();

  // Build a correctly-shaped checkpoint, then fill from the stream while
  // validating against the manifest.
  ModelCheckpoint m = init_model(config);
  const auto& manifest = header.at("matrices");
  std::size_t index = 0;
  m.for_each_parameter([&](const std::string& name, Matrix& mat) {
    if (index >= manifest.size()) {
      throw DataError("checkpoint: manifest shorter than parameter list");
    }
    const auto& entry = manifest[index];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("rows").get<std::size_t>() != mat.rows ||
        entry.at("cols").get<std::size_t>() != mat.cols) {
      throw DataError("checkpoint: manifest mismatch at parameter '" + name +
                      "' in " + path);
    }
    in.read(reinterpret_cast<char*>(mat.data.data()),
            static_cast<std::streamsize>(mat.data.size() * sizeof(double)));
    if (in.gcount() !=
        static_cast<std::streamsize>(mat.data.size() * sizeof(double))) {
      throw DataError("checkpoint: truncated data for parameter '" + name + "'");
    }
    numerics::require_finite(mat, "checkpoint parameter " + name);
    ++index;
  });
  if (index != manifest.size()) {
    throw DataError("checkpoint: manifest longer than parameter list");
  }
  return m;
}

}  // namespace trigger_scope::model
