#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "trigger_scope/errors.hpp"
#include "trigger_scope/matrix.hpp"

// Numeric kernels for the fixed encoder architecture, each paired with a
// hand-derived backward pass. There is no autodiff graph: every gradient in
// this project flows through the functions in this header.

namespace trigger_scope::numerics {

// ---------------------------------------------------------------------------
// softmax

// Row-wise softmax with max subtraction. Every output row sums to 1.
inline Matrix softmax_rows(const Matrix& m) {
  require_finite(m, "softmax_rows input");
  Matrix out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double row_max = m.at(i, 0);
    for (std::size_t j = 1; j < m.cols; ++j) {
      row_max = std::max(row_max, m.at(i, j));
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) {
      const double e = std::exp(m.at(i, j) - row_max);
      out.at(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < m.cols; ++j) out.at(i, j) /= denom;
  }
  return out;
}

// Gradient through softmax_rows. `probs` is the forward output.
// dscore_ij = p_ij * (dprob_ij - sum_k dprob_ik * p_ik)
inline Matrix softmax_rows_backward(const Matrix& probs, const Matrix& dprobs) {
  require_same_shape(probs, dprobs, "softmax_rows_backward");
  Matrix dscores(probs.rows, probs.cols);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < probs.cols; ++j) {
      dot += dprobs.at(i, j) * probs.at(i, j);
    }
    for (std::size_t j = 0; j < probs.cols; ++j) {
      dscores.at(i, j) = probs.at(i, j) * (dprobs.at(i, j) - dot);
    }
  }
  return dscores;
}

// ---------------------------------------------------------------------------
// layer norm (population variance)

inline std::vector<double> layer_norm(const std::vector<double>& v,
                                      const std::vector<double>& gamma,
                                      const std::vector<double>& beta,
                                      double epsilon) {
  if (v.size() != gamma.size() || v.size() != beta.size()) {
    throw ShapeError("layer_norm: lengths disagree (" +
                     std::to_string(v.size()) + ", " +
                     std::to_string(gamma.size()) + ", " +
                     std::to_string(beta.size()) + ")");
  }
  if (!(epsilon > 0.0)) {
    throw DomainError("layer_norm: epsilon must be positive");
  }
  const std::size_t n = v.size();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(n);
  const double inv_sigma = 1.0 / std::sqrt(var + epsilon);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (v[i] - mean) * inv_sigma * gamma[i] + beta[i];
  }
  return out;
}

struct LayerNormGrads {
  std::vector<double> dinput;
  std::vector<double> dgamma;
  std::vector<double> dbeta;
};

inline LayerNormGrads layer_norm_backward(const std::vector<double>& v,
                                          const std::vector<double>& gamma,
                                          double epsilon,
                                          const std::vector<double>& dout) {
  const std::size_t n = v.size();
  if (gamma.size() != n || dout.size() != n) {
    throw ShapeError("layer_norm_backward: lengths disagree");
  }
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(n);
  const double inv_sigma = 1.0 / std::sqrt(var + epsilon);

  // xhat_i = (v_i - mean) * inv_sigma; u_i = dout_i * gamma_i
  // dv_i = (u_i - mean(u) - xhat_i * mean(u .* xhat)) * inv_sigma
  std::vector<double> xhat(n), u(n);
  double u_mean = 0.0, ux_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (v[i] - mean) * inv_sigma;
    u[i] = dout[i] * gamma[i];
    u_mean += u[i];
    ux_mean += u[i] * xhat[i];
  }
  u_mean /= static_cast<double>(n);
  ux_mean /= static_cast<double>(n);

  LayerNormGrads g;
  g.dinput.resize(n);
  g.dgamma.resize(n);
  g.dbeta.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.dinput[i] = (u[i] - u_mean - xhat[i] * ux_mean) * inv_sigma;
    g.dgamma[i] = dout[i] * xhat[i];
    g.dbeta[i] = dout[i];
  }
  return g;
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))

namespace detail {
constexpr double kGeluCubic = 0.044715;
inline double gelu_tanh_coeff() { return std::sqrt(2.0 / 3.14159265358979323846); }
}  // namespace detail

inline double gelu(double x) {
  const double c = detail::gelu_tanh_coeff();
  return 0.5 * x * (1.0 + std::tanh(c * (x + detail::kGeluCubic * x * x * x)));
}

inline double gelu_derivative(double x) {
  const double c = detail::gelu_tanh_coeff();
  const double t = std::tanh(c * (x + detail::kGeluCubic * x * x * x));
  const double inner_d = c * (1.0 + 3.0 * detail::kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner_d;
}

inline Matrix gelu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data) v = gelu(v);
  return out;
}

// `pre` is the forward input (pre-activation).
inline Matrix gelu_backward(const Matrix& pre, const Matrix& dout) {
  require_same_shape(pre, dout, "gelu_backward");
  Matrix din(pre.rows, pre.cols);
  for (std::size_t i = 0; i < pre.data.size(); ++i) {
    din.data[i] = dout.data[i] * gelu_derivative(pre.data[i]);
  }
  return din;
}

// ---------------------------------------------------------------------------
// cross entropy

// -ln(probs[label]) with the probability clamped at 1e-12 so saturated
// predictions stay finite.
inline double cross_entropy(const std::vector<double>& probs, std::size_t label) {
  if (label >= probs.size()) {
    throw DomainError("cross_entropy: label " + std::to_string(label) +
                      " out of range for " + std::to_string(probs.size()) +
                      " classes");
  }
  double sum = 0.0;
  for (double p : probs) sum += p;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw DomainError("cross_entropy: probabilities sum to " +
                      std::to_string(sum) + ", expected 1");
  }
  return -std::log(std::max(probs[label], 1e-12));
}

// Gradient of cross_entropy(softmax(logits), label) with respect to logits:
// p - onehot(label). The label entry is computed as minus the sum of the
// other probabilities, which is the same value but does not cancel to zero
// when p[label] rounds to 1 on saturated predictions.
inline std::vector<double> softmax_cross_entropy_grad(
    const std::vector<double>& probs, std::size_t label) {
  if (label >= probs.size()) {
    throw DomainError("softmax_cross_entropy_grad: label out of range");
  }
  std::vector<double> dlogits = probs;
  double others = 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    if (c != label) others += probs[c];
  }
  dlogits[label] = -others;
  return dlogits;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  Matrix m;  // first moment
  Matrix v;  // second moment

  static AdamState for_param(const Matrix& param) {
    AdamState s;
    s.m = Matrix::zeros(param.rows, param.cols);
    s.v = Matrix::zeros(param.rows, param.cols);
    return s;
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update, in place. `t` is the 1-based step count.
inline void adam_step(Matrix& param, const Matrix& grad, AdamState& state,
                      std::size_t t, const AdamConfig& cfg) {
  require_same_shape(param, grad, "adam_step");
  require_same_shape(param, state.m, "adam_step state.m");
  require_same_shape(param, state.v, "adam_step state.v");
  if (t < 1) throw DomainError("adam_step: t must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const double g = grad.data[i];
    state.m.data[i] = cfg.beta1 * state.m.data[i] + (1.0 - cfg.beta1) * g;
    state.v.data[i] = cfg.beta2 * state.v.data[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m.data[i] / bc1;
    const double v_hat = state.v.data[i] / bc2;
    param.data[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t parameter_count = 0;
};

// Central-difference check of `analytic` against f at `theta`, probing the
// given coordinates (all of them when `coords` is empty). Relative error uses
// max(|analytic|, |numeric|, 1e-8) as the denominator.
inline GradCheckResult finite_difference_check(
    const std::function<double(const Matrix&)>& f, const Matrix& theta,
    const Matrix& analytic, double h,
    std::span<const std::size_t> coords = {}) {
  if (!(h > 0.0)) throw DomainError("finite_difference_check: h must be > 0");
  require_same_shape(theta, analytic, "finite_difference_check");

  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(theta.data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }

  GradCheckResult result;
  Matrix probe = theta;
  for (std::size_t c : coords) {
    if (c >= theta.data.size()) {
      throw DomainError("finite_difference_check: coordinate out of range");
    }
    const double saved = probe.data[c];
    probe.data[c] = saved + h;
    const double f_plus = f(probe);
    probe.data[c] = saved - h;
    const double f_minus = f(probe);
    probe.data[c] = saved;
    if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
      throw NumericError("finite_difference_check: non-finite f");
    }
    const double numeric = (f_plus - f_minus) / (2.0 * h);
    const double a = analytic.data[c];
    const double rel = std::abs(a - numeric) /
                       std::max({std::abs(a), std::abs(numeric), 1e-8});
    result.max_relative_error = std::max(result.max_relative_error, rel);
    ++result.parameter_count;
  }
  return result;
}

}  // namespace trigger_scope::numerics
