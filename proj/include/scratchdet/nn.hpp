#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "scratchdet/tensor.hpp"

namespace scratchdet {

// A trainable parameter with its gradient and SGD momentum buffer.
struct ParamTensor {
  Tensor value;
  Tensor grad;
  Tensor momentum_buf;
  std::string name;

  ParamTensor() = default;
  ParamTensor(std::string n, Tensor v)
      : value(std::move(v)), name(std::move(n)) {
    grad = zeros_like(value);
    momentum_buf = zeros_like(value);
  }
};

enum class BnMode { train, inference };

struct BatchNormState {
  std::vector<double> gamma, beta;
  std::vector<double> running_mean, running_var;
  double eps = 1e-5;
  double stats_momentum = 0.1;
  BnMode mode = BnMode::train;
  // gradients for gamma/beta, filled by batchnorm_backward via caller
  std::vector<double> grad_gamma, grad_beta;

  BatchNormState() : BatchNormState(0) {}
  explicit BatchNormState(int channels, double eps_ = 1e-5,
                          double momentum_ = 0.1)
      : gamma(channels, 1.0),
        beta(channels, 0.0),
        running_mean(channels, 0.0),
        running_var(channels, 1.0),
        eps(eps_),
        stats_momentum(momentum_),
        grad_gamma(channels, 0.0),
        grad_beta(channels, 0.0) {}

  int channels() const { return static_cast<int>(gamma.size()); }
};

struct BnCache {
  bool train_mode = false;
  Tensor xhat;                   // normalized input
  std::vector<double> inv_std;   // per channel
  std::vector<double> gamma;     // snapshot used in forward
  int N = 0, C = 0, H = 0, W = 0;
};

// Train mode: normalize by per-channel batch mean / biased variance, apply
// affine, update running stats as running <- (1-m)*running + m*batch.
// Inference mode: normalize by running stats, no update.
inline Tensor batchnorm_forward(const Tensor& x, BatchNormState& state,
                                BnCache& cache) {
  int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (C != state.channels())
    throw DimensionError("batchnorm: input C=" + std::to_string(C) +
                         " != state channels " +
                         std::to_string(state.channels()));
  int64_t m = static_cast<int64_t>(N) * H * W;
  bool train = state.mode == BnMode::train;
  if (train && m < 2)
    throw ContractError("batchnorm: train mode needs N*H*W >= 2");

  cache.train_mode = train;
  cache.N = N;
  cache.C = C;
  cache.H = H;
  cache.W = W;
  cache.gamma = state.gamma;
  cache.inv_std.assign(static_cast<size_t>(C), 0.0);
  cache.xhat = Tensor(x.shape);

  Tensor y(x.shape);
  int64_t plane = static_cast<int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    double mean, var;
    if (train) {
      double s = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.data.data() + (static_cast<int64_t>(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) s += p[i];
      }
      mean = s / static_cast<double>(m);
      double ss = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.data.data() + (static_cast<int64_t>(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          double d = p[i] - mean;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(m);  // biased
      double mm = state.stats_momentum;
      state.running_mean[c] = (1.0 - mm) * state.running_mean[c] + mm * mean;
      state.running_var[c] = (1.0 - mm) * state.running_var[c] + mm * var;
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    double inv = 1.0 / std::sqrt(var + state.eps);
    cache.inv_std[static_cast<size_t>(c)] = inv;
    double g = state.gamma[c], b = state.beta[c];
    for (int n = 0; n < N; ++n) {
      int64_t off = (static_cast<int64_t>(n) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        double xh = (x.data[static_cast<size_t>(off + i)] - mean) * inv;
        cache.xhat.data[static_cast<size_t>(off + i)] = xh;
        y.data[static_cast<size_t>(off + i)] = g * xh + b;
      }
    }
  }
  return y;
}

struct BnGrads {
  Tensor grad_x;
  std::vector<double> grad_gamma, grad_beta;
};

// Exact gradient of the train-mode forward, including the dependence of the
// batch mean and variance on x.
inline BnGrads batchnorm_backward(const Tensor& grad_y, const BnCache& cache) {
  if (!cache.train_mode)
    throw ContractError("batchnorm_backward: cache is from inference mode");
  int N = cache.N, C = cache.C, H = cache.H, W = cache.W;
  if (grad_y.shape != std::vector<int>{N, C, H, W})
    throw DimensionError("batchnorm_backward: grad_y shape mismatch");
  int64_t plane = static_cast<int64_t>(H) * W;
  double m = static_cast<double>(static_cast<int64_t>(N) * plane);

  BnGrads g;
  g.grad_x = Tensor(grad_y.shape);
  g.grad_gamma.assign(static_cast<size_t>(C), 0.0);
  g.grad_beta.assign(static_cast<size_t>(C), 0.0);

  for (int c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < N; ++n) {
      int64_t off = (static_cast<int64_t>(n) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        double dy = grad_y.data[static_cast<size_t>(off + i)];
        sum_dy += dy;
        sum_dy_xhat += dy * cache.xhat.data[static_cast<size_t>(off + i)];
      }
    }
    g.grad_beta[static_cast<size_t>(c)] = sum_dy;
    g.grad_gamma[static_cast<size_t>(c)] = sum_dy_xhat;
    double gamma = cache.gamma[static_cast<size_t>(c)];
    double inv = cache.inv_std[static_cast<size_t>(c)];
    for (int n = 0; n < N; ++n) {
      int64_t off = (static_cast<int64_t>(n) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        double dy = grad_y.data[static_cast<size_t>(off + i)];
        double xh = cache.xhat.data[static_cast<size_t>(off + i)];
        g.grad_x.data[static_cast<size_t>(off + i)] =
            gamma * inv / m * (m * dy - sum_dy - xh * sum_dy_xhat);
      }
    }
  }
  return g;
}

inline Tensor relu(const Tensor& x) {
  Tensor y(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i)
    y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
  return y;
}

// Subgradient 0 at x == 0.
inline Tensor relu_backward(const Tensor& grad_y, const Tensor& x) {
  if (!grad_y.same_shape(x))
    throw DimensionError("relu_backward: shape mismatch");
  Tensor g(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i)
    g.data[i] = x.data[i] > 0.0 ? grad_y.data[i] : 0.0;
  return g;
}

struct SmoothL1Result {
  double loss = 0.0;
  Tensor grad_pred;
};

// Per element: 0.5 d^2 if |d|<1 else |d|-0.5, summed over all elements.
inline SmoothL1Result smooth_l1(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target))
    throw DimensionError("smooth_l1: pred " + pred.shape_str() +
                         " vs target " + target.shape_str());
  SmoothL1Result r;
  r.grad_pred = Tensor(pred.shape);
  for (size_t i = 0; i < pred.data.size(); ++i) {
    double d = pred.data[i] - target.data[i];
    if (std::abs(d) < 1.0) {
      r.loss += 0.5 * d * d;
      r.grad_pred.data[i] = d;
    } else {
      r.loss += std::abs(d) - 0.5;
      r.grad_pred.data[i] = d > 0.0 ? 1.0 : -1.0;
    }
  }
  return r;
}

struct SoftmaxCeResult {
  std::vector<double> loss;  // per row
  Tensor grad_logits;        // p - onehot
  Tensor probs;
};

// Numerically stabilized (max-subtracted) softmax cross entropy over rows of
// an (A,K) logit matrix.
inline SoftmaxCeResult softmax_cross_entropy(const Tensor& logits,
                                             const std::vector<int>& labels) {
  if (logits.shape.size() != 2)
    throw DimensionError("softmax_cross_entropy: logits must be 2-D");
  int A = logits.shape[0], K = logits.shape[1];
  if (K < 2) throw DimensionError("softmax_cross_entropy: K must be >= 2");
  if (static_cast<int>(labels.size()) != A)
    throw DimensionError("softmax_cross_entropy: labels length mismatch");
  SoftmaxCeResult r;
  r.loss.assign(static_cast<size_t>(A), 0.0);
  r.grad_logits = Tensor(logits.shape);
  r.probs = Tensor(logits.shape);
  for (int a = 0; a < A; ++a) {
    int lbl = labels[static_cast<size_t>(a)];
    if (lbl < 0 || lbl >= K)
      throw ContractError("softmax_cross_entropy: label " +
                          std::to_string(lbl) + " out of range [0," +
                          std::to_string(K) + ")");
    const double* row = logits.data.data() + static_cast<int64_t>(a) * K;
    double mx = row[0];
    for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < K; ++j) z += std::exp(row[j] - mx);
    double logz = std::log(z) + mx;
    r.loss[static_cast<size_t>(a)] = logz - row[lbl];
    for (int j = 0; j < K; ++j) {
      double p = std::exp(row[j] - logz);
      r.probs.data[static_cast<size_t>(a * K + j)] = p;
      r.grad_logits.data[static_cast<size_t>(a * K + j)] =
          p - (j == lbl ? 1.0 : 0.0);
    }
  }
  return r;
}

// Caffe-style SGD: v <- momentum*v + lr*(grad + weight_decay*value);
// value <- value - v. Grads are zeroed afterwards.
inline void sgd_step(std::vector<ParamTensor*>& params, double lr,
                     double momentum, double weight_decay) {
  if (!std::isfinite(lr)) throw ContractError("sgd_step: non-finite lr");
  for (ParamTensor* p : params) {
    for (size_t i = 0; i < p->value.data.size(); ++i) {
      double g = p->grad.data[i] + weight_decay * p->value.data[i];
      double v = momentum * p->momentum_buf.data[i] + lr * g;
      p->momentum_buf.data[i] = v;
      p->value.data[i] -= v;
      p->grad.data[i] = 0.0;
    }
  }
}

}  // namespace scratchdet
