#pragma once

#include <cblas.h>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scratchdet/error.hpp"

namespace scratchdet {

// Dense row-major tensor of doubles, up to 4 dimensions.
// Activations use (N,C,H,W); conv weights use (O,I,Kh,Kw).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<size_t>(numel_of(shape)) != data.size())
      throw DimensionError("Tensor: shape/data size mismatch");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw DimensionError("Tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(size_t i) const { return shape[i]; }

  // index(n,c,h,w) = ((n*C + c)*H + h)*W + w
  double& at(int n, int c, int h, int w) {
    return data[static_cast<size_t>(
        ((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] +
        w)];
  }
  double at(int n, int c, int h, int w) const {
    return data[static_cast<size_t>(
        ((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] +
        w)];
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i)
      os << shape[i] << (i + 1 < shape.size() ? "," : "");
    os << ")";
    return os.str();
  }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

// Deterministic splittable RNG built on SplitMix64 (Steele et al.).
// Identical seed yields an identical stream on every platform; split(key)
// derives an independent deterministic stream without consuming state.
struct SeededRng {
  uint64_t state;

  explicit SeededRng(uint64_t seed) : state(seed) {}

  static uint64_t mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint64_t next_u64() {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  // Deterministic child stream keyed by (current state, key).
  SeededRng split(uint64_t key) const {
    return SeededRng(mix(state ^ mix(key)));
  }
};

namespace detail {

// col layout: rows = C*Kh*Kw, cols = Ho*Wo, row-major.
inline void im2col(const double* img, int C, int H, int W, int k, int stride,
                   int pad, int Ho, int Wo, double* col) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        double* row = col + (static_cast<int64_t>(c) * k * k + kh * k + kw) *
                                (static_cast<int64_t>(Ho) * Wo);
        for (int ho = 0; ho < Ho; ++ho) {
          int h = ho * stride + kh - pad;
          if (h < 0 || h >= H) {
            for (int wo = 0; wo < Wo; ++wo) row[ho * Wo + wo] = 0.0;
            continue;
          }
          const double* src = img + (static_cast<int64_t>(c) * H + h) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            int w = wo * stride + kw - pad;
            row[ho * Wo + wo] = (w < 0 || w >= W) ? 0.0 : src[w];
          }
        }
      }
    }
  }
}

inline void col2im_accum(const double* col, int C, int H, int W, int k,
                         int stride, int pad, int Ho, int Wo, double* img) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const double* row = col + (static_cast<int64_t>(c) * k * k + kh * k +
                                   kw) *
                                      (static_cast<int64_t>(Ho) * Wo);
        for (int ho = 0; ho < Ho; ++ho) {
          int h = ho * stride + kh - pad;
          if (h < 0 || h >= H) continue;
          double* dst = img + (static_cast<int64_t>(c) * H + h) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            int w = wo * stride + kw - pad;
            if (w >= 0 && w < W) dst[w] += row[ho * Wo + wo];
          }
        }
      }
    }
  }
}

}  // namespace detail

inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation convention (no kernel flip), zero padding.
// input (N,C,H,W), weight (O,I,Kh,Kw) with Kh==Kw, bias length O (empty for
// no bias). Output (N,O,H',W') with H' = floor((H+2p-k)/s)+1.
inline Tensor conv2d_forward(const Tensor& input, const Tensor& weight,
                             const std::vector<double>& bias, int stride,
                             int pad) {
  if (input.shape.size() != 4 || weight.shape.size() != 4)
    throw DimensionError("conv2d: input and weight must be 4-D");
  int N = input.shape[0], C = input.shape[1], H = input.shape[2],
      W = input.shape[3];
  int O = weight.shape[0], I = weight.shape[1], k = weight.shape[2];
  if (weight.shape[2] != weight.shape[3])
    throw DimensionError("conv2d: non-square kernel " + weight.shape_str());
  if (C != I)
    throw DimensionError("conv2d: input channel axis C=" + std::to_string(C) +
                         " != weight input axis I=" + std::to_string(I));
  if (!bias.empty() && static_cast<int>(bias.size()) != O)
    throw DimensionError("conv2d: bias length " + std::to_string(bias.size()) +
                         " != output channels O=" + std::to_string(O));
  if (H + 2 * pad < k || W + 2 * pad < k)
    throw DimensionError("conv2d: kernel k=" + std::to_string(k) +
                         " exceeds padded input " + input.shape_str());
  int Ho = conv_out_size(H, k, stride, pad);
  int Wo = conv_out_size(W, k, stride, pad);
  Tensor out({N, O, Ho, Wo});

  int64_t ckk = static_cast<int64_t>(C) * k * k;
  int64_t hw = static_cast<int64_t>(Ho) * Wo;
  std::vector<double> col(static_cast<size_t>(ckk * hw));
  for (int n = 0; n < N; ++n) {
    const double* img = input.data.data() + static_cast<int64_t>(n) * C * H * W;
    detail::im2col(img, C, H, W, k, stride, pad, Ho, Wo, col.data());
    double* dst = out.data.data() + static_cast<int64_t>(n) * O * hw;
    // out[n] = weight(O x CKK) * col(CKK x HW)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, O,
                static_cast<int>(hw), static_cast<int>(ckk), 1.0,
                weight.data.data(), static_cast<int>(ckk), col.data(),
                static_cast<int>(hw), 0.0, dst, static_cast<int>(hw));
    if (!bias.empty()) {
      for (int o = 0; o < O; ++o) {
        double b = bias[o];
        double* p = dst + o * hw;
        for (int64_t i = 0; i < hw; ++i) p[i] += b;
      }
    }
  }
  return out;
}

struct ConvGrads {
  Tensor grad_input;
  Tensor grad_weight;
  std::vector<double> grad_bias;
};

// Exact adjoint of conv2d_forward.
inline ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input,
                                 const Tensor& weight, int stride, int pad) {
  int N = input.shape[0], C = input.shape[1], H = input.shape[2],
      W = input.shape[3];
  int O = weight.shape[0], k = weight.shape[2];
  int Ho = conv_out_size(H, k, stride, pad);
  int Wo = conv_out_size(W, k, stride, pad);
  if (grad_out.shape != std::vector<int>{N, O, Ho, Wo})
    throw DimensionError("conv2d_backward: grad_out " + grad_out.shape_str() +
                         " does not match forward output shape");

  ConvGrads g;
  g.grad_input = Tensor({N, C, H, W});
  g.grad_weight = Tensor(weight.shape);
  g.grad_bias.assign(static_cast<size_t>(O), 0.0);

  int64_t ckk = static_cast<int64_t>(C) * k * k;
  int64_t hw = static_cast<int64_t>(Ho) * Wo;
  std::vector<double> col(static_cast<size_t>(ckk * hw));
  std::vector<double> gcol(static_cast<size_t>(ckk * hw));
  for (int n = 0; n < N; ++n) {
    const double* img = input.data.data() + static_cast<int64_t>(n) * C * H * W;
    const double* go = grad_out.data.data() + static_cast<int64_t>(n) * O * hw;
    detail::im2col(img, C, H, W, k, stride, pad, Ho, Wo, col.data());
    // grad_weight += go(O x HW) * col^T(HW x CKK)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, O,
                static_cast<int>(ckk), static_cast<int>(hw), 1.0, go,
                static_cast<int>(hw), col.data(), static_cast<int>(hw), 1.0,
                g.grad_weight.data.data(), static_cast<int>(ckk));
    // gcol = weight^T(CKK x O) * go(O x HW)
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans,
                static_cast<int>(ckk), static_cast<int>(hw), O, 1.0,
                weight.data.data(), static_cast<int>(ckk), go,
                static_cast<int>(hw), 0.0, gcol.data(), static_cast<int>(hw));
    detail::col2im_accum(gcol.data(), C, H, W, k, stride, pad, Ho, Wo,
                         g.grad_input.data.data() +
                             static_cast<int64_t>(n) * C * H * W);
    for (int o = 0; o < O; ++o) {
      double s = 0.0;
      const double* p = go + o * hw;
      for (int64_t i = 0; i < hw; ++i) s += p[i];
      g.grad_bias[static_cast<size_t>(o)] += s;
    }
  }
  return g;
}

struct MaxPoolResult {
  Tensor output;
  std::vector<int64_t> argmax;  // flat index into the input, per output element
};

// Max pooling, no padding. Ties broken by lowest flat input index.
inline MaxPoolResult maxpool2d(const Tensor& input, int k, int stride) {
  int N = input.shape[0], C = input.shape[1], H = input.shape[2],
      W = input.shape[3];
  if (H < k || W < k)
    throw DimensionError("maxpool2d: window k=" + std::to_string(k) +
                         " larger than input " + input.shape_str());
  int Ho = (H - k) / stride + 1;
  int Wo = (W - k) / stride + 1;
  MaxPoolResult r;
  r.output = Tensor({N, C, Ho, Wo});
  r.argmax.resize(static_cast<size_t>(r.output.numel()));
  int64_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* plane =
          input.data.data() + (static_cast<int64_t>(n) * C + c) * H * W;
      int64_t plane_off = (static_cast<int64_t>(n) * C + c) * H * W;
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo) {
          int h0 = ho * stride, w0 = wo * stride;
          double best = plane[h0 * W + w0];
          int64_t best_idx = h0 * W + w0;
          for (int dh = 0; dh < k; ++dh)
            for (int dw = 0; dw < k; ++dw) {
              int64_t idx = static_cast<int64_t>(h0 + dh) * W + (w0 + dw);
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = idx;
              }
            }
          r.output.data[static_cast<size_t>(oi)] = best;
          r.argmax[static_cast<size_t>(oi)] = plane_off + best_idx;
          ++oi;
        }
    }
  return r;
}

inline Tensor maxpool2d_backward(const Tensor& grad_out,
                                 const std::vector<int64_t>& argmax,
                                 const std::vector<int>& input_shape) {
  Tensor grad_in(input_shape);
  for (size_t i = 0; i < argmax.size(); ++i)
    grad_in.data[static_cast<size_t>(argmax[i])] += grad_out.data[i];
  return grad_in;
}

// Xavier/Glorot uniform on [-a, a], a = sqrt(6/(fan_in+fan_out)).
// For (O,I,Kh,Kw): fan_in = I*Kh*Kw, fan_out = O*Kh*Kw. For (O,I): I and O.
inline Tensor xavier_init(const std::vector<int>& shape, SeededRng& rng) {
  if (shape.empty()) throw DimensionError("xavier_init: empty shape");
  for (int d : shape)
    if (d <= 0) throw DimensionError("xavier_init: non-positive dimension");
  double fan_in, fan_out;
  if (shape.size() == 4) {
    fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
    fan_out = static_cast<double>(shape[0]) * shape[2] * shape[3];
  } else if (shape.size() == 2) {
    fan_in = shape[1];
    fan_out = shape[0];
  } else {
    fan_in = fan_out = static_cast<double>(shape[0]);
  }
  double a = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t(shape);
  for (auto& v : t.data) v = rng.uniform(-a, a);
  return t;
}

// sqrt of the sum of squares of every element across all tensors.
// Empty list returns 0 by convention.
inline double global_grad_l2_norm(const std::vector<const Tensor*>& grads) {
  double ss = 0.0;
  for (const Tensor* g : grads)
    for (double v : g->data) ss += v * v;
  return std::sqrt(ss);
}

}  // namespace scratchdet
