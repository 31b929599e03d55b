#pragma once

#include <vector>

#include "scratchdet/backbone.hpp"
#include "scratchdet/nn.hpp"

namespace scratchdet {

// Ordered feature maps from the detection taps of one forward pass.
struct FeaturePyramid {
  std::vector<Tensor> maps;
  std::vector<int> sizes;
  std::vector<int> channels;
};

struct NetworkCache {
  std::vector<Tensor> nodes;                   // node 0 = input
  std::vector<BnCache> bn;                     // per layer (BN layers only)
  std::vector<std::vector<int64_t>> argmax;    // per layer (pool layers only)
};

// An instantiated NetworkSpec: weights, BN state, forward/backward.
class Network {
 public:
  Network() = default;

  Network(NetworkSpec spec, SeededRng rng) : spec_(std::move(spec)) {
    size_t nl = spec_.layers.size();
    weight_.resize(nl);
    bias_.resize(nl);
    bn_.resize(nl);
    gamma_.resize(nl);
    beta_.resize(nl);
    uint64_t key = 0;
    for (size_t i = 0; i < nl; ++i) {
      const auto& l = spec_.layers[i];
      if (l.kind == LayerDesc::Kind::Conv) {
        SeededRng r = rng.split(key++);
        weight_[i] = ParamTensor(
            l.name + ".w",
            xavier_init({l.out_ch, l.in_ch, l.kernel, l.kernel}, r));
        if (l.bias) bias_[i] = ParamTensor(l.name + ".b", Tensor({l.out_ch}));
      } else if (l.kind == LayerDesc::Kind::BatchNorm) {
        bn_[i] = BatchNormState(l.in_ch);
        Tensor g({l.in_ch});
        g.fill(1.0);
        gamma_[i] = ParamTensor(l.name + ".gamma", std::move(g));
        beta_[i] = ParamTensor(l.name + ".beta", Tensor({l.in_ch}));
      }
    }
  }

  const NetworkSpec& spec() const { return spec_; }

  void set_mode(BnMode mode) {
    for (size_t i = 0; i < spec_.layers.size(); ++i)
      if (spec_.layers[i].kind == LayerDesc::Kind::BatchNorm)
        bn_[i].mode = mode;
  }

  FeaturePyramid forward(const Tensor& batch, NetworkCache* cache) {
    if (batch.shape.size() != 4 || batch.shape[1] != spec_.input_channels ||
        batch.shape[2] != spec_.input_size || batch.shape[3] != spec_.input_size)
      throw DimensionError("network: input " + batch.shape_str() +
                           " does not match spec input " +
                           std::to_string(spec_.input_size));
    NetworkCache local;
    NetworkCache& c = cache ? *cache : local;
    c.nodes.assign(static_cast<size_t>(spec_.num_nodes()), Tensor{});
    c.bn.assign(spec_.layers.size(), BnCache{});
    c.argmax.assign(spec_.layers.size(), {});
    c.nodes[0] = batch;
    for (size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& l = spec_.layers[i];
      const Tensor& in = c.nodes[static_cast<size_t>(l.input)];
      Tensor out;
      switch (l.kind) {
        case LayerDesc::Kind::Conv:
          out = conv2d_forward(in, weight_[i].value,
                               l.bias ? bias_[i].value.data
                                      : std::vector<double>{},
                               l.stride, l.pad);
          break;
        case LayerDesc::Kind::BatchNorm:
          bn_[i].gamma = gamma_[i].value.data;
          bn_[i].beta = beta_[i].value.data;
          out = batchnorm_forward(in, bn_[i], c.bn[i]);
          break;
        case LayerDesc::Kind::ReLU:
          out = relu(in);
          break;
        case LayerDesc::Kind::MaxPool: {
          MaxPoolResult r = maxpool2d(in, l.kernel, l.stride);
          out = std::move(r.output);
          c.argmax[i] = std::move(r.argmax);
          break;
        }
        case LayerDesc::Kind::Add: {
          const Tensor& in2 = c.nodes[static_cast<size_t>(l.input2)];
          out = in;
          for (size_t k = 0; k < out.data.size(); ++k)
            out.data[k] += in2.data[k];
          break;
        }
      }
      c.nodes[i + 1] = std::move(out);
    }
    FeaturePyramid p;
    for (size_t t = 0; t < spec_.detection_taps.size(); ++t) {
      const Tensor& m = c.nodes[static_cast<size_t>(spec_.detection_taps[t])];
      p.maps.push_back(m);
      p.channels.push_back(m.shape[1]);
      p.sizes.push_back(m.shape[2]);
    }
    return p;
  }

  // Accumulates parameter gradients from per-tap output gradients; returns
  // the gradient with respect to the network input.
  Tensor backward(const NetworkCache& c, const std::vector<Tensor>& tap_grads) {
    if (tap_grads.size() != spec_.detection_taps.size())
      throw DimensionError("network backward: tap grad count mismatch");
    std::vector<Tensor> node_grads(static_cast<size_t>(spec_.num_nodes()));
    for (size_t n = 0; n < node_grads.size(); ++n)
      node_grads[n] = zeros_like(c.nodes[n]);
    for (size_t t = 0; t < tap_grads.size(); ++t) {
      Tensor& g = node_grads[static_cast<size_t>(spec_.detection_taps[t])];
      if (!g.same_shape(tap_grads[t]))
        throw DimensionError("network backward: tap grad shape mismatch");
      for (size_t k = 0; k < g.data.size(); ++k) g.data[k] += tap_grads[t].data[k];
    }
    for (size_t ii = spec_.layers.size(); ii-- > 0;) {
      const auto& l = spec_.layers[ii];
      const Tensor& gout = node_grads[ii + 1];
      Tensor& gin = node_grads[static_cast<size_t>(l.input)];
      switch (l.kind) {
        case LayerDesc::Kind::Conv: {
          ConvGrads g = conv2d_backward(gout, c.nodes[static_cast<size_t>(l.input)],
                                        weight_[ii].value, l.stride, l.pad);
          for (size_t k = 0; k < gin.data.size(); ++k)
            gin.data[k] += g.grad_input.data[k];
          for (size_t k = 0; k < weight_[ii].grad.data.size(); ++k)
            weight_[ii].grad.data[k] += g.grad_weight.data[k];
          if (l.bias)
            for (size_t k = 0; k < bias_[ii].grad.data.size(); ++k)
              bias_[ii].grad.data[k] += g.grad_bias[k];
          break;
        }
        case LayerDesc::Kind::BatchNorm: {
          BnGrads g = batchnorm_backward(gout, c.bn[ii]);
          for (size_t k = 0; k < gin.data.size(); ++k)
            gin.data[k] += g.grad_x.data[k];
          for (size_t k = 0; k < gamma_[ii].grad.data.size(); ++k) {
            gamma_[ii].grad.data[k] += g.grad_gamma[k];
            beta_[ii].grad.data[k] += g.grad_beta[k];
          }
          break;
        }
        case LayerDesc::Kind::ReLU: {
          Tensor g = relu_backward(gout, c.nodes[static_cast<size_t>(l.input)]);
          for (size_t k = 0; k < gin.data.size(); ++k) gin.data[k] += g.data[k];
          break;
        }
        case LayerDesc::Kind::MaxPool: {
          Tensor g = maxpool2d_backward(gout, c.argmax[ii],
                                        c.nodes[static_cast<size_t>(l.input)].shape);
          for (size_t k = 0; k < gin.data.size(); ++k) gin.data[k] += g.data[k];
          break;
        }
        case LayerDesc::Kind::Add: {
          Tensor& gin2 = node_grads[static_cast<size_t>(l.input2)];
          for (size_t k = 0; k < gin.data.size(); ++k) gin.data[k] += gout.data[k];
          for (size_t k = 0; k < gin2.data.size(); ++k) gin2.data[k] += gout.data[k];
          break;
        }
      }
    }
    return std::move(node_grads[0]);
  }

  std::vector<ParamTensor*> params() {
    std::vector<ParamTensor*> out;
    for (size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& l = spec_.layers[i];
      if (l.kind == LayerDesc::Kind::Conv) {
        out.push_back(&weight_[i]);
        if (l.bias) out.push_back(&bias_[i]);
      } else if (l.kind == LayerDesc::Kind::BatchNorm) {
        out.push_back(&gamma_[i]);
        out.push_back(&beta_[i]);
      }
    }
    return out;
  }

  // BN running statistics, exposed for checkpointing.
  struct RunningStat {
    std::string name;
    std::vector<double>* data;
  };
  std::vector<RunningStat> running_stats() {
    std::vector<RunningStat> out;
    for (size_t i = 0; i < spec_.layers.size(); ++i)
      if (spec_.layers[i].kind == LayerDesc::Kind::BatchNorm) {
        out.push_back({spec_.layers[i].name + ".running_mean",
                       &bn_[i].running_mean});
        out.push_back({spec_.layers[i].name + ".running_var",
                       &bn_[i].running_var});
      }
    return out;
  }

 private:
  NetworkSpec spec_;
  std::vector<ParamTensor> weight_, bias_;
  std::vector<BatchNormState> bn_;
  std::vector<ParamTensor> gamma_, beta_;
};

// Convenience wrapper matching the builder + forward contract.
inline FeaturePyramid forward_pyramid(Network& net, const Tensor& batch,
                                      BnMode mode, NetworkCache* cache) {
  net.set_mode(mode);
  return net.forward(batch, cache);
}

}  // namespace scratchdet
