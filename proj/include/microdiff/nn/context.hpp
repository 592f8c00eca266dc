#pragma once

// Behavior-curve and topology encoders, embedding summation and
// training-time context dropping.

#include <optional>
#include <random>

#include <torch/torch.h>

#include "microdiff/errors.hpp"
#include "microdiff/mnist_data.hpp"
#include "microdiff/nn/denoiser.hpp"

namespace microdiff::nn {

// 13 -> dense(128, SiLU) -> dense(128).
struct CurveEncoderImpl : torch::nn::Module {
  CurveEncoderImpl()
      : dense1(register_module("dense1", torch::nn::Linear(kCurvePoints, kEmbeddingWidth))),
        dense2(register_module("dense2", torch::nn::Linear(kEmbeddingWidth, kEmbeddingWidth))) {
    glorot_init(*this);
  }

  torch::Tensor forward(const torch::Tensor& psi) {
    if (psi.dim() != 2 || psi.size(1) != kCurvePoints)
      throw ContractError("curve context must be [B, 13]");
    return dense2(torch::silu(dense1(psi)));
  }

  torch::nn::Linear dense1, dense2;
};
TORCH_MODULE(CurveEncoder);

// Two conv(16, 3x3) + ReLU + maxpool stages, then 784 -> 128 -> 128 -> 128
// with ReLU on the first two dense layers and a linear last layer.
struct TopologyEncoderImpl : torch::nn::Module {
  static constexpr int kFlatten = 16 * 7 * 7;

  TopologyEncoderImpl()
      : conv1(register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 16, 3).padding(1)))),
        conv2(register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 16, 3).padding(1)))),
        dense1(register_module("dense1", torch::nn::Linear(kFlatten, kEmbeddingWidth))),
        dense2(register_module("dense2", torch::nn::Linear(kEmbeddingWidth, kEmbeddingWidth))),
        dense3(register_module("dense3", torch::nn::Linear(kEmbeddingWidth, kEmbeddingWidth))) {
    glorot_init(*this);
  }

  torch::Tensor features(const torch::Tensor& image) {
    if (image.dim() != 4 || image.size(1) != 1 || image.size(2) != kImageSize || image.size(3) != kImageSize)
      throw ContractError("topology context must be [B, 1, 28, 28]");
    auto h = torch::max_pool2d(torch::relu(conv1(image)), 2);
    h = torch::max_pool2d(torch::relu(conv2(h)), 2);
    return h.flatten(1);
  }

  // image: [B, 1, 28, 28] in [0, 1]
  torch::Tensor forward(const torch::Tensor& image) {
    auto h = torch::relu(dense1(features(image)));
    h = torch::relu(dense2(h));
    return dense3(h);
  }

  torch::nn::Conv2d conv1, conv2;
  torch::nn::Linear dense1, dense2, dense3;
};
TORCH_MODULE(TopologyEncoder);

// Sum of the time embedding and whichever context embeddings are present.
// Per-row masks (1 = keep) zero out dropped contexts.
inline torch::Tensor combine(const torch::Tensor& time_emb, const std::optional<torch::Tensor>& behavior = {},
                             const std::optional<torch::Tensor>& topology = {},
                             const std::optional<torch::Tensor>& behavior_keep = {},
                             const std::optional<torch::Tensor>& topology_keep = {}) {
  auto out = time_emb;
  auto add = [&](const std::optional<torch::Tensor>& e, const std::optional<torch::Tensor>& keep) {
    if (!e) return;
    if (e->sizes() != time_emb.sizes()) throw ContractError("context embeddings must match the time embedding");
    out = out + (keep ? *e * keep->to(e->dtype()).view({-1, 1}) : *e);
  };
  add(behavior, behavior_keep);
  add(topology, topology_keep);
  return out;
}

struct DropMasks {
  torch::Tensor behavior;  // [B] float, 1 = keep
  torch::Tensor topology;
};

// Bernoulli context dropping. Joint mode drops both contexts of a row with
// one draw; independent mode draws per context.
class ContextDropper {
 public:
  explicit ContextDropper(double probability = 0.1, bool independent = false)
      : p_(probability), independent_(independent) {
    if (!(p_ >= 0.0 && p_ <= 1.0)) throw ConfigError("drop probability must lie in [0, 1]");
  }

  DropMasks draw(int64_t rows, torch::Generator& gen) const {
    auto keep = [&] { return (torch::rand({rows}, gen) >= p_).to(torch::kFloat32); };
    DropMasks m;
    m.behavior = keep();
    m.topology = independent_ ? keep() : m.behavior.clone();
    return m;
  }

  [[nodiscard]] double probability() const { return p_; }
  [[nodiscard]] bool independent() const { return independent_; }

 private:
  double p_;
  bool independent_;
};

}  // namespace microdiff::nn
