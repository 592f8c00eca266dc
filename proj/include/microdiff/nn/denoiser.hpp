#pragma once

// U-Net noise predictor conditioned on a summed 128-wide embedding.

#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <torch/torch.h>

#include "microdiff/errors.hpp"
#include "microdiff/io/key_value.hpp"
#include "microdiff/nn/tensors.hpp"

namespace microdiff::nn {

inline constexpr int kEmbeddingWidth = 128;

struct DenoiserConfig {
  int base_channels = 32;
  std::vector<int> multipliers{1, 2, 4, 8};
  int res_blocks = 1;
  // Grid sizes (on the 32x32 canvas) that get a self-attention layer.
  std::set<int> attention_resolutions{16, 8, 4};
  int embedding_width = kEmbeddingWidth;
  int input_channels = 1;

  void validate() const {
    if (multipliers.size() != 4) throw ConfigError("denoiser needs exactly 4 resolution levels");
    if (base_channels < 1) throw ConfigError("base_channels must be positive");
    if (res_blocks != 1) throw ConfigError("denoiser is built with one residual block per level");
    if (embedding_width != kEmbeddingWidth) throw ConfigError("embedding width must be 128");
  }

  void write(io::KeyValue& kv) const {
    kv.set("unet.base_channels", base_channels);
    std::string m, a;
    for (std::size_t i = 0; i < multipliers.size(); ++i) m += (i ? "," : "") + std::to_string(multipliers[i]);
    for (int r : attention_resolutions) a += (a.empty() ? "" : ",") + std::to_string(r);
    kv.set("unet.multipliers", m);
    kv.set("unet.attention", a);
  }

  static DenoiserConfig read(const io::KeyValue& kv) {
    DenoiserConfig c;
    c.base_channels = static_cast<int>(kv.get_int("unet.base_channels", c.base_channels));
    if (kv.contains("unet.multipliers")) {
      c.multipliers.clear();
      for (double v : kv.get_doubles("unet.multipliers")) c.multipliers.push_back(static_cast<int>(v));
    }
    if (kv.contains("unet.attention")) {
      c.attention_resolutions.clear();
      for (double v : kv.get_doubles("unet.attention")) c.attention_resolutions.insert(static_cast<int>(v));
    }
    c.validate();
    return c;
  }
};

// Largest group count <= 8 that divides the channel count.
inline int norm_groups(int channels) {
  for (int g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

inline torch::nn::GroupNorm group_norm(int channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(channels), channels));
}

inline torch::nn::Conv2d conv3x3(int in, int out, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

// Sinusoidal encoding of integer steps, [B] -> [B, width].
inline torch::Tensor sinusoidal_encoding(const torch::Tensor& t, int width) {
  const int half = width / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

struct TimeEmbeddingImpl : torch::nn::Module {
  explicit TimeEmbeddingImpl(int width = kEmbeddingWidth)
      : width_(width),
        dense1(register_module("dense1", torch::nn::Linear(width, width))),
        dense2(register_module("dense2", torch::nn::Linear(width, width))) {}

  torch::Tensor forward(const torch::Tensor& t) {
    return dense2(torch::silu(dense1(sinusoidal_encoding(t, width_).to(dense1->weight.dtype()))));
  }

  int width_;
  torch::nn::Linear dense1, dense2;
};
TORCH_MODULE(TimeEmbedding);

// norm -> SiLU -> conv, embedding added, norm -> SiLU -> conv, plus skip.
struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int in, int out, int emb_width)
      : norm1(register_module("norm1", group_norm(in))),
        conv1(register_module("conv1", conv3x3(in, out))),
        emb_proj(register_module("emb_proj", torch::nn::Linear(emb_width, out))),
        norm2(register_module("norm2", group_norm(out))),
        conv2(register_module("conv2", conv3x3(out, out))) {
    if (in != out)
      skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + emb_proj(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
  }

  torch::nn::GroupNorm norm1;
  torch::nn::Conv2d conv1;
  torch::nn::Linear emb_proj;
  torch::nn::GroupNorm norm2;
  torch::nn::Conv2d conv2;
  torch::nn::Conv2d skip{nullptr};
};
TORCH_MODULE(ResBlock);

// Single-head self-attention over spatial positions.
struct AttentionImpl : torch::nn::Module {
  explicit AttentionImpl(int channels)
      : channels_(channels),
        norm(register_module("norm", group_norm(channels))),
        qkv(register_module("qkv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 3 * channels, 1)))),
        proj(register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    const auto B = x.size(0), H = x.size(2), W = x.size(3);
    auto parts = qkv(norm(x)).reshape({B, 3, channels_, H * W}).unbind(1);
    const auto& q = parts[0];
    const auto& k = parts[1];
    const auto& v = parts[2];
    auto weights = torch::softmax(torch::bmm(q.transpose(1, 2), k) / std::sqrt(double(channels_)), -1);
    auto h = torch::bmm(v, weights.transpose(1, 2)).reshape({B, channels_, H, W});
    return x + proj(h);
  }

  int channels_;
  torch::nn::GroupNorm norm;
  torch::nn::Conv2d qkv, proj;
};
TORCH_MODULE(Attention);

struct UpsampleImpl : torch::nn::Module {
  explicit UpsampleImpl(int channels) : conv(register_module("conv", conv3x3(channels, channels))) {}
  torch::Tensor forward(const torch::Tensor& x) {
    namespace F = torch::nn::functional;
    return conv(F::interpolate(
        x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
  }
  torch::nn::Conv2d conv;
};
TORCH_MODULE(Upsample);

struct DenoiserOutput {
  torch::Tensor eps;    // [B, 1, 32, 32]
  torch::Tensor v_raw;  // [B, 1, 32, 32], squashed into [0, 1] downstream
};

// Four levels at 32, 16, 8, 4 with one residual block each on the way down,
// a residual-attention-residual bottleneck, and a mirrored up path that
// concatenates the matching skip before its residual block.
struct UNetImpl : torch::nn::Module {
  explicit UNetImpl(DenoiserConfig config = {}) : config_(std::move(config)) {
    config_.validate();
    const int C = config_.base_channels;
    const int E = config_.embedding_width;
    in_conv = register_module("in_conv", conv3x3(config_.input_channels, C));
    int ch = C;
    int size = kCanvas;
    for (std::size_t l = 0; l < 4; ++l) {
      const int out = C * config_.multipliers[l];
      down_res->push_back(ResBlock(ch, out, E));
      ch = out;
      down_attn.push_back(attention_at(size, ch, "down_attn" + std::to_string(l)));
      if (l < 3) {
        downsample->push_back(conv3x3(ch, ch, 2));
        size /= 2;
      }
    }
    register_module("down_res", down_res);
    register_module("downsample", downsample);
    mid_res1 = register_module("mid_res1", ResBlock(ch, ch, E));
    mid_attn = register_module("mid_attn", Attention(ch));
    mid_res2 = register_module("mid_res2", ResBlock(ch, ch, E));
    for (int l = 3; l >= 0; --l) {
      const int skip_ch = C * config_.multipliers[static_cast<std::size_t>(l)];
      up_res->push_back(ResBlock(ch + skip_ch, skip_ch, E));
      ch = skip_ch;
      up_attn.push_back(attention_at(size, ch, "up_attn" + std::to_string(l)));
      if (l > 0) {
        upsample->push_back(Upsample(ch));
        size *= 2;
      }
    }
    register_module("up_res", up_res);
    register_module("upsample", upsample);
    out_norm = register_module("out_norm", group_norm(ch));
    out_conv = register_module("out_conv", conv3x3(ch, 2));
    reset_parameters();
  }

  void reset_parameters() {
    glorot_init(*this);
    zero_parameters(*out_conv);
  }

  DenoiserOutput forward(const torch::Tensor& x, const torch::Tensor& emb) {
    if (x.dim() != 4 || x.size(1) != config_.input_channels || x.size(2) != kCanvas || x.size(3) != kCanvas)
      throw ContractError("denoiser input must be [B, 1, 32, 32]");
    if (emb.dim() != 2 || emb.size(0) != x.size(0) || emb.size(1) != config_.embedding_width)
      throw ContractError("denoiser embedding must be [B, 128]");
    auto h = in_conv(x);
    std::vector<torch::Tensor> skips;
    for (std::size_t l = 0; l < 4; ++l) {
      h = down_res[l]->as<ResBlockImpl>()->forward(h, emb);
      if (down_attn[l]) h = down_attn[l]->forward(h);
      skips.push_back(h);
      if (l < 3) h = downsample[l]->as<torch::nn::Conv2dImpl>()->forward(h);
    }
    h = mid_res1(h, emb);
    h = mid_attn(h);
    h = mid_res2(h, emb);
    for (std::size_t i = 0; i < 4; ++i) {
      h = torch::cat({h, skips[3 - i]}, 1);
      h = up_res[i]->as<ResBlockImpl>()->forward(h, emb);
      if (up_attn[i]) h = up_attn[i]->forward(h);
      if (i < 3) h = upsample[i]->as<UpsampleImpl>()->forward(h);
    }
    auto out = out_conv(torch::silu(out_norm(h)));
    auto parts = out.split(1, 1);
    return {parts[0], parts[1]};
  }

  [[nodiscard]] const DenoiserConfig& config() const { return config_; }

 private:
  Attention attention_at(int size, int channels, const std::string& name) {
    if (!config_.attention_resolutions.contains(size)) return Attention(nullptr);
    return register_module(name, Attention(channels));
  }

 public:
  DenoiserConfig config_;
  torch::nn::Conv2d in_conv{nullptr};
  torch::nn::ModuleList down_res, downsample, up_res, upsample;
  std::vector<Attention> down_attn, up_attn;
  ResBlock mid_res1{nullptr}, mid_res2{nullptr};
  Attention mid_attn{nullptr};
  torch::nn::GroupNorm out_norm{nullptr};
  torch::nn::Conv2d out_conv{nullptr};
};
TORCH_MODULE(UNet);

}  // namespace microdiff::nn
