#pragma once

// Bitmap <-> tensor conversions and weight initialization shared by the
// network modules.

#include <cmath>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "microdiff/errors.hpp"
#include "microdiff/mnist_data.hpp"

namespace microdiff::nn {

inline constexpr int kCanvas = 32;
inline constexpr int kPad = (kCanvas - kImageSize) / 2;

inline void check_image(const Bitmap& b) {
  if (!b.valid() || b.width != kImageSize || b.height != kImageSize)
    throw ContractError("expected a 28x28 bitmap, got " + std::to_string(b.width) + "x" +
                        std::to_string(b.height));
}

// [N, 1, 28, 28] float32 in [0, 1].
inline torch::Tensor to_unit_tensor(std::span<const Bitmap> images) {
  auto out = torch::empty({static_cast<int64_t>(images.size()), 1, kImageSize, kImageSize});
  auto acc = out.accessor<float, 4>();
  for (std::size_t n = 0; n < images.size(); ++n) {
    check_image(images[n]);
    for (int r = 0; r < kImageSize; ++r)
      for (int c = 0; c < kImageSize; ++c)
        acc[static_cast<int64_t>(n)][0][r][c] = static_cast<float>(images[n].at(r, c)) / 255.0f;
  }
  return out;
}

// [N, 1, 32, 32] float32 in [-1, 1], padded with -1 (the softest material).
inline torch::Tensor to_diffusion_tensor(std::span<const Bitmap> images) {
  auto unit = to_unit_tensor(images) * 2.0 - 1.0;
  return torch::constant_pad_nd(unit, {kPad, kPad, kPad, kPad}, -1.0);
}

inline torch::Tensor crop_canvas(const torch::Tensor& x) {
  return x.index({torch::indexing::Slice(), torch::indexing::Slice(),
                  torch::indexing::Slice(kPad, kPad + kImageSize),
                  torch::indexing::Slice(kPad, kPad + kImageSize)});
}

// Clamps a [-1, 1] canvas batch, crops to 28x28 and quantizes to 0..255.
inline std::vector<Bitmap> to_bitmaps(const torch::Tensor& canvas) {
  auto x = canvas.size(-1) == kCanvas ? crop_canvas(canvas) : canvas;
  x = ((x.to(torch::kFloat64).clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch::kUInt8).contiguous();
  std::vector<Bitmap> out(static_cast<std::size_t>(x.size(0)));
  auto acc = x.accessor<uint8_t, 4>();
  for (int64_t n = 0; n < x.size(0); ++n)
    for (int r = 0; r < kImageSize; ++r)
      for (int c = 0; c < kImageSize; ++c) out[static_cast<std::size_t>(n)].at(r, c) = acc[n][0][r][c];
  return out;
}

// [N, 13] float32 of normalized energies.
inline torch::Tensor to_curve_tensor(std::span<const EnergyCurve> curves) {
  auto out = torch::empty({static_cast<int64_t>(curves.size()), kCurvePoints});
  auto acc = out.accessor<float, 2>();
  for (std::size_t n = 0; n < curves.size(); ++n)
    for (int i = 0; i < kCurvePoints; ++i)
      acc[static_cast<int64_t>(n)][i] = static_cast<float>(curves[n].energies[static_cast<std::size_t>(i)]);
  return out;
}

// Glorot-uniform weights and zero biases for every conv and dense layer.
inline void glorot_init(torch::nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& m : module.modules(/*include_self=*/false)) {
    if (auto* conv = m->as<torch::nn::Conv2d>()) {
      torch::nn::init::xavier_uniform_(conv->weight);
      if (conv->bias.defined()) torch::nn::init::zeros_(conv->bias);
    } else if (auto* lin = m->as<torch::nn::Linear>()) {
      torch::nn::init::xavier_uniform_(lin->weight);
      if (lin->bias.defined()) torch::nn::init::zeros_(lin->bias);
    }
  }
}

inline void zero_parameters(torch::nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& p : module.parameters()) p.zero_();
}

inline int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace microdiff::nn
