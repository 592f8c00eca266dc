#pragma once

// Ancestral sampling through the learned reverse chain.

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "microdiff/diffusion/model.hpp"
#include "microdiff/diffusion/schedule.hpp"
#include "microdiff/errors.hpp"
#include "microdiff/mnist_data.hpp"
#include "microdiff/nn/tensors.hpp"

namespace microdiff::diffusion {

struct SampleOptions {
  uint64_t seed = 0;
  // eps = (1 + w) eps(ctx) - w eps(no ctx); 0 is plain conditional sampling.
  double guidance_weight = 0.0;
  // Clamp the implied x0 to [-1, 1] before forming the reverse mean.
  bool clip_denoised = false;
  // Snapshot k holds the state after k reverse steps (k = T is the output).
  std::set<int> snapshot_steps;
};

struct SampleResult {
  torch::Tensor x;  // [n, 1, 32, 32] clamped to [-1, 1]
  std::vector<Bitmap> images;
  std::map<int, torch::Tensor> snapshots;  // clamped [-1, 1] canvases
};

// Stateless seed mixer for independent per-batch streams.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Draws n samples from x_T ~ N(0, I) down to x_0. `ctx` rows (when
// present) must match n. Runs in float32 without gradients.
inline SampleResult p_sample_loop(DiffusionModel& model, const NoiseSchedule& sched, int64_t n,
                                  const Contexts& ctx = {}, const SampleOptions& opts = {}) {
  if (n < 1) throw ContractError("sample count must be positive");
  for (int k : opts.snapshot_steps)
    if (k < 0 || k > sched.steps) throw ConfigError("snapshot step " + std::to_string(k) + " outside [0, T]");
  if (ctx.curves.defined() && ctx.curves.size(0) != n) throw ContractError("curve contexts must have n rows");
  if (ctx.topology.defined() && ctx.topology.size(0) != n)
    throw ContractError("topology contexts must have n rows");
  torch::NoGradGuard guard;
  model->eval();
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(opts.seed);
  auto x = torch::randn({n, 1, nn::kCanvas, nn::kCanvas}, gen);
  SampleResult res;
  if (opts.snapshot_steps.contains(0)) res.snapshots[0] = x.clamp(-1.0, 1.0);
  const bool guided = opts.guidance_weight != 0.0 && !ctx.empty();
  for (int step = sched.steps, done = 1; step >= 1; --step, ++done) {
    const auto t = torch::full({n}, step, torch::kLong);
    auto out = model->forward(x, t, ctx);
    auto eps = out.eps;
    if (guided) {
      const auto uncond = model->forward(x, t, Contexts{});
      eps = (1.0 + opts.guidance_weight) * eps - opts.guidance_weight * uncond.eps;
    }
    torch::Tensor mean;
    if (opts.clip_denoised) {
      const auto x0 = x0_from_eps(x, t, eps, sched).clamp(-1.0, 1.0);
      mean = q_posterior(x0, x, t, sched).mean;
    } else {
      mean = mu_from_eps(x, t, eps, sched);
    }
    if (step > 1) {
      const auto log_var = log_sigma_from_v(squash_v(out.v_raw), t, sched);
      x = mean + (0.5 * log_var).exp() * torch::randn(x.sizes(), gen);
    } else {
      x = mean;
    }
    if (!torch::isfinite(x).all().item<bool>())
      throw NumericalError("non-finite sample at reverse step t = " + std::to_string(step));
    if (opts.snapshot_steps.contains(done)) res.snapshots[done] = x.clamp(-1.0, 1.0);
  }
  res.x = x.clamp(-1.0, 1.0);
  res.images = nn::to_bitmaps(res.x);
  return res;
}

}  // namespace microdiff::diffusion
