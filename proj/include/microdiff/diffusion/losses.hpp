#pragma once

// Noise-matching, variational-bound and hybrid training losses.

#include <cmath>
#include <numbers>

#include <torch/torch.h>

#include "microdiff/diffusion/schedule.hpp"

namespace microdiff::diffusion {

inline constexpr double kVlbWeight = 0.001;

// Element-wise KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))) in nats.
inline torch::Tensor normal_kl(const torch::Tensor& mean1, const torch::Tensor& logvar1,
                               const torch::Tensor& mean2, const torch::Tensor& logvar2) {
  return 0.5 * (-1.0 + logvar2 - logvar1 + (logvar1 - logvar2).exp() +
                (mean1 - mean2).pow(2) * (-logvar2).exp());
}

// Diagonal-Gaussian KL summed over all non-batch dimensions; one value per row.
inline torch::Tensor gaussian_kl(const torch::Tensor& mean1, const torch::Tensor& var1,
                                 const torch::Tensor& mean2, const torch::Tensor& var2) {
  auto kl = normal_kl(mean1, var1.log(), mean2, var2.log());
  return kl.dim() > 1 ? kl.flatten(1).sum(1) : kl.sum();
}

inline torch::Tensor mean_flat(const torch::Tensor& x) { return x.flatten(1).mean(1); }

inline torch::Tensor standard_normal_cdf(const torch::Tensor& x) {
  return 0.5 * (1.0 + torch::erf(x / std::numbers::sqrt2));
}

// log-likelihood of x in [-1, 1] quantized to 256 levels under a Gaussian,
// integrating over each bin of width 2/255; the outermost bins extend to
// infinity.
inline torch::Tensor discretized_gaussian_log_likelihood(const torch::Tensor& x,
                                                         const torch::Tensor& mean,
                                                         const torch::Tensor& log_variance) {
  const auto centered = x - mean;
  const auto inv_std = (-0.5 * log_variance).exp();
  const auto cdf_plus = standard_normal_cdf(inv_std * (centered + 1.0 / 255.0));
  const auto cdf_min = standard_normal_cdf(inv_std * (centered - 1.0 / 255.0));
  const auto log_cdf_plus = cdf_plus.clamp_min(1e-12).log();
  const auto log_one_minus_cdf_min = (1.0 - cdf_min).clamp_min(1e-12).log();
  const auto log_delta = (cdf_plus - cdf_min).clamp_min(1e-12).log();
  return torch::where(x < -0.999, log_cdf_plus,
                      torch::where(x > 0.999, log_one_minus_cdf_min, log_delta));
}

struct LossBreakdown {
  torch::Tensor l_mu;      // scalar
  torch::Tensor l_vlb;     // scalar
  torch::Tensor l_hybrid;  // scalar, l_mu + 0.001 l_vlb
  torch::Tensor terms;     // per-row L_{t-1} in bits per dimension
  torch::Tensor prior;     // per-row L_T in bits per dimension
};

// KL(q(x_T | x0) || N(0, I)) per row in bits per dimension. Independent of
// every model parameter.
inline torch::Tensor prior_bpd(const torch::Tensor& x0, const NoiseSchedule& s) {
  const auto t = torch::full({x0.size(0)}, s.steps, torch::kLong);
  const auto ab = extract(s.alpha_bar, t, x0);
  const auto mean = ab.sqrt() * x0;
  const auto logvar = (1.0 - ab).log().expand_as(x0);
  const auto zeros = torch::zeros_like(x0);
  return mean_flat(normal_kl(mean, logvar, zeros, zeros)) / std::numbers::ln2;
}

// Per-row variational term for the sampled steps: the decoder NLL at t = 1
// and the posterior KL otherwise. The model mean is detached so this term
// only trains the variance head.
inline torch::Tensor vlb_terms(const torch::Tensor& eps_hat, const torch::Tensor& v_raw,
                               const torch::Tensor& x0, const torch::Tensor& x_t,
                               const torch::Tensor& t, const NoiseSchedule& s) {
  const auto post = q_posterior(x0, x_t, t, s);
  const auto model_mean = mu_from_eps(x_t, t, eps_hat.detach(), s);
  const auto model_logvar = log_sigma_from_v(squash_v(v_raw), t, s);
  const auto kl = mean_flat(normal_kl(post.mean, post.log_variance_clipped, model_mean, model_logvar)) /
                  std::numbers::ln2;
  const auto nll =
      -mean_flat(discretized_gaussian_log_likelihood(x0, model_mean, model_logvar)) / std::numbers::ln2;
  return torch::where(t.to(torch::kLong) == 1, nll, kl);
}

// l_mu: mean squared noise error. l_vlb: unbiased single-step estimate
// T * L_{t-1} plus the parameter-free prior term L_T.
inline LossBreakdown hybrid_loss(const torch::Tensor& eps_hat, const torch::Tensor& v_raw,
                                 const torch::Tensor& x0, const torch::Tensor& x_t,
                                 const torch::Tensor& t, const torch::Tensor& eps,
                                 const NoiseSchedule& s) {
  LossBreakdown out;
  out.l_mu = (eps - eps_hat).pow(2).mean();
  out.terms = vlb_terms(eps_hat, v_raw, x0, x_t, t, s);
  out.prior = prior_bpd(x0, s);
  out.l_vlb = static_cast<double>(s.steps) * out.terms.mean() + out.prior.mean();
  out.l_hybrid = out.l_mu + kVlbWeight * out.l_vlb;
  return out;
}

}  // namespace microdiff::diffusion
