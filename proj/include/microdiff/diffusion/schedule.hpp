#pragma once

// Gaussian diffusion tables and the closed-form forward/posterior/reverse
// relations between them. Step indices are 1-based (t = 1..T); slot 0 of
// every table holds the t = 0 convention (alpha_bar = 1, beta = 0).

#include <cmath>
#include <vector>

#include <torch/torch.h>

#include "microdiff/errors.hpp"

namespace microdiff::diffusion {

struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;        // beta[t]
  std::vector<double> alpha;       // 1 - beta[t]
  std::vector<double> alpha_bar;   // prod_{s<=t} alpha[s]
  std::vector<double> beta_tilde;  // posterior variance; beta_tilde[1] = 0

  // Posterior log-variance with the t = 1 entry replaced by t = 2 so the
  // log-space interpolation of the reverse variance stays finite.
  [[nodiscard]] double log_beta_tilde_clipped(int t) const {
    return std::log(t == 1 && steps > 1 ? beta_tilde[2] : beta_tilde[static_cast<std::size_t>(t)]);
  }

  // Table as a float64 tensor of length T + 1 for gathering by step index.
  [[nodiscard]] torch::Tensor tensor(const std::vector<double>& table) const {
    return torch::tensor(table, torch::kFloat64);
  }
};

inline NoiseSchedule schedule_from_betas(const std::vector<double>& betas) {
  if (betas.size() < 2) throw ConfigError("noise schedule needs T >= 2");
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  const auto n = betas.size() + 1;
  s.beta.assign(n, 0.0);
  s.alpha.assign(n, 1.0);
  s.alpha_bar.assign(n, 1.0);
  s.beta_tilde.assign(n, 0.0);
  for (std::size_t t = 1; t < n; ++t) {
    const double b = betas[t - 1];
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta values must lie in (0, 1)");
    s.beta[t] = b;
    s.alpha[t] = 1.0 - b;
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.beta_tilde[t] = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * b;
  }
  return s;
}

inline constexpr double kBetaStart = 1e-4;  // at T = 1000
inline constexpr double kBetaEnd = 0.02;

// Linearly spaced betas; endpoints are given for T = 1000 and rescaled by
// 1000 / T for other step counts.
inline NoiseSchedule linear_beta_schedule(int steps, double beta_start = kBetaStart,
                                          double beta_end = kBetaEnd) {
  if (steps < 2) throw ConfigError("noise schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_end >= beta_start))
    throw ConfigError("beta endpoints must satisfy 0 < start <= end");
  const double scale = 1000.0 / steps;
  const double lo = beta_start * scale;
  const double hi = beta_end * scale;
  if (!(hi < 1.0)) throw ConfigError("rescaled beta_end must stay below 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) betas[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (steps - 1);
  return schedule_from_betas(betas);
}

// Gathers table[t] per batch row and reshapes to broadcast against `like`.
inline torch::Tensor extract(const std::vector<double>& table, const torch::Tensor& t,
                             const torch::Tensor& like) {
  auto values = torch::tensor(table, torch::kFloat64).index_select(0, t.to(torch::kLong).flatten());
  std::vector<int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = values.size(0);
  return values.view(shape).to(like.dtype());
}

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t,
                              const torch::Tensor& eps, const NoiseSchedule& s) {
  const auto ab = extract(s.alpha_bar, t, x0);
  return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
}

struct Posterior {
  torch::Tensor mean;
  torch::Tensor variance;
  torch::Tensor log_variance_clipped;
};

inline Posterior q_posterior(const torch::Tensor& x0, const torch::Tensor& x_t,
                             const torch::Tensor& t, const NoiseSchedule& s) {
  std::vector<double> c0(s.beta.size(), 0.0), ct(s.beta.size(), 0.0), logv(s.beta.size(), 0.0);
  for (int k = 1; k <= s.steps; ++k) {
    const auto i = static_cast<std::size_t>(k);
    const double denom = 1.0 - s.alpha_bar[i];
    c0[i] = std::sqrt(s.alpha_bar[i - 1]) * s.beta[i] / denom;
    ct[i] = std::sqrt(s.alpha[i]) * (1.0 - s.alpha_bar[i - 1]) / denom;
    logv[i] = s.log_beta_tilde_clipped(k);
  }
  Posterior p;
  p.mean = extract(c0, t, x0) * x0 + extract(ct, t, x_t) * x_t;
  p.variance = extract(s.beta_tilde, t, x0).expand_as(x0);
  p.log_variance_clipped = extract(logv, t, x0).expand_as(x0);
  return p;
}

// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)
inline torch::Tensor mu_from_eps(const torch::Tensor& x_t, const torch::Tensor& t,
                                 const torch::Tensor& eps_hat, const NoiseSchedule& s) {
  std::vector<double> coef(s.beta.size(), 0.0), inv_sqrt_alpha(s.beta.size(), 1.0);
  for (std::size_t i = 1; i < s.beta.size(); ++i) {
    coef[i] = s.beta[i] / std::sqrt(1.0 - s.alpha_bar[i]);
    inv_sqrt_alpha[i] = 1.0 / std::sqrt(s.alpha[i]);
  }
  return extract(inv_sqrt_alpha, t, x_t) * (x_t - extract(coef, t, x_t) * eps_hat);
}

// x0 implied by an epsilon prediction.
inline torch::Tensor x0_from_eps(const torch::Tensor& x_t, const torch::Tensor& t,
                                 const torch::Tensor& eps_hat, const NoiseSchedule& s) {
  const auto ab = extract(s.alpha_bar, t, x_t);
  return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt();
}

// Maps the raw variance-head output to v in [0, 1].
inline torch::Tensor squash_v(const torch::Tensor& raw) { return ((raw + 1.0) * 0.5).clamp(0.0, 1.0); }

// log Sigma = v log beta_t + (1 - v) log beta_tilde_t
inline torch::Tensor log_sigma_from_v(const torch::Tensor& v, const torch::Tensor& t,
                                      const NoiseSchedule& s) {
  std::vector<double> log_beta(s.beta.size(), 0.0), log_bt(s.beta.size(), 0.0);
  for (int k = 1; k <= s.steps; ++k) {
    log_beta[static_cast<std::size_t>(k)] = std::log(s.beta[static_cast<std::size_t>(k)]);
    log_bt[static_cast<std::size_t>(k)] = s.log_beta_tilde_clipped(k);
  }
  return v * extract(log_beta, t, v) + (1.0 - v) * extract(log_bt, t, v);
}

inline torch::Tensor sigma_from_v(const torch::Tensor& v, const torch::Tensor& t,
                                  const NoiseSchedule& s) {
  return log_sigma_from_v(v, t, s).exp();
}

}  // namespace microdiff::diffusion
