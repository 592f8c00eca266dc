#pragma once

// Generate -> surrogate filter -> rank -> FEM validation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <torch/torch.h>

#include "microdiff/diffusion/model.hpp"
#include "microdiff/diffusion/sampler.hpp"
#include "microdiff/errors.hpp"
#include "microdiff/fem/solver.hpp"
#include "microdiff/io/key_value.hpp"
#include "microdiff/mnist_data.hpp"
#include "microdiff/nn/surrogate.hpp"
#include "microdiff/nn/tensors.hpp"

namespace microdiff::pipeline {

inline constexpr double kDefaultMseLimit = 1e-4;
inline constexpr int kDefaultBatch = 64;

struct GenerationTarget {
  EnergyCurve behavior;
  std::optional<Bitmap> topology;
  double mse_limit = kDefaultMseLimit;
  int n_accept = 512;
  int max_generated = 4096;

  // A zero limit is allowed and simply accepts nothing.
  void validate() const {
    if (!(mse_limit >= 0.0)) throw ConfigError("mse_limit must be non-negative");
    if (n_accept < 1) throw ConfigError("n_accept must be at least 1");
    if (max_generated < 1) throw ConfigError("max_generated must be at least 1");
    if (topology) nn::check_image(*topology);
  }
};

// Everything generated so far for one target, in sample-id order. Kept so a
// new limit can be applied without sampling again.
struct GenerationPool {
  std::vector<Bitmap> images;
  std::vector<CurveValues> predicted;
  std::vector<uint64_t> batch_seeds;
  int batch_size = kDefaultBatch;

  [[nodiscard]] std::size_t size() const { return images.size(); }
};

struct SampleScore {
  int64_t id = 0;
  double mse = 0.0;
  bool accepted = false;
  double mean_intensity = 0.0;
  CurveValues predicted{};
};

enum class FilterStatus { complete, partial, exhausted };

inline const char* to_string(FilterStatus s) {
  switch (s) {
    case FilterStatus::complete: return "complete";
    case FilterStatus::partial: return "partial";
    case FilterStatus::exhausted: return "exhausted";
  }
  return "?";
}

inline constexpr std::array<double, 5> kReportQuantiles{0.0, 0.05, 0.5, 0.95, 1.0};

struct FilterReport {
  int64_t generated_count = 0;
  int64_t accepted_count = 0;
  int n_accept = 0;
  double mse_limit = 0.0;
  int batch_size = kDefaultBatch;
  int64_t max_generated = 0;
  FilterStatus status = FilterStatus::exhausted;
  std::vector<SampleScore> samples;
  std::array<double, 5> mse_quantiles{};
  double mean_accepted_intensity = std::numeric_limits<double>::quiet_NaN();
  uint64_t seed = 0;
  std::vector<uint64_t> batch_seeds;

  [[nodiscard]] std::vector<int64_t> accepted_ids() const {
    std::vector<int64_t> ids;
    for (const auto& s : samples)
      if (s.accepted) ids.push_back(s.id);
    return ids;
  }

  // Counts agree with the per-sample table, accepted samples beat the limit
  // and neither cap is exceeded.
  [[nodiscard]] bool invariants_hold() const {
    if (static_cast<int64_t>(samples.size()) != generated_count) return false;
    int64_t accepted = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].id != static_cast<int64_t>(i)) return false;
      if (samples[i].accepted) {
        ++accepted;
        if (!(samples[i].mse < mse_limit)) return false;
      }
    }
    if (accepted != accepted_count || accepted_count > n_accept) return false;
    const int64_t cap = (max_generated + batch_size - 1) / batch_size * batch_size;
    return generated_count <= cap;
  }
};

// Linear-interpolation quantile of unsorted values.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Applies the target's limit and acceptance cap to the cached pool, batch by
// batch, stopping after the batch that fills the quota.
inline FilterReport filter_pool(const GenerationPool& pool, const GenerationTarget& target) {
  target.validate();
  FilterReport r;
  r.n_accept = target.n_accept;
  r.mse_limit = target.mse_limit;
  r.batch_size = pool.batch_size;
  r.max_generated = target.max_generated;
  const std::size_t cap =
      static_cast<std::size_t>((target.max_generated + pool.batch_size - 1) / pool.batch_size * pool.batch_size);
  double intensity = 0.0;
  std::size_t consumed = 0;
  for (std::size_t b = 0; b * static_cast<std::size_t>(pool.batch_size) < std::min(pool.size(), cap); ++b) {
    if (r.accepted_count >= target.n_accept) break;
    const auto begin = b * static_cast<std::size_t>(pool.batch_size);
    const auto end = std::min(begin + static_cast<std::size_t>(pool.batch_size), pool.size());
    for (std::size_t i = begin; i < end; ++i) {
      SampleScore s;
      s.id = static_cast<int64_t>(i);
      s.predicted = pool.predicted[i];
      s.mse = nn::mse(s.predicted, target.behavior.energies);
      s.mean_intensity = pool.images[i].mean_intensity();
      s.accepted = s.mse < target.mse_limit && r.accepted_count < target.n_accept;
      if (s.accepted) {
        ++r.accepted_count;
        intensity += s.mean_intensity;
      }
      r.samples.push_back(s);
    }
    consumed = end;
    if (b < pool.batch_seeds.size()) r.batch_seeds.push_back(pool.batch_seeds[b]);
  }
  r.generated_count = static_cast<int64_t>(consumed);
  std::vector<double> mses;
  for (const auto& s : r.samples) mses.push_back(s.mse);
  for (std::size_t i = 0; i < kReportQuantiles.size(); ++i) r.mse_quantiles[i] = quantile(mses, kReportQuantiles[i]);
  if (r.accepted_count > 0) r.mean_accepted_intensity = intensity / static_cast<double>(r.accepted_count);
  r.status = r.accepted_count >= target.n_accept ? FilterStatus::complete
             : r.accepted_count > 0             ? FilterStatus::partial
                                                : FilterStatus::exhausted;
  return r;
}

struct GenerateOptions {
  uint64_t seed = 0;
  int batch_size = kDefaultBatch;
  diffusion::SampleOptions sampling;  // its seed is replaced per batch
  std::function<void(const GenerationPool&)> on_batch;
  // Sees each raw batch (including snapshots) before it joins the pool.
  std::function<void(std::size_t batch_index, const diffusion::SampleResult&)> on_sample;
};

// Conditioning rows for a batch: the target curve (and topology) repeated.
inline diffusion::Contexts target_contexts(const diffusion::DiffusionModel& model, const GenerationTarget& target,
                                           int64_t rows) {
  diffusion::Contexts ctx;
  if (model->curve) {
    std::array<EnergyCurve, 1> c{target.behavior};
    ctx.curves = nn::to_curve_tensor(c).expand({rows, kCurvePoints}).contiguous();
  }
  if (target.topology) {
    if (!model->topology) throw ConfigError("model has no topology context but a topology target was given");
    ctx.topology = nn::to_unit_tensor(std::span<const Bitmap>(&*target.topology, 1))
                       .expand({rows, 1, kImageSize, kImageSize})
                       .contiguous();
  }
  return ctx;
}

struct GenerationResult {
  std::vector<Bitmap> accepted;
  FilterReport report;
};

// Samples batches until the quota or the cap is reached. Batches already in
// `pool` are replayed first; new batches are appended to it.
inline GenerationResult generate_and_filter(diffusion::DiffusionModel& model, const diffusion::NoiseSchedule& sched,
                                            nn::SurrogateNet& surrogate, const GenerationTarget& target,
                                            const GenerateOptions& opts, GenerationPool* pool = nullptr) {
  target.validate();
  if (opts.batch_size < 1) throw ConfigError("generation batch size must be positive");
  GenerationPool local;
  GenerationPool& p = pool ? *pool : local;
  if (p.size() == 0) p.batch_size = opts.batch_size;
  if (p.batch_size != opts.batch_size) throw ConfigError("cached pool was built with a different batch size");
  const auto cap = static_cast<std::size_t>((target.max_generated + opts.batch_size - 1) / opts.batch_size *
                                            opts.batch_size);
  FilterReport report = filter_pool(p, target);
  while (report.accepted_count < target.n_accept && p.size() < cap) {
    const auto batch_index = p.size() / static_cast<std::size_t>(opts.batch_size);
    auto so = opts.sampling;
    so.seed = diffusion::mix_seed(opts.seed, batch_index);
    const auto ctx = target_contexts(model, target, opts.batch_size);
    auto sample = diffusion::p_sample_loop(model, sched, opts.batch_size, ctx, so);
    if (opts.on_sample) opts.on_sample(batch_index, sample);
    auto predicted = nn::predict(surrogate, sample.images);
    for (std::size_t i = 0; i < sample.images.size(); ++i) {
      p.images.push_back(std::move(sample.images[i]));
      p.predicted.push_back(predicted[i]);
    }
    p.batch_seeds.push_back(so.seed);
    if (opts.on_batch) opts.on_batch(p);
    report = filter_pool(p, target);
  }
  report.seed = opts.seed;
  GenerationResult out;
  for (const auto& s : report.samples)
    if (s.accepted) out.accepted.push_back(p.images[static_cast<std::size_t>(s.id)]);
  out.report = std::move(report);
  return out;
}

// Sample ids ordered by ascending surrogate MSE, ties by id.
inline std::vector<int64_t> rank(const FilterReport& report, std::size_t top_k) {
  if (report.samples.empty()) throw ContractError("cannot rank an empty report");
  std::vector<const SampleScore*> order;
  for (const auto& s : report.samples) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(), [](const SampleScore* a, const SampleScore* b) {
    return a->mse < b->mse || (a->mse == b->mse && a->id < b->id);
  });
  std::vector<int64_t> ids;
  for (std::size_t i = 0; i < std::min(top_k, order.size()); ++i) ids.push_back(order[i]->id);
  return ids;
}

// Average ranks (1-based) with ties sharing the mean rank.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

// Spearman rank correlation; NaN when either side is constant.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractError("rank correlation needs equal-length inputs");
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto rx = fractional_ranks(x), ry = fractional_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

struct FemSettings {
  int subdivision = 2;
  double normalization = 1.0;  // dataset constant S
  double poisson = kDefaultPoisson;
  fem::SolverOptions solver;
  int jobs = 1;
};

struct ValidationRow {
  int64_t id = 0;
  double surrogate_mse = 0.0;
  double fem_mse = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  std::string error;
  CurveValues fem_curve{};
};

struct ValidationTable {
  std::vector<ValidationRow> rows;
  double rank_correlation = std::numeric_limits<double>::quiet_NaN();
  double mean_abs_discrepancy = std::numeric_limits<double>::quiet_NaN();  // mean |fem - surrogate| MSE

  [[nodiscard]] double fraction_within(double limit) const {
    std::size_t ok = 0, n = 0;
    for (const auto& r : rows) {
      if (!r.converged) continue;
      ++n;
      if (r.fem_mse < limit) ++ok;
    }
    return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
  }
};

// Normalized FEM curve of one bitmap.
inline EnergyCurve fem_curve(const Bitmap& image, const FemSettings& s) {
  const auto field = to_property_field(image, s.poisson);
  const auto result = fem::run_uniaxial_extension(field, fem::LoadSchedule{}, s.subdivision, s.solver);
  return normalize(result.curve, s.normalization);
}

// Re-solves the given samples and scores them against the target. Failures
// are recorded per row. Row order follows the input order whatever `jobs` is.
inline ValidationTable validate_with_fem(std::span<const Bitmap> images, std::span<const int64_t> ids,
                                         std::span<const double> surrogate_mses, const EnergyCurve& target,
                                         std::size_t k, const FemSettings& settings) {
  if (ids.size() != images.size() || surrogate_mses.size() != images.size())
    throw ContractError("validation inputs must be aligned");
  ValidationTable table;
  const std::size_t n = std::min(k, images.size());
  table.rows.resize(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      auto& row = table.rows[i];
      row.id = ids[i];
      row.surrogate_mse = surrogate_mses[i];
      try {
        const auto curve = fem_curve(images[i], settings);
        row.fem_curve = curve.energies;
        row.fem_mse = nn::mse(curve.energies, target.energies);
        row.converged = true;
      } catch (const Error& e) {
        row.error = e.what();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(settings.jobs, static_cast<int>(n)));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<double> xs, ys;
  double disc = 0.0;
  for (const auto& r : table.rows) {
    if (!r.converged) continue;
    xs.push_back(r.surrogate_mse);
    ys.push_back(r.fem_mse);
    disc += std::abs(r.fem_mse - r.surrogate_mse);
  }
  if (!xs.empty()) {
    table.rank_correlation = spearman(xs, ys);
    table.mean_abs_discrepancy = disc / static_cast<double>(xs.size());
  }
  return table;
}

// ---------------------------------------------------------------------------
// Report files

inline void write_report_csv(const std::filesystem::path& path, const FilterReport& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "id,mse,accepted,mean_intensity";
  for (int i = 0; i < kCurvePoints; ++i) out << ",psi" << i;
  out << '\n';
  for (const auto& s : r.samples) {
    out << s.id << ',' << io::format_double(s.mse) << ',' << (s.accepted ? 1 : 0) << ','
        << io::format_double(s.mean_intensity);
    for (double v : s.predicted) out << ',' << io::format_double(v);
    out << '\n';
  }
}

inline io::KeyValue report_summary(const FilterReport& r) {
  io::KeyValue kv;
  kv.set("status", to_string(r.status));
  kv.set("generated_count", r.generated_count);
  kv.set("accepted_count", r.accepted_count);
  kv.set("n_accept", r.n_accept);
  kv.set("mse_limit", r.mse_limit);
  kv.set("batch_size", r.batch_size);
  kv.set("max_generated", r.max_generated);
  const char* names[] = {"mse_q0", "mse_q5", "mse_q50", "mse_q95", "mse_q100"};
  for (std::size_t i = 0; i < kReportQuantiles.size(); ++i) kv.set(names[i], r.mse_quantiles[i]);
  kv.set("mean_accepted_intensity", r.mean_accepted_intensity);
  kv.set("seed", static_cast<int64_t>(r.seed));
  std::string seeds;
  for (auto s : r.batch_seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  kv.set("batch_seeds", seeds);
  return kv;
}

inline void write_validation_csv(const std::filesystem::path& path, const ValidationTable& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "id,surrogate_mse,fem_mse,converged,error\n";
  for (const auto& r : t.rows)
    out << r.id << ',' << io::format_double(r.surrogate_mse) << ',' << io::format_double(r.fem_mse) << ','
        << (r.converged ? 1 : 0) << ",\"" << r.error << "\"\n";
}

}  // namespace microdiff::pipeline
