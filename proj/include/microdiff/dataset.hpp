#pragma once

// FEM-labelled datasets on disk: images.idx + curves.csv + curves_raw.csv +
// manifest.txt in one directory, rows aligned by sample id.

#include <atomic>
#include <filesystem>
#include <functional>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "microdiff/errors.hpp"
#include "microdiff/fem/solver.hpp"
#include "microdiff/mnist_data.hpp"

namespace microdiff {

struct SolveSettings {
  int subdivision = 2;
  double poisson = kDefaultPoisson;
  fem::SolverOptions solver;
  int jobs = 1;
};

using SolveProgress = std::function<void(std::size_t index, const fem::UniaxialResult&)>;

// Raw uniaxial-extension curves for each image. Results land at their input
// index, so the output does not depend on `jobs`. The first failure is
// rethrown after all workers stop.
inline std::vector<fem::UniaxialResult> solve_curves(std::span<const Bitmap> images, const SolveSettings& s,
                                                     const SolveProgress& progress = {}) {
  std::vector<fem::UniaxialResult> out(images.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; !failed && (i = next.fetch_add(1)) < images.size();) {
      try {
        out[i] = fem::run_uniaxial_extension(to_property_field(images[i], s.poisson), fem::LoadSchedule{},
                                             s.subdivision, s.solver);
        if (progress) {
          std::lock_guard lock(mu);
          progress(i, out[i]);
        }
      } catch (const NumericalError& e) {
        std::lock_guard lock(mu);
        if (!error) error = std::make_exception_ptr(NumericalError("sample " + std::to_string(i) + ": " + e.what()));
        failed = true;
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(s.jobs, static_cast<int>(images.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

struct Dataset {
  std::vector<Bitmap> images;
  std::vector<CurveRecord> curves;  // normalized
  DatasetManifest manifest;

  [[nodiscard]] std::vector<EnergyCurve> energy_curves() const {
    std::vector<EnergyCurve> c;
    c.reserve(curves.size());
    for (const auto& r : curves) c.push_back(r.curve);
    return c;
  }
};

namespace dataset_files {
inline constexpr const char* kImages = "images.idx";
inline constexpr const char* kCurves = "curves.csv";
inline constexpr const char* kRawCurves = "curves_raw.csv";
inline constexpr const char* kManifest = "manifest.txt";
}  // namespace dataset_files

inline void write_dataset(const std::filesystem::path& dir, std::span<const Bitmap> images,
                          std::span<const fem::UniaxialResult> raw, const DatasetManifest& manifest) {
  if (images.size() != raw.size()) throw ContractError("dataset images and curves must be aligned");
  std::filesystem::create_directories(dir);
  std::vector<CurveRecord> raw_rows, norm_rows;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw_rows.push_back({static_cast<std::int64_t>(i), raw[i].curve});
    norm_rows.push_back({static_cast<std::int64_t>(i), normalize(raw[i].curve, manifest.normalization)});
  }
  save_idx(dir / dataset_files::kImages, images);
  write_curve_csv(dir / dataset_files::kRawCurves, raw_rows);
  write_curve_csv(dir / dataset_files::kCurves, norm_rows);
  manifest.to_key_value().save(dir / dataset_files::kManifest);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  for (const char* f : {dataset_files::kImages, dataset_files::kCurves, dataset_files::kManifest})
    if (!std::filesystem::exists(dir / f)) throw DataError("dataset file missing: " + (dir / f).string());
  Dataset d;
  d.images = load_idx(dir / dataset_files::kImages);
  d.curves = read_curve_csv(dir / dataset_files::kCurves, true);
  d.manifest = DatasetManifest::from_key_value(io::KeyValue::load(dir / dataset_files::kManifest));
  if (d.images.size() != d.curves.size())
    throw DataError(dir.string() + ": " + std::to_string(d.images.size()) + " images but " +
                    std::to_string(d.curves.size()) + " curves");
  for (std::size_t i = 0; i < d.curves.size(); ++i)
    if (d.curves[i].sample_id != static_cast<std::int64_t>(i))
      throw DataError(dir.string() + ": curve rows are not in sample-id order at row " + std::to_string(i));
  return d;
}

}  // namespace microdiff
