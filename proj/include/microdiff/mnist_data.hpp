#pragma once

// Bitmaps, material fields, energy curves and cubic target polynomials.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "microdiff/errors.hpp"
#include "microdiff/io/key_value.hpp"

namespace microdiff {

inline constexpr int kImageSize = 28;
inline constexpr int kCurvePoints = 13;
inline constexpr double kMinYoung = 1.0;
inline constexpr double kMaxYoung = 100.0;
inline constexpr double kDefaultPoisson = 0.3;
// Half of the 28-unit domain height.
inline constexpr double kMaxDisplacement = 14.0;

struct Bitmap {
  int width = kImageSize;
  int height = kImageSize;
  std::vector<std::uint8_t> values;  // row-major, row 0 at the top

  Bitmap() : values(static_cast<std::size_t>(kImageSize * kImageSize), 0) {}
  Bitmap(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), values(static_cast<std::size_t>(w * h), fill) {}

  [[nodiscard]] std::uint8_t at(int row, int col) const {
    return values[static_cast<std::size_t>(row * width + col)];
  }
  std::uint8_t& at(int row, int col) { return values[static_cast<std::size_t>(row * width + col)]; }
  [[nodiscard]] bool valid() const {
    return width > 0 && height > 0 && values.size() == static_cast<std::size_t>(width * height);
  }
  [[nodiscard]] double mean_intensity() const {
    double s = 0.0;
    for (auto v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }

  friend bool operator==(const Bitmap&, const Bitmap&) = default;
};

// ---------------------------------------------------------------------------
// IDX container

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("truncated IDX header", bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

// Decodes an unsigned-byte 3-D IDX tensor (N x rows x cols).
inline std::vector<Bitmap> parse_idx(std::span<const std::uint8_t> bytes) {
  const auto magic = detail::read_be32(bytes, 0);
  if (magic != kIdxImageMagic) {
    std::ostringstream msg;
    msg << "bad IDX magic 0x" << std::hex << magic << ", expected 0x" << kIdxImageMagic;
    throw FormatError(msg.str(), 0);
  }
  const auto count = detail::read_be32(bytes, 4);
  const auto rows = detail::read_be32(bytes, 8);
  const auto cols = detail::read_be32(bytes, 12);
  if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096)
    throw FormatError("implausible IDX image dimensions", 8);
  const std::size_t per_image = std::size_t{rows} * cols;
  const std::size_t needed = 16 + per_image * count;
  if (bytes.size() < needed) throw FormatError("truncated IDX payload", bytes.size());

  std::vector<Bitmap> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Bitmap b(static_cast<int>(cols), static_cast<int>(rows));
    auto first = bytes.begin() + static_cast<std::ptrdiff_t>(16 + i * per_image);
    std::copy(first, first + static_cast<std::ptrdiff_t>(per_image), b.values.begin());
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<Bitmap> load_idx(const std::filesystem::path& path) {
  auto bytes = detail::read_file(path);
  return parse_idx(bytes);
}

inline void save_idx(const std::filesystem::path& path, std::span<const Bitmap> images) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const int w = images.empty() ? kImageSize : images.front().width;
  const int h = images.empty() ? kImageSize : images.front().height;
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(images.size()));
  detail::write_be32(out, static_cast<std::uint32_t>(h));
  detail::write_be32(out, static_cast<std::uint32_t>(w));
  for (const auto& img : images) {
    if (img.width != w || img.height != h) throw ContractError("IDX bundle needs uniform sizes");
    out.write(reinterpret_cast<const char*>(img.values.data()),
              static_cast<std::streamsize>(img.values.size()));
  }
}

// ---------------------------------------------------------------------------
// Material parameters

struct PropertyField {
  Bitmap bitmap;
  std::vector<double> young;
  std::vector<double> lame_lambda;
  std::vector<double> lame_mu;
  double poisson = kDefaultPoisson;

  [[nodiscard]] int width() const { return bitmap.width; }
  [[nodiscard]] int height() const { return bitmap.height; }
};

inline constexpr double young_from_gray(double beta) {
  return beta / 255.0 * (kMaxYoung - kMinYoung) + kMinYoung;
}

struct Lame {
  double lambda;
  double mu;
};

inline Lame lame_from_young(double young, double poisson) {
  return {young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson)),
          young / (2.0 * (1.0 + poisson))};
}

inline PropertyField to_property_field(const Bitmap& bitmap, double poisson = kDefaultPoisson) {
  if (!bitmap.valid()) throw ContractError("bitmap size does not match its dimensions");
  if (!(poisson < 0.5)) throw ConfigError("Poisson's ratio >= 0.5 is incompressible");
  if (!(poisson > 0.0)) throw ConfigError("Poisson's ratio must be positive");
  PropertyField f;
  f.bitmap = bitmap;
  f.poisson = poisson;
  const auto n = bitmap.values.size();
  f.young.resize(n);
  f.lame_lambda.resize(n);
  f.lame_mu.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    f.young[i] = young_from_gray(bitmap.values[i]);
    const auto [lambda, mu] = lame_from_young(f.young[i], poisson);
    f.lame_lambda[i] = lambda;
    f.lame_mu[i] = mu;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Energy curves

using CurveValues = std::array<double, kCurvePoints>;

// Equal increments from 0 to `max_displacement`.
inline CurveValues canonical_displacements(double max_displacement = kMaxDisplacement) {
  CurveValues d{};
  for (int i = 0; i < kCurvePoints; ++i)
    d[i] = max_displacement * static_cast<double>(i) / (kCurvePoints - 1);
  return d;
}

struct EnergyCurve {
  CurveValues displacements = canonical_displacements();
  CurveValues energies{};
  bool normalized = false;

  [[nodiscard]] bool monotone_increasing() const {
    for (int i = 1; i < kCurvePoints; ++i)
      if (!(energies[i] > energies[i - 1])) return false;
    return true;
  }
  [[nodiscard]] double final_energy() const { return energies.back(); }
};

inline EnergyCurve normalize(EnergyCurve curve, double scale) {
  if (!(scale > 0.0)) throw ConfigError("normalization constant must be positive");
  for (auto& e : curve.energies) e /= scale;
  curve.normalized = true;
  return curve;
}

// Dataset-level normalization constant: median final-step energy over the
// training split, so normalized final values cluster around 1.
inline double normalization_constant(std::span<const EnergyCurve> raw_training_curves) {
  if (raw_training_curves.empty()) throw DataError("no curves to normalize");
  std::vector<double> finals;
  finals.reserve(raw_training_curves.size());
  for (const auto& c : raw_training_curves) finals.push_back(c.final_energy());
  std::sort(finals.begin(), finals.end());
  const auto n = finals.size();
  const double median = n % 2 ? finals[n / 2] : 0.5 * (finals[n / 2 - 1] + finals[n / 2]);
  if (!(median > 0.0)) throw DataError("median final energy is not positive");
  return median;
}

// ---------------------------------------------------------------------------
// Cubic target polynomials a x^3 + b x^2 + c x, x = displacement / max displacement

struct PolyCoeffs {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;

  [[nodiscard]] double operator()(double x) const { return ((a * x + b) * x + c) * x; }
  friend bool operator==(const PolyCoeffs&, const PolyCoeffs&) = default;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  [[nodiscard]] bool contains(double v) const { return v >= lo && v <= hi; }
  [[nodiscard]] double mid() const { return 0.5 * (lo + hi); }
  [[nodiscard]] double width() const { return hi - lo; }
};

struct CoeffRanges {
  Interval a;
  Interval b;
  Interval c;
};

// Coefficient ranges observed over the reference dataset.
inline constexpr CoeffRanges kReferenceCoeffRanges{
    {-0.0162, -0.0047}, {0.6346, 1.3968}, {0.00532, 0.4114}};

inline bool in_reference_range(const PolyCoeffs& p) {
  return kReferenceCoeffRanges.a.contains(p.a) && kReferenceCoeffRanges.b.contains(p.b) &&
         kReferenceCoeffRanges.c.contains(p.c);
}

// The three targets used in the polynomial design study, highest first.
inline constexpr std::array<PolyCoeffs, 3> kReferenceTargets{
    PolyCoeffs{-0.014, 1.368, 0.057}, PolyCoeffs{-0.011, 0.919, 0.062},
    PolyCoeffs{-0.013, 0.709, 0.276}};

struct CubicFit {
  PolyCoeffs coeffs;
  double residual = 0.0;  // root of the summed squared residuals
};

inline CurveValues normalized_abscissa(const EnergyCurve& curve) {
  CurveValues x{};
  const double dmax = curve.displacements.back();
  for (int i = 0; i < kCurvePoints; ++i) x[i] = dmax > 0.0 ? curve.displacements[i] / dmax : 0.0;
  return x;
}

// Zero-intercept least squares through the normal equations, solved with a
// column-pivoting QR so rank-deficient abscissae still produce a solution.
inline CubicFit fit_cubic(const EnergyCurve& curve) {
  const bool all_zero = std::all_of(curve.energies.begin(), curve.energies.end(),
                                    [](double e) { return e == 0.0; });
  if (all_zero) return {};
  const auto x = normalized_abscissa(curve);
  Eigen::Matrix<double, kCurvePoints, 3> design;
  Eigen::Matrix<double, kCurvePoints, 1> rhs;
  for (int i = 0; i < kCurvePoints; ++i) {
    design(i, 0) = x[i] * x[i] * x[i];
    design(i, 1) = x[i] * x[i];
    design(i, 2) = x[i];
    rhs(i) = curve.energies[i];
  }
  const Eigen::Matrix3d normal = design.transpose() * design;
  const Eigen::Vector3d moment = design.transpose() * rhs;
  Eigen::ColPivHouseholderQR<Eigen::Matrix3d> qr(normal);
  if (qr.rank() == 0) return {};
  const Eigen::Vector3d sol = qr.solve(moment);
  CubicFit fit{{sol(0), sol(1), sol(2)}, (design * sol - rhs).norm()};
  return fit;
}

inline EnergyCurve eval_polynomial(const PolyCoeffs& p, const CurveValues& normalized_x,
                                   double max_displacement = kMaxDisplacement) {
  EnergyCurve curve;
  for (int i = 0; i < kCurvePoints; ++i) {
    curve.displacements[i] = normalized_x[i] * max_displacement;
    curve.energies[i] = p(normalized_x[i]);
  }
  curve.normalized = true;
  return curve;
}

inline EnergyCurve eval_polynomial(const PolyCoeffs& p) {
  return eval_polynomial(p, canonical_displacements(1.0));
}

// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline PolyCoeffs sample_polynomial(const CoeffRanges& ranges, std::mt19937_64& rng) {
  for (const auto* iv : {&ranges.a, &ranges.b, &ranges.c})
    if (!(iv->lo <= iv->hi)) throw ConfigError("empty coefficient interval");
  auto draw = [&rng](const Interval& iv) { return iv.lo + (iv.hi - iv.lo) * uniform01(rng); };
  PolyCoeffs p;
  p.a = draw(ranges.a);
  p.b = draw(ranges.b);
  p.c = draw(ranges.c);
  return p;
}

// ---------------------------------------------------------------------------
// Curve CSV: sample_id,d0..d12,psi0..psi12

struct CurveRecord {
  std::int64_t sample_id = 0;
  EnergyCurve curve;
};

inline std::string curve_csv_header() {
  std::string h = "sample_id";
  for (int i = 0; i < kCurvePoints; ++i) h += ",d" + std::to_string(i);
  for (int i = 0; i < kCurvePoints; ++i) h += ",psi" + std::to_string(i);
  return h;
}

inline void write_curve_csv(const std::filesystem::path& path, std::span<const CurveRecord> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << curve_csv_header() << '\n';
  for (const auto& r : rows) {
    out << r.sample_id;
    for (double d : r.curve.displacements) out << ',' << io::format_double(d);
    for (double e : r.curve.energies) out << ',' << io::format_double(e);
    out << '\n';
  }
}

inline std::vector<CurveRecord> read_curve_csv(const std::filesystem::path& path,
                                               bool normalized = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty curve file");
  std::string header;
  for (char ch : line)
    if (ch != ' ' && ch != '\r') header += ch;
  if (header != curve_csv_header()) throw DataError(path.string() + ": unexpected curve header");
  std::vector<CurveRecord> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(io::trim(cell));
    if (cells.size() != 1 + 2 * kCurvePoints)
      throw DataError(path.string() + ": line " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " fields");
    CurveRecord r;
    try {
      r.sample_id = std::stoll(cells[0]);
      for (int i = 0; i < kCurvePoints; ++i) {
        r.curve.displacements[i] = std::stod(cells[1 + i]);
        r.curve.energies[i] = std::stod(cells[1 + kCurvePoints + i]);
      }
    } catch (const std::logic_error&) {
      throw DataError(path.string() + ": line " + std::to_string(line_no) + " is not numeric");
    }
    r.curve.normalized = normalized;
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Dataset manifest

struct DatasetManifest {
  std::int64_t train_size = 0;
  std::int64_t test_size = 0;
  double normalization = 1.0;
  double poisson = kDefaultPoisson;
  int subdivision = 2;
  CurveValues displacements = canonical_displacements();

  [[nodiscard]] io::KeyValue to_key_value() const {
    io::KeyValue kv;
    kv.set("train_size", train_size);
    kv.set("test_size", test_size);
    kv.set("normalization", normalization);
    kv.set("normalization_rule", "median_final_energy_train");
    kv.set("poisson", poisson);
    kv.set("subdivision", subdivision);
    std::string d;
    for (int i = 0; i < kCurvePoints; ++i) d += (i ? "," : "") + io::format_double(displacements[i]);
    kv.set("displacements", d);
    return kv;
  }

  static DatasetManifest from_key_value(const io::KeyValue& kv) {
    DatasetManifest m;
    m.train_size = kv.get_int("train_size", 0);
    m.test_size = kv.get_int("test_size", 0);
    m.normalization = kv.get_double("normalization", 1.0);
    m.poisson = kv.get_double("poisson", kDefaultPoisson);
    m.subdivision = static_cast<int>(kv.get_int("subdivision", 2));
    auto d = kv.get_doubles("displacements");
    if (!d.empty()) {
      if (d.size() != kCurvePoints) throw DataError("manifest: displacements needs 13 values");
      std::copy(d.begin(), d.end(), m.displacements.begin());
    }
    return m;
  }
};

}  // namespace microdiff
