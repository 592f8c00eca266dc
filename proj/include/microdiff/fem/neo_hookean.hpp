#pragma once

// Compressible Neo-Hookean energy in plane strain:
//   psi = mu/2 (F:F - 3 - 2 ln J) + lambda/2 (1/2 (J^2 - 1) - ln J)
// The 2-D gradient is embedded as diag(F, 1), so F:F picks up the unit
// out-of-plane stretch and J = det of the in-plane block.

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "microdiff/errors.hpp"

namespace microdiff::fem {

using Mat2 = Eigen::Matrix2d;
// Fourth-order tangent dP_iJ/dF_kL flattened with index 2*i + J.
using Tangent = Eigen::Matrix4d;

class InversionError : public NumericalError {
 public:
  InversionError(double det, double x, double y)
      : NumericalError("element inversion: det F = " + std::to_string(det) + " at (" +
                       std::to_string(x) + ", " + std::to_string(y) + ")"),
        det_(det), x_(x), y_(y) {}
  [[nodiscard]] double det() const noexcept { return det_; }
  [[nodiscard]] double x() const noexcept { return x_; }
  [[nodiscard]] double y() const noexcept { return y_; }

 private:
  double det_, x_, y_;
};

inline double psi_density(const Mat2& F, double lambda, double mu,
                          double x = std::numeric_limits<double>::quiet_NaN(),
                          double y = std::numeric_limits<double>::quiet_NaN()) {
  const double J = F.determinant();
  if (!(J > 0.0)) throw InversionError(J, x, y);
  const double lnJ = std::log(J);
  const double trace_c = F.squaredNorm() + 1.0;
  return 0.5 * mu * (trace_c - 3.0 - 2.0 * lnJ) + 0.5 * lambda * (0.5 * (J * J - 1.0) - lnJ);
}

// First Piola-Kirchhoff stress P = mu (F - F^-T) + lambda/2 (J^2 - 1) F^-T.
inline Mat2 first_piola(const Mat2& F, double lambda, double mu) {
  const double J = F.determinant();
  const Mat2 f_inv_t = F.inverse().transpose();
  return mu * (F - f_inv_t) + 0.5 * lambda * (J * J - 1.0) * f_inv_t;
}

inline Tangent material_tangent(const Mat2& F, double lambda, double mu) {
  const double J = F.determinant();
  const Mat2 Fi = F.inverse();
  const double c_swap = mu - 0.5 * lambda * (J * J - 1.0);
  const double c_vol = lambda * J * J;
  Tangent A;
  for (int i = 0; i < 2; ++i)
    for (int J_ = 0; J_ < 2; ++J_)
      for (int k = 0; k < 2; ++k)
        for (int L = 0; L < 2; ++L) {
          double v = c_swap * Fi(L, i) * Fi(J_, k) + c_vol * Fi(J_, i) * Fi(L, k);
          if (i == k && J_ == L) v += mu;
          A(2 * i + J_, 2 * k + L) = v;
        }
  return A;
}

}  // namespace microdiff::fem
