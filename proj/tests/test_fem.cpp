#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "microdiff/dataset.hpp"
#include "microdiff/fem/solver.hpp"
#include "test_util.hpp"

using namespace microdiff;
using namespace microdiff::fem;

namespace {

Bitmap uniform_bitmap(int w, int h, std::uint8_t v) { return Bitmap(w, h, v); }

Bitmap random_bitmap(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Bitmap b(w, h);
  for (auto& v : b.values) v = static_cast<std::uint8_t>(rng() & 0xFF);
  return b;
}

// A digit-like blob: a thick ring on a soft background.
Bitmap ring_bitmap() {
  Bitmap b;
  for (int r = 0; r < kImageSize; ++r)
    for (int c = 0; c < kImageSize; ++c) {
      const double d = std::hypot(r - 13.5, c - 13.5);
      b.at(r, c) = d > 6.0 && d < 10.0 ? 255 : (d <= 6.0 ? 40 : 0);
    }
  return b;
}

Mat2 random_f(std::mt19937_64& rng, double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  for (;;) {
    Mat2 F;
    F << 1.0 + u(rng), u(rng), u(rng), 1.0 + u(rng);
    if (F.determinant() > 1e-3) return F;
  }
}

}  // namespace

TEST(NeoHookean, ZeroAtIdentity) {
  EXPECT_EQ(psi_density(Mat2::Identity(), 3.0, 2.0), 0.0);
}

TEST(NeoHookean, HandEvaluatedStretch) {
  // diag(2, 0.5, 1): F:F = 4 + 0.25 + 1, det = 1, so the volumetric bracket vanishes.
  const double oracle = 0.5 * 1.0 * (4.0 + 0.25 + 1.0 - 3.0 - 0.0) + 0.5 * 1.0 * (0.5 * (1.0 - 1.0) - 0.0);
  ASSERT_DOUBLE_EQ(oracle, 1.125);
  Mat2 F;
  F << 2.0, 0.0, 0.0, 0.5;
  EXPECT_NEAR(psi_density(F, 1.0, 1.0), 1.125, 1e-14);
}

TEST(NeoHookean, DivergesAsDetVanishes) {
  double last = 0.0;
  for (double j : {1e-1, 1e-3, 1e-6, 1e-9}) {
    Mat2 F;
    F << 1.0, 0.0, 0.0, j;
    const double psi = psi_density(F, 1.0, 1.0);
    EXPECT_GT(psi, last);
    last = psi;
  }
  EXPECT_GT(last, 10.0);
}

TEST(NeoHookean, InversionCarriesLocation) {
  Mat2 F;
  F << 1.0, 0.0, 0.0, -0.1;
  try {
    psi_density(F, 1.0, 1.0, 2.5, 3.5);
    FAIL() << "expected InversionError";
  } catch (const InversionError& e) {
    EXPECT_EQ(e.x(), 2.5);
    EXPECT_EQ(e.y(), 3.5);
    EXPECT_LT(e.det(), 0.0);
  }
}

TEST(NeoHookean, NonNegativeOverRandomDeformations) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> mod(0.1, 50.0);
  for (int k = 0; k < 10000; ++k) {
    const Mat2 F = random_f(rng, 0.9);
    EXPECT_GE(psi_density(F, mod(rng), mod(rng)), 0.0);
  }
}

TEST(NeoHookean, RotationsCarryNoEnergy) {
  for (double th : {0.1, 0.7, 2.0, -1.3}) {
    Mat2 R;
    R << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    EXPECT_NEAR(psi_density(R, 2.0, 3.0), 0.0, 1e-13);
  }
}

TEST(NeoHookean, StressFreeReferenceByFiniteDifferences) {
  const double h = 1e-6;
  Mat2 grad;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      Mat2 fp = Mat2::Identity(), fm = Mat2::Identity();
      fp(i, j) += h;
      fm(i, j) -= h;
      grad(i, j) = (psi_density(fp, 1.0, 1.0) - psi_density(fm, 1.0, 1.0)) / (2 * h);
    }
  EXPECT_LE(grad.norm(), 1e-7);
  EXPECT_LE(first_piola(Mat2::Identity(), 1.0, 1.0).norm(), 1e-15);
}

TEST(NeoHookean, PiolaMatchesEnergyGradient) {
  std::mt19937_64 rng(23);
  const double h = 1e-6;
  for (int k = 0; k < 50; ++k) {
    const Mat2 F = random_f(rng, 0.4);
    const Mat2 P = first_piola(F, 12.0, 8.0);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        Mat2 fp = F, fm = F;
        fp(i, j) += h;
        fm(i, j) -= h;
        const double fd = (psi_density(fp, 12.0, 8.0) - psi_density(fm, 12.0, 8.0)) / (2 * h);
        EXPECT_NEAR(P(i, j), fd, 1e-5 * (1.0 + std::abs(fd)));
      }
  }
}

TEST(NeoHookean, TangentMatchesPiolaGradient) {
  std::mt19937_64 rng(29);
  const double h = 1e-6;
  for (int k = 0; k < 50; ++k) {
    const Mat2 F = random_f(rng, 0.4);
    const Tangent A = material_tangent(F, 12.0, 8.0);
    for (int k2 = 0; k2 < 2; ++k2)
      for (int l = 0; l < 2; ++l) {
        Mat2 fp = F, fm = F;
        fp(k2, l) += h;
        fm(k2, l) -= h;
        const Mat2 dP = (first_piola(fp, 12.0, 8.0) - first_piola(fm, 12.0, 8.0)) / (2 * h);
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j)
            EXPECT_NEAR(A(2 * i + j, 2 * k2 + l), dP(i, j), 1e-5 * (1.0 + std::abs(dP(i, j))));
      }
  }
}

TEST(Mesh, ElementCounts) {
  const auto f = to_property_field(Bitmap{});
  EXPECT_EQ(build_mesh(f, 1).element_count(), 1568);
  EXPECT_EQ(build_mesh(f, 2).element_count(), 6272);
  EXPECT_EQ(build_mesh(f, 5).element_count(), 39200);
}

TEST(Mesh, SinglePixel) {
  const auto m = build_mesh(to_property_field(uniform_bitmap(1, 1, 0)), 1);
  EXPECT_EQ(m.element_count(), 2);
  std::set<int> used;
  for (const auto& e : m.elements) used.insert(e.begin(), e.end());
  EXPECT_EQ(used.size(), 9u);
  EXPECT_EQ(m.node_count(), 9);
}

TEST(Mesh, GeometryAndPixelOwnership) {
  const auto field = to_property_field(random_bitmap(5, 4, 3));
  for (int s : {1, 2, 3}) {
    const auto m = build_mesh(field, s);
    std::vector<int> per_pixel(20, 0);
    double area = 0.0;
    for (int e = 0; e < m.element_count(); ++e) {
      const double j = reference_jacobian(m, e);
      EXPECT_GT(j, 0.0);
      area += 0.5 * j;
      const int p = m.elem_pixel[static_cast<std::size_t>(e)];
      ++per_pixel[static_cast<std::size_t>(p)];
      EXPECT_EQ(m.elem_mu[static_cast<std::size_t>(e)], field.lame_mu[static_cast<std::size_t>(p)]);
      EXPECT_EQ(m.elem_lambda[static_cast<std::size_t>(e)], field.lame_lambda[static_cast<std::size_t>(p)]);
      // Element centroid lies inside its pixel (image row 0 at the top).
      const auto& el = m.elements[static_cast<std::size_t>(e)];
      const Eigen::Vector2d c = (m.nodes[el[0]] + m.nodes[el[1]] + m.nodes[el[2]]) / 3.0;
      EXPECT_EQ(static_cast<int>(c.x()), p % 5);
      EXPECT_EQ(static_cast<int>(4.0 - c.y()), p / 5);
    }
    for (int n : per_pixel) EXPECT_EQ(n, 2 * s * s);
    EXPECT_NEAR(area, 20.0, 1e-12);
    EXPECT_EQ(m.bottom_nodes.size(), static_cast<std::size_t>(m.nodes_x));
    for (int n : m.top_nodes) EXPECT_DOUBLE_EQ(m.nodes[static_cast<std::size_t>(n)].y(), 4.0);
  }
}

TEST(Mesh, RejectsZeroSubdivision) {
  EXPECT_THROW(build_mesh(to_property_field(Bitmap{}), 0), ConfigError);
}

TEST(Solver, TangentMatchesResidualFiniteDifferences) {
  const auto mesh = build_mesh(to_property_field(random_bitmap(3, 3, 5)), 1);
  Solver solver(mesh, uniaxial_constraints(mesh));
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  Eigen::VectorXd disp(mesh.dof_count());
  for (int i = 0; i < disp.size(); ++i) disp(i) = u(rng);
  const auto ev = solver.evaluate(disp, true);
  const Eigen::MatrixXd lower = Eigen::MatrixXd(ev.k_ff);
  Eigen::MatrixXd K = lower + lower.transpose();
  K.diagonal() = lower.diagonal();
  const auto& free = solver.free_dofs();
  const double h = 1e-6;
  double max_err = 0.0, scale = 0.0;
  for (std::size_t j = 0; j < free.size(); ++j) {
    Eigen::VectorXd up = disp, dn = disp;
    up(free[j]) += h;
    dn(free[j]) -= h;
    const Eigen::VectorXd col = (solver.evaluate(up, false).residual - solver.evaluate(dn, false).residual) / (2 * h);
    max_err = std::max(max_err, (col - K.col(static_cast<Eigen::Index>(j))).cwiseAbs().maxCoeff());
    scale = std::max(scale, col.cwiseAbs().maxCoeff());
  }
  EXPECT_LE(max_err, 1e-5 * scale);
}

TEST(Solver, ResidualMatchesEnergyGradient) {
  const auto mesh = build_mesh(to_property_field(random_bitmap(2, 3, 8)), 1);
  Solver solver(mesh, uniaxial_constraints(mesh));
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  Eigen::VectorXd disp(mesh.dof_count());
  for (int i = 0; i < disp.size(); ++i) disp(i) = u(rng);
  const auto r = solver.evaluate(disp, false).residual;
  const double h = 1e-6;
  const auto& free = solver.free_dofs();
  for (std::size_t j = 0; j < free.size(); ++j) {
    Eigen::VectorXd up = disp, dn = disp;
    up(free[j]) += h;
    dn(free[j]) -= h;
    const double fd = (solver.total_energy(up) - solver.total_energy(dn)) / (2 * h);
    EXPECT_NEAR(r(static_cast<Eigen::Index>(j)), fd, 1e-5 * (1.0 + std::abs(fd)));
  }
}

TEST(Solver, UnloadedStepIsTrivial) {
  const auto mesh = build_mesh(to_property_field(random_bitmap(4, 4, 1)), 1);
  Solver solver(mesh, uniaxial_constraints(mesh));
  const auto s = solver.solve_step(solver.zero_state(), 0.0);
  EXPECT_TRUE(s.converged);
  EXPECT_LE(s.newton_iters, 1);
  EXPECT_EQ(s.u.norm(), 0.0);
  EXPECT_EQ(s.energy, 0.0);
}

TEST(Solver, AffineDirichletOracle) {
  const auto field = to_property_field(uniform_bitmap(4, 4, 128));
  for (int s : {1, 2}) {
    const auto mesh = build_mesh(field, s);
    Mat2 F;
    F << 1.12, 0.07, -0.03, 0.91;
    Solver solver(mesh, affine_constraints(mesh, F));
    const auto state = solver.solve_step(solver.zero_state(), 1.0);
    const double oracle = 16.0 * psi_density(F, field.lame_lambda[0], field.lame_mu[0]);
    EXPECT_NEAR(state.energy, oracle, 1e-8 * oracle);
    // The interior follows the affine map too.
    for (int n = 0; n < mesh.node_count(); ++n) {
      const Eigen::Vector2d expect = (F - Mat2::Identity()) * mesh.nodes[static_cast<std::size_t>(n)];
      EXPECT_NEAR(state.u(2 * n), expect.x(), 1e-9);
      EXPECT_NEAR(state.u(2 * n + 1), expect.y(), 1e-9);
    }
  }
}

TEST(Solver, ModuliScalingIsLinear) {
  const auto soft = to_property_field(uniform_bitmap(4, 6, 0));
  const auto stiff = to_property_field(uniform_bitmap(4, 6, 255));
  const LoadSchedule sched = LoadSchedule::for_height(6.0);
  const auto a = run_uniaxial_extension(soft, sched, 1);
  const auto b = run_uniaxial_extension(stiff, sched, 1);
  for (int i = 1; i < kCurvePoints; ++i)
    EXPECT_NEAR(b.curve.energies[i] / a.curve.energies[i], 100.0, 1e-8) << "step " << i;
  EXPECT_NEAR(b.curve.energies[1] / a.curve.energies[1], 100.0, 1e-10);
}

TEST(Solver, SolveRequiresConvergedTolerance) {
  const auto mesh = build_mesh(to_property_field(ring_bitmap()), 1);
  SolverOptions opts;
  opts.max_newton = 0;
  opts.max_bisection = 0;
  Solver solver(mesh, uniaxial_constraints(mesh), opts);
  EXPECT_THROW(solver.solve_step(solver.zero_state(), 7.0), NonConvergenceError);
}

TEST(Solver, BisectionRecoversFromLargeIncrement) {
  const auto mesh = build_mesh(to_property_field(ring_bitmap()), 1);
  SolverOptions opts;
  opts.max_newton = 2;
  opts.reuse_factorization = false;
  opts.max_bisection = 0;
  Solver single(mesh, uniaxial_constraints(mesh), opts);
  ASSERT_THROW(single.solve_step(single.zero_state(), 14.0), NonConvergenceError);
  opts.max_bisection = 6;
  Solver strict(mesh, uniaxial_constraints(mesh), opts);
  const auto s = strict.solve_step(strict.zero_state(), 14.0);
  EXPECT_TRUE(s.converged);
  Solver reference(mesh, uniaxial_constraints(mesh));
  auto state = reference.zero_state();
  for (double d : canonical_displacements()) state = reference.solve_step(state, d);
  EXPECT_NEAR(s.energy, state.energy, 1e-6 * state.energy);
}

TEST(Uniaxial, CurveIsMonotoneAndStartsAtZero) {
  const auto r = run_uniaxial_extension(to_property_field(ring_bitmap()), LoadSchedule{}, 1);
  EXPECT_EQ(r.curve.energies[0], 0.0);
  EXPECT_TRUE(r.curve.monotone_increasing());
  EXPECT_EQ(r.element_count, 1568);
  EXPECT_FALSE(r.curve.normalized);
}

TEST(Uniaxial, RepeatedSolvesAreBitwiseIdentical) {
  const auto f = to_property_field(ring_bitmap());
  const auto a = run_uniaxial_extension(f, LoadSchedule{}, 1);
  const auto b = run_uniaxial_extension(f, LoadSchedule{}, 1);
  EXPECT_EQ(a.curve.energies, b.curve.energies);
}

TEST(Uniaxial, FailingStepIsReported) {
  SolverOptions opts;
  opts.max_newton = 0;
  opts.max_bisection = 0;
  try {
    run_uniaxial_extension(to_property_field(ring_bitmap()), LoadSchedule{}, 1, opts);
    FAIL() << "expected NonConvergenceError";
  } catch (const NonConvergenceError& e) {
    EXPECT_EQ(e.step(), 1);
  }
}

TEST(Uniaxial, ScheduleValidation) {
  LoadSchedule s;
  s.displacements[3] = s.displacements[2];
  EXPECT_THROW(run_uniaxial_extension(to_property_field(Bitmap{}), s, 1), ConfigError);
  EXPECT_EQ(LoadSchedule::for_height(28.0).displacements.back(), 14.0);
}

TEST(Uniaxial, DisplacementDump) {
  test::TempDir dir;
  const auto field = to_property_field(uniform_bitmap(3, 2, 100));
  int calls = 0;
  run_uniaxial_extension(field, LoadSchedule::for_height(2.0), 1, {},
                         [&](int step, const Mesh& m, const DeformationState& st) {
                           if (step == 12) write_displacement_grid(dir / "u.bin", m, st, step);
                           ++calls;
                         });
  EXPECT_EQ(calls, kCurvePoints);
  const auto bytes = test::read_bytes(dir / "u.bin");
  ASSERT_EQ(bytes.size(), 12u + 8u * 2u * 7u * 5u);
  std::int32_t header[3];
  std::memcpy(header, bytes.data(), sizeof(header));
  EXPECT_EQ(header[0], 7);
  EXPECT_EQ(header[1], 5);
  EXPECT_EQ(header[2], 12);
  double top_uy;
  std::memcpy(&top_uy, bytes.data() + 12 + 8 * (2 * (4 * 7 + 3) + 1), sizeof(double));
  EXPECT_DOUBLE_EQ(top_uy, 1.0);
}

TEST(Dataset, ParallelSolveMatchesSerial) {
  std::vector<Bitmap> images{ring_bitmap(), random_bitmap(28, 28, 4), Bitmap(28, 28, 200)};
  SolveSettings serial;
  serial.subdivision = 1;
  SolveSettings parallel = serial;
  parallel.jobs = 3;
  const auto a = solve_curves(images, serial);
  const auto b = solve_curves(images, parallel);
  for (std::size_t i = 0; i < images.size(); ++i) EXPECT_EQ(a[i].curve.energies, b[i].curve.energies);
}

TEST(Dataset, WriteLoadRoundTrip) {
  test::TempDir dir;
  std::vector<Bitmap> images{ring_bitmap(), Bitmap(28, 28, 90)};
  SolveSettings s;
  s.subdivision = 1;
  const auto raw = solve_curves(images, s);
  std::vector<EnergyCurve> curves{raw[0].curve, raw[1].curve};
  DatasetManifest m;
  m.train_size = 2;
  m.subdivision = 1;
  m.normalization = normalization_constant(curves);
  write_dataset(dir.path(), images, raw, m);
  const auto d = load_dataset(dir.path());
  EXPECT_EQ(d.images, images);
  ASSERT_EQ(d.curves.size(), 2u);
  EXPECT_EQ(d.curves[1].curve.energies.back(), raw[1].curve.energies.back() / m.normalization);
  EXPECT_EQ(d.manifest.normalization, m.normalization);
}
