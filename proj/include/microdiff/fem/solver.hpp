#pragma once

// Displacement-controlled Newton solver for the plane-strain Neo-Hookean
// body on a quadratic-triangle mesh.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/CholmodSupport>
#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "microdiff/errors.hpp"
#include "microdiff/fem/mesh.hpp"
#include "microdiff/fem/neo_hookean.hpp"
#include "microdiff/mnist_data.hpp"

namespace microdiff::fem {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;

struct SolverOptions {
  double newton_tol = 1e-8;  // relative to the step's initial out-of-balance force
  int max_newton = 20;
  int max_bisection = 6;
  // Reuse the last tangent factorization across iterations and steps while
  // it keeps contracting the residual by at least kRefactorRatio.
  bool reuse_factorization = true;
};

inline constexpr double kRefactorRatio = 0.5;

// Prescribed degrees of freedom. At load parameter `p` the value of
// dofs[i] is p * unit_values[i].
struct Constraints {
  std::vector<int> dofs;
  std::vector<double> unit_values;
};

// Bottom edge clamped; top edge moves vertically by the load parameter with
// its horizontal motion held at zero; lateral edges free.
inline Constraints uniaxial_constraints(const Mesh& m) {
  Constraints c;
  for (int n : m.bottom_nodes) {
    c.dofs.insert(c.dofs.end(), {2 * n, 2 * n + 1});
    c.unit_values.insert(c.unit_values.end(), {0.0, 0.0});
  }
  for (int n : m.top_nodes) {
    c.dofs.insert(c.dofs.end(), {2 * n, 2 * n + 1});
    c.unit_values.insert(c.unit_values.end(), {0.0, 1.0});
  }
  return c;
}

// Whole-boundary Dirichlet data u = p * (F - I) X.
inline Constraints affine_constraints(const Mesh& m, const Mat2& F) {
  Constraints c;
  const Mat2 G = F - Mat2::Identity();
  for (int n : m.boundary_nodes) {
    const Eigen::Vector2d u = G * m.nodes[static_cast<std::size_t>(n)];
    c.dofs.insert(c.dofs.end(), {2 * n, 2 * n + 1});
    c.unit_values.insert(c.unit_values.end(), {u.x(), u.y()});
  }
  return c;
}

struct DeformationState {
  Eigen::VectorXd u;  // all nodal displacements, interleaved (x, y)
  double applied = 0.0;
  bool converged = true;
  int newton_iters = 0;
  double residual_norm = 0.0;
  double energy = 0.0;
};

class NonConvergenceError : public NumericalError {
 public:
  NonConvergenceError(const std::string& reason, double last_residual, int step = -1)
      : NumericalError(reason + " (last residual " + std::to_string(last_residual) +
                       (step >= 0 ? ", step " + std::to_string(step) : std::string()) + ")"),
        reason_(reason), last_residual_(last_residual), step_(step) {}
  [[nodiscard]] const std::string& reason() const noexcept { return reason_; }
  [[nodiscard]] double last_residual() const noexcept { return last_residual_; }
  [[nodiscard]] int step() const noexcept { return step_; }

 private:
  std::string reason_;
  double last_residual_;
  int step_;
};

class Solver {
 public:
  struct Evaluation {
    double energy = 0.0;
    Eigen::VectorXd residual;  // free dofs only
    SparseMatrix k_ff;         // lower triangle only
    SparseMatrix k_fc;
  };

  Solver(const Mesh& mesh, Constraints constraints, SolverOptions options = {})
      : mesh_(mesh), constraints_(std::move(constraints)), options_(options) {
    precompute_geometry();
    build_dof_maps();
    build_patterns();
  }

  [[nodiscard]] const Mesh& mesh() const { return mesh_; }
  [[nodiscard]] int free_count() const { return static_cast<int>(free_dofs_.size()); }
  [[nodiscard]] const std::vector<int>& free_dofs() const { return free_dofs_; }

  [[nodiscard]] DeformationState zero_state() const {
    DeformationState s;
    s.u = Eigen::VectorXd::Zero(mesh_.dof_count());
    return s;
  }

  // Energy, free residual and (optionally) tangent blocks at full field u.
  [[nodiscard]] Evaluation evaluate(const Eigen::VectorXd& u, bool with_tangent) const {
    Evaluation ev;
    ev.residual = Eigen::VectorXd::Zero(free_count());
    if (with_tangent) {
      ev.k_ff = k_ff_pattern_;
      ev.k_fc = k_fc_pattern_;
      std::fill_n(ev.k_ff.valuePtr(), ev.k_ff.nonZeros(), 0.0);
      std::fill_n(ev.k_fc.valuePtr(), ev.k_fc.nonZeros(), 0.0);
    }
    double energy = 0.0;
    Eigen::Matrix<double, 12, 1> u_local;
    Eigen::Matrix<double, 12, 1> r_local;
    Eigen::Matrix<double, 12, 12> k_local;
    Eigen::Matrix<double, 4, 12> B;
    for (int e = 0; e < mesh_.element_count(); ++e) {
      const auto& el = mesh_.elements[static_cast<std::size_t>(e)];
      for (int k = 0; k < 6; ++k) {
        u_local(2 * k) = u(2 * el[k]);
        u_local(2 * k + 1) = u(2 * el[k] + 1);
      }
      r_local.setZero();
      if (with_tangent) k_local.setZero();
      const double lambda = mesh_.elem_lambda[static_cast<std::size_t>(e)];
      const double mu = mesh_.elem_mu[static_cast<std::size_t>(e)];
      for (int q = 0; q < 3; ++q) {
        const auto& g = grads_[static_cast<std::size_t>(3 * e + q)];
        B.setZero();
        for (int k = 0; k < 6; ++k) {
          // F_iJ = delta_iJ + sum_k u_ki g_kJ, flattened as 2i + J.
          B(0, 2 * k) = g(k, 0);
          B(1, 2 * k) = g(k, 1);
          B(2, 2 * k + 1) = g(k, 0);
          B(3, 2 * k + 1) = g(k, 1);
        }
        const Eigen::Vector4d f_flat = B * u_local + Eigen::Vector4d(1.0, 0.0, 0.0, 1.0);
        Mat2 F;
        F << f_flat(0), f_flat(1), f_flat(2), f_flat(3);
        const double w = weights_[static_cast<std::size_t>(3 * e + q)];
        const auto& xq = qpoints_[static_cast<std::size_t>(3 * e + q)];
        energy += w * psi_density(F, lambda, mu, xq.x(), xq.y());
        const Mat2 P = first_piola(F, lambda, mu);
        const Eigen::Vector4d p_flat(P(0, 0), P(0, 1), P(1, 0), P(1, 1));
        r_local.noalias() += w * B.transpose() * p_flat;
        if (with_tangent) {
          const Tangent A = material_tangent(F, lambda, mu);
          k_local.noalias() += w * B.transpose() * A * B;
        }
      }
      const std::size_t base = static_cast<std::size_t>(e) * 12;
      for (int a = 0; a < 12; ++a) {
        const int fa = dof_free_[static_cast<std::size_t>(el[a / 2] * 2 + a % 2)];
        if (fa >= 0) ev.residual(fa) += r_local(a);
      }
      if (with_tangent) {
        const std::size_t kbase = base * 12;
        double* ff = ev.k_ff.valuePtr();
        double* fc = ev.k_fc.valuePtr();
        for (int b = 0; b < 12; ++b)
          for (int a = 0; a < 12; ++a) {
            const auto idx = kbase + static_cast<std::size_t>(b * 12 + a);
            if (const int p = ff_pos_[idx]; p >= 0) ff[p] += k_local(a, b);
            if (const int p = fc_pos_[idx]; p >= 0) fc[p] += k_local(a, b);
          }
      }
    }
    ev.energy = energy;
    return ev;
  }

  [[nodiscard]] double total_energy(const Eigen::VectorXd& u) const {
    return evaluate(u, false).energy;
  }

  // Equilibrium at load `applied`, warm-started from `prior`. Failed
  // increments are bisected up to options.max_bisection times.
  DeformationState solve_step(const DeformationState& prior, double applied) {
    return solve_recursive(prior, applied, 0);
  }

 private:
  DeformationState solve_recursive(const DeformationState& prior, double applied, int depth) {
    try {
      return newton(prior, applied);
    } catch (const NumericalError& err) {
      if (depth >= options_.max_bisection) {
        const auto* nc = dynamic_cast<const NonConvergenceError*>(&err);
        throw NonConvergenceError(
            "Newton failed after load bisection: " + (nc ? nc->reason() : std::string(err.what())),
            nc ? nc->last_residual() : std::numeric_limits<double>::quiet_NaN());
      }
      const double mid = 0.5 * (prior.applied + applied);
      const auto half = solve_recursive(prior, mid, depth + 1);
      auto full = solve_recursive(half, applied, depth + 1);
      full.newton_iters += half.newton_iters;
      return full;
    }
  }

  void factorize(const SparseMatrix& k_ff) {
    if (!analyzed_llt_) {
      llt_.analyzePattern(k_ff);
      analyzed_llt_ = true;
    }
    llt_.factorize(k_ff);
    if (llt_.info() == Eigen::Success) {
      ldlt_active_ = false;
      has_factor_ = true;
      return;
    }
    if (!analyzed_ldlt_) {
      ldlt_.analyzePattern(k_ff);
      analyzed_ldlt_ = true;
    }
    ldlt_.factorize(k_ff);
    if (ldlt_.info() != Eigen::Success)
      throw NonConvergenceError("singular tangent", std::numeric_limits<double>::quiet_NaN());
    ldlt_active_ = true;
    has_factor_ = true;
  }

  Eigen::VectorXd linear_solve(const Eigen::VectorXd& rhs) const {
    return ldlt_active_ ? Eigen::VectorXd(ldlt_.solve(rhs)) : Eigen::VectorXd(llt_.solve(rhs));
  }

  DeformationState newton(const DeformationState& prior, double applied) {
    DeformationState s;
    s.u = prior.u;
    s.applied = applied;
    const double dp = applied - prior.applied;
    Eigen::VectorXd delta_c(static_cast<Eigen::Index>(constraints_.dofs.size()));
    for (std::size_t i = 0; i < constraints_.dofs.size(); ++i)
      delta_c(static_cast<Eigen::Index>(i)) = dp * constraints_.unit_values[i];

    // Tangent predictor: impose the boundary increment through the linearized
    // operator so the first iterate stays smooth near the loaded edge.
    auto ev = evaluate(s.u, true);
    const Eigen::VectorXd rhs = -(ev.residual + ev.k_fc * delta_c);
    const double reference = rhs.norm();
    for (std::size_t i = 0; i < constraints_.dofs.size(); ++i)
      s.u(constraints_.dofs[i]) += delta_c(static_cast<Eigen::Index>(i));
    if (reference == 0.0) {
      s.energy = dp != 0.0 ? total_energy(s.u) : ev.energy;
      return s;
    }
    if (!has_factor_ || !options_.reuse_factorization) factorize(ev.k_ff);
    Eigen::VectorXd du = linear_solve(rhs);
    s.newton_iters = 1;
    scatter_free(s.u, du, 1.0);

    double rnorm = std::numeric_limits<double>::infinity();
    double previous = reference;
    Eigen::VectorXd trial;
    for (int it = 0; it <= options_.max_newton; ++it) {
      ev = evaluate(s.u, false);
      rnorm = ev.residual.norm();
      if (!std::isfinite(rnorm)) throw NonConvergenceError("non-finite residual", rnorm);
      if (rnorm <= options_.newton_tol * reference) {
        s.converged = true;
        s.residual_norm = rnorm;
        s.energy = ev.energy;
        return s;
      }
      if (it == options_.max_newton) break;
      // A stale factorization is kept while it still contracts the residual fast.
      if (!options_.reuse_factorization || rnorm > kRefactorRatio * previous)
        factorize(evaluate(s.u, true).k_ff);
      previous = rnorm;
      du = linear_solve(-ev.residual);
      ++s.newton_iters;
      bool accepted = false;
      double alpha = 1.0;
      for (int ls = 0; ls < 10 && !accepted; ++ls, alpha *= 0.5) {
        trial = s.u;
        scatter_free(trial, du, alpha);
        try {
          const auto tv = evaluate(trial, false);
          if (tv.residual.norm() < rnorm || tv.energy < ev.energy) {
            s.u = std::move(trial);
            accepted = true;
          }
        } catch (const InversionError&) {
        }
      }
      if (!accepted) throw NonConvergenceError("line search failed", rnorm);
    }
    throw NonConvergenceError("Newton iteration limit reached", rnorm);
  }

  void scatter_free(Eigen::VectorXd& u, const Eigen::VectorXd& du, double alpha) const {
    for (std::size_t i = 0; i < free_dofs_.size(); ++i)
      u(free_dofs_[i]) += alpha * du(static_cast<Eigen::Index>(i));
  }

  void precompute_geometry() {
    // 3-point rule on the reference triangle, exact for quadratics.
    static constexpr std::array<std::array<double, 2>, 3> kPoints{
        {{1.0 / 6.0, 1.0 / 6.0}, {2.0 / 3.0, 1.0 / 6.0}, {1.0 / 6.0, 2.0 / 3.0}}};
    static constexpr double kWeight = 1.0 / 6.0;
    const auto n = static_cast<std::size_t>(mesh_.element_count()) * 3;
    grads_.resize(n);
    weights_.resize(n);
    qpoints_.resize(n);
    for (int e = 0; e < mesh_.element_count(); ++e) {
      const auto& el = mesh_.elements[static_cast<std::size_t>(e)];
      const Eigen::Vector2d x0 = mesh_.nodes[el[0]];
      Mat2 jac;
      jac.col(0) = mesh_.nodes[el[1]] - x0;
      jac.col(1) = mesh_.nodes[el[2]] - x0;
      const double det = jac.determinant();
      if (!(det > 0.0)) throw ContractError("mesh element with non-positive Jacobian");
      const Mat2 jinv_t = jac.inverse().transpose();
      for (int q = 0; q < 3; ++q) {
        const double xi = kPoints[q][0], eta = kPoints[q][1];
        const double l1 = 1.0 - xi - eta;
        // d/dxi and d/deta of the six P2 shape functions.
        Eigen::Matrix<double, 6, 2> dref;
        dref << -(4.0 * l1 - 1.0), -(4.0 * l1 - 1.0),  //
            4.0 * xi - 1.0, 0.0,                        //
            0.0, 4.0 * eta - 1.0,                       //
            4.0 * (l1 - xi), -4.0 * xi,                 //
            4.0 * eta, 4.0 * xi,                        //
            -4.0 * eta, 4.0 * (l1 - eta);
        Eigen::Matrix<double, 6, 2> g;
        for (int k = 0; k < 6; ++k) g.row(k) = (jinv_t * dref.row(k).transpose()).transpose();
        const auto idx = static_cast<std::size_t>(3 * e + q);
        grads_[idx] = g;
        weights_[idx] = kWeight * det;
        qpoints_[idx] = x0 + jac * Eigen::Vector2d(xi, eta);
      }
    }
  }

  void build_dof_maps() {
    const auto ndof = static_cast<std::size_t>(mesh_.dof_count());
    dof_free_.assign(ndof, -1);
    dof_con_.assign(ndof, -1);
    for (std::size_t i = 0; i < constraints_.dofs.size(); ++i) {
      const int d = constraints_.dofs[i];
      if (d < 0 || static_cast<std::size_t>(d) >= ndof) throw ContractError("constraint dof out of range");
      if (dof_con_[static_cast<std::size_t>(d)] >= 0) throw ContractError("dof constrained twice");
      dof_con_[static_cast<std::size_t>(d)] = static_cast<int>(i);
    }
    for (std::size_t d = 0; d < ndof; ++d)
      if (dof_con_[d] < 0) {
        dof_free_[d] = static_cast<int>(free_dofs_.size());
        free_dofs_.push_back(static_cast<int>(d));
      }
  }

  void build_patterns() {
    std::vector<Eigen::Triplet<double>> ff, fc;
    const auto n_elem = static_cast<std::size_t>(mesh_.element_count());
    ff.reserve(n_elem * 78);
    auto global = [&](const std::array<int, 6>& el, int a) {
      return el[static_cast<std::size_t>(a / 2)] * 2 + a % 2;
    };
    for (const auto& el : mesh_.elements)
      for (int b = 0; b < 12; ++b)
        for (int a = 0; a < 12; ++a) {
          const int fa = dof_free_[static_cast<std::size_t>(global(el, a))];
          if (fa < 0) continue;
          const int gb = global(el, b);
          const int fb = dof_free_[static_cast<std::size_t>(gb)];
          if (fb >= 0 && fa >= fb) ff.emplace_back(fa, fb, 0.0);
          if (const int cb = dof_con_[static_cast<std::size_t>(gb)]; cb >= 0) fc.emplace_back(fa, cb, 0.0);
        }
    const int nf = free_count();
    const int nc = static_cast<int>(constraints_.dofs.size());
    k_ff_pattern_.resize(nf, nf);
    k_ff_pattern_.setFromTriplets(ff.begin(), ff.end());
    k_ff_pattern_.makeCompressed();
    k_fc_pattern_.resize(nf, nc);
    k_fc_pattern_.setFromTriplets(fc.begin(), fc.end());
    k_fc_pattern_.makeCompressed();

    auto position = [](const SparseMatrix& m, int row, int col) {
      const int* inner = m.innerIndexPtr();
      const int* begin = inner + m.outerIndexPtr()[col];
      const int* end = inner + m.outerIndexPtr()[col + 1];
      const int* it = std::lower_bound(begin, end, row);
      return static_cast<int>(it - inner);
    };
    ff_pos_.assign(n_elem * 144, -1);
    fc_pos_.assign(n_elem * 144, -1);
    for (std::size_t e = 0; e < n_elem; ++e) {
      const auto& el = mesh_.elements[e];
      for (int b = 0; b < 12; ++b)
        for (int a = 0; a < 12; ++a) {
          const auto idx = e * 144 + static_cast<std::size_t>(b * 12 + a);
          const int fa = dof_free_[static_cast<std::size_t>(global(el, a))];
          if (fa < 0) continue;
          const int gb = global(el, b);
          const int fb = dof_free_[static_cast<std::size_t>(gb)];
          if (fb >= 0 && fa >= fb) ff_pos_[idx] = position(k_ff_pattern_, fa, fb);
          if (const int cb = dof_con_[static_cast<std::size_t>(gb)]; cb >= 0)
            fc_pos_[idx] = position(k_fc_pattern_, fa, cb);
        }
    }
  }

  const Mesh& mesh_;
  Constraints constraints_;
  SolverOptions options_;

  std::vector<Eigen::Matrix<double, 6, 2>> grads_;
  std::vector<double> weights_;
  std::vector<Eigen::Vector2d> qpoints_;
  std::vector<int> dof_free_;
  std::vector<int> dof_con_;
  std::vector<int> free_dofs_;
  SparseMatrix k_ff_pattern_;
  SparseMatrix k_fc_pattern_;
  std::vector<int> ff_pos_;
  std::vector<int> fc_pos_;

  Eigen::CholmodSupernodalLLT<SparseMatrix, Eigen::Lower> llt_;
  Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower> ldlt_;
  bool analyzed_llt_ = false;
  bool analyzed_ldlt_ = false;
  bool ldlt_active_ = false;
  bool has_factor_ = false;
};

// ---------------------------------------------------------------------------
// Uniaxial extension driver

struct LoadSchedule {
  CurveValues displacements = canonical_displacements();

  static LoadSchedule for_height(double domain_height) {
    return {canonical_displacements(0.5 * domain_height)};
  }
  void validate() const {
    if (displacements[0] != 0.0) throw ConfigError("load schedule must start at 0");
    for (int i = 1; i < kCurvePoints; ++i)
      if (!(displacements[i] > displacements[i - 1]))
        throw ConfigError("load schedule must be strictly increasing");
  }
};

struct UniaxialResult {
  EnergyCurve curve;  // raw total strain energy
  std::array<int, kCurvePoints> newton_iters{};
  int element_count = 0;
};

using StepObserver = std::function<void(int step, const Mesh&, const DeformationState&)>;

inline UniaxialResult run_uniaxial_extension(const PropertyField& field, const LoadSchedule& schedule,
                                             int subdivision, const SolverOptions& options = {},
                                             const StepObserver& observer = {}) {
  schedule.validate();
  const Mesh mesh = build_mesh(field, subdivision);
  Solver solver(mesh, uniaxial_constraints(mesh), options);
  UniaxialResult result;
  result.element_count = mesh.element_count();
  result.curve.displacements = schedule.displacements;
  result.curve.normalized = false;
  auto state = solver.zero_state();
  for (int step = 0; step < kCurvePoints; ++step) {
    try {
      state = solver.solve_step(state, schedule.displacements[static_cast<std::size_t>(step)]);
    } catch (const NonConvergenceError& e) {
      throw NonConvergenceError(e.reason(), e.last_residual(), step);
    }
    result.curve.energies[static_cast<std::size_t>(step)] = state.energy;
    result.newton_iters[static_cast<std::size_t>(step)] = state.newton_iters;
    if (observer) observer(step, mesh, state);
  }
  return result;
}

// Flat binary displacement dump: int32 nodes_x, nodes_y, step, then
// nodes_x * nodes_y (ux, uy) float64 pairs in node order.
inline void write_displacement_grid(const std::filesystem::path& path, const Mesh& mesh,
                                    const DeformationState& state, int step) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::int32_t header[3] = {mesh.nodes_x, mesh.nodes_y, step};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(state.u.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(state.u.size())));
}

}  // namespace microdiff::fem
