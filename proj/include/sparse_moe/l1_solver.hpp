#pragma once

// L1-ball constrained weighted least squares.
//
//   minimize   sum_m w_m (a_m . z - b_m)^2 + ridge * |z|^2
//   subject to sum_{j not free} |z_j| <= radius      (and z_j >= 0 if nonnegative)
//
// solved by projected gradient on the (P x P) weighted normal matrix, plus
// the exact Euclidean projections and the small combinatorial helpers used
// by the M-steps.

#include "sparse_moe/common.hpp"
#include "sparse_moe/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

namespace sparse_moe {

template <typename Scalar>
struct WlsProblem {
  Matrix<Scalar> design;       // M x P
  Vector<Scalar> target;       // M
  Vector<Scalar> row_weights;  // M, nonnegative
  Scalar radius = Scalar(1);
  std::vector<Index> free_coords;  // exempt from the norm (bias)
  bool nonnegative = false;
  std::optional<Vector<Scalar>> warm_start;

  Scalar ridge = Scalar(kRidge);
  int max_iters = 10'000;
  Scalar step_tol = Scalar(1e-10);

  Index rows() const { return design.rows(); }
  Index cols() const { return design.cols(); }

  void validate() const {
    detail::require(target.size() == rows(), "target length must equal design rows");
    detail::require(row_weights.size() == rows(), "weight length must equal design rows");
    if (!(radius > 0)) throw ConfigError("L1 radius must be positive");
    if (!row_weights.allFinite() || (row_weights.array() < 0).any())
      throw DimensionError("row weights must be finite and nonnegative");
    for (Index j : free_coords)
      detail::require(j >= 0 && j < cols(), "free coordinate out of range");
    if (warm_start) detail::require(warm_start->size() == cols(), "warm start length mismatch");
  }
};

template <typename Scalar>
struct SolveReport {
  Vector<Scalar> solution;
  int iterations = 0;
  Scalar final_objective = 0;
  Scalar constraint_slack = 0;  // radius - constrained L1 norm
  bool converged = false;
  std::vector<Scalar> objective_trace;  // one entry per accepted iterate
};

// ---------------------------------------------------------------------------
// Projections
// ---------------------------------------------------------------------------

/// Euclidean projection onto {z : |z|_1 <= t}, or onto
/// {z >= 0 : sum z <= t} when `nonnegative` is set. Sort-based thresholding.
template <typename Derived>
Vector<typename Derived::Scalar> project_l1_ball(const Eigen::MatrixBase<Derived>& v,
                                                 typename Derived::Scalar t,
                                                 bool nonnegative = false) {
  using Scalar = typename Derived::Scalar;
  if (!(t > 0)) throw ConfigError("projection radius must be positive");
  Vector<Scalar> z = v;
  if (nonnegative) z = z.cwiseMax(Scalar(0));
  if (z.cwiseAbs().sum() <= t) return z;

  std::vector<Scalar> u(static_cast<std::size_t>(z.size()));
  for (Index j = 0; j < z.size(); ++j) u[static_cast<std::size_t>(j)] = std::abs(z(j));
  std::sort(u.begin(), u.end(), std::greater<Scalar>());

  Scalar cumsum = 0;
  Scalar theta = 0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumsum += u[j];
    const Scalar candidate = (cumsum - t) / static_cast<Scalar>(j + 1);
    if (u[j] - candidate > 0) theta = candidate;
  }
  for (Index j = 0; j < z.size(); ++j) {
    const Scalar mag = std::max(std::abs(z(j)) - theta, Scalar(0));
    z(j) = z(j) < 0 ? -mag : mag;
  }
  return z;
}

/// Projects only the constrained coordinates; free ones pass through.
template <typename Scalar>
Vector<Scalar> project_constrained(const Vector<Scalar>& v, Scalar radius,
                                   const std::vector<Index>& free_coords, bool nonnegative) {
  if (free_coords.empty()) return project_l1_ball(v, radius, nonnegative);
  std::vector<bool> is_free(static_cast<std::size_t>(v.size()), false);
  for (Index j : free_coords) is_free[static_cast<std::size_t>(j)] = true;
  std::vector<Index> constrained;
  for (Index j = 0; j < v.size(); ++j)
    if (!is_free[static_cast<std::size_t>(j)]) constrained.push_back(j);
  if (constrained.empty()) return v;
  const Vector<Scalar> sub = v(constrained);
  Vector<Scalar> out = v;
  out(constrained) = project_l1_ball(sub, radius, nonnegative);
  return out;
}

template <typename Scalar>
Scalar constrained_l1(const Vector<Scalar>& z, const std::vector<Index>& free_coords) {
  Scalar total = z.cwiseAbs().sum();
  for (Index j : free_coords) total -= std::abs(z(j));
  return total;
}

// ---------------------------------------------------------------------------
// Unconstrained weighted least squares
// ---------------------------------------------------------------------------

/// Solves (A^T W A + ridge I) z = A^T W b with an LDL^T factorization.
template <typename Scalar>
Vector<Scalar> unconstrained_wls(const Matrix<Scalar>& design, const Vector<Scalar>& target,
                                 const Vector<Scalar>& row_weights, Scalar ridge) {
  detail::require(target.size() == design.rows(), "target length must equal design rows");
  detail::require(row_weights.size() == design.rows(), "weight length must equal design rows");
  if (ridge < 0) throw ConfigError("ridge must be non-negative");
  const Matrix<Scalar> weighted = row_weights.asDiagonal() * design;
  Matrix<Scalar> normal = design.transpose() * weighted;
  normal.diagonal().array() += ridge;
  const Vector<Scalar> rhs = weighted.transpose() * target;

  Eigen::LDLT<Matrix<Scalar>> ldlt(normal);
  const auto pivots = ldlt.vectorD();
  const Scalar scale = std::max(pivots.cwiseAbs().maxCoeff(), Scalar(1));
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      pivots.minCoeff() <= std::numeric_limits<Scalar>::epsilon() * scale * pivots.size())
    throw SingularSystemError("weighted normal equations are numerically singular");
  return ldlt.solve(rhs);
}

// ---------------------------------------------------------------------------
// Projected gradient
// ---------------------------------------------------------------------------

namespace detail {

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from a
/// fixed pseudo-random start.
template <typename Scalar>
Scalar power_iteration(const Matrix<Scalar>& sym, int steps = 30) {
  std::mt19937_64 rng(0x5eed);
  std::uniform_real_distribution<double> unif(0.5, 1.5);
  Vector<Scalar> v(sym.rows());
  for (Index j = 0; j < v.size(); ++j) v(j) = static_cast<Scalar>(unif(rng));
  v.normalize();
  Scalar estimate = 0;
  for (int s = 0; s < steps; ++s) {
    const Vector<Scalar> w = sym * v;
    estimate = w.norm();
    if (!(estimate > 0)) return Scalar(0);
    v = w / estimate;
  }
  return estimate;
}

}  // namespace detail

/// Weighted sum of squared residuals plus the ridge term, evaluated from the
/// normal-equation quantities.
template <typename Scalar>
Scalar quadratic_objective(const Matrix<Scalar>& gram, const Vector<Scalar>& rhs,
                           Scalar constant, const Vector<Scalar>& z) {
  return z.dot(gram * z) - Scalar(2) * rhs.dot(z) + constant;
}

template <typename Scalar>
SolveReport<Scalar> solve(const WlsProblem<Scalar>& problem) {
  problem.validate();
  const Index p = problem.cols();
  const Matrix<Scalar> weighted = problem.row_weights.asDiagonal() * problem.design;
  Matrix<Scalar> gram = problem.design.transpose() * weighted;
  gram.diagonal().array() += problem.ridge;
  const Vector<Scalar> rhs = weighted.transpose() * problem.target;
  const Scalar constant = problem.target.dot(problem.row_weights.cwiseProduct(problem.target));

  auto finish = [&](Vector<Scalar> z, int iters, bool converged, std::vector<Scalar> trace) {
    SolveReport<Scalar> report;
    report.final_objective = quadratic_objective(gram, rhs, constant, z);
    report.constraint_slack = problem.radius - constrained_l1(z, problem.free_coords);
    report.solution = std::move(z);
    report.iterations = iters;
    report.converged = converged;
    report.objective_trace = std::move(trace);
    return report;
  };

  // When the unconstrained minimizer is already feasible it is the answer.
  {
    Eigen::LDLT<Matrix<Scalar>> ldlt(gram);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.vectorD().minCoeff() > 0) {
      Vector<Scalar> z = ldlt.solve(rhs);
      const bool sign_ok = [&] {
        if (!problem.nonnegative) return true;
        std::vector<bool> is_free(static_cast<std::size_t>(p), false);
        for (Index j : problem.free_coords) is_free[static_cast<std::size_t>(j)] = true;
        for (Index j = 0; j < p; ++j)
          if (!is_free[static_cast<std::size_t>(j)] && z(j) < 0) return false;
        return true;
      }();
      if (z.allFinite() && sign_ok &&
          constrained_l1(z, problem.free_coords) <= problem.radius)
        return finish(std::move(z), 0, true, {quadratic_objective(gram, rhs, constant, z)});
    }
  }

  Vector<Scalar> z = project_constrained(
      problem.warm_start ? *problem.warm_start : Vector<Scalar>(Vector<Scalar>::Zero(p)),
      problem.radius, problem.free_coords, problem.nonnegative);
  Scalar objective = quadratic_objective(gram, rhs, constant, z);
  const Scalar start_objective = objective;
  std::vector<Scalar> trace{objective};

  const Scalar lipschitz = Scalar(2) * Scalar(1.1) * detail::power_iteration(gram);
  if (!(lipschitz > 0)) return finish(std::move(z), 0, true, std::move(trace));
  Scalar step = Scalar(1) / lipschitz;

  bool converged = false;
  int iter = 0;
  while (iter < problem.max_iters) {
    ++iter;
    const Vector<Scalar> grad = Scalar(2) * (gram * z - rhs);
    Vector<Scalar> next =
        project_constrained<Scalar>(z - step * grad, problem.radius, problem.free_coords,
                                    problem.nonnegative);
    Scalar next_objective = quadratic_objective(gram, rhs, constant, next);
    // Power iteration can underestimate the curvature; backtrack until the
    // step is a descent step.
    const Scalar slack = Scalar(64) * std::numeric_limits<Scalar>::epsilon() *
                         (Scalar(1) + std::abs(objective));
    while (next_objective > objective + slack && step > Scalar(1e-30)) {
      step /= 2;
      next = project_constrained<Scalar>(z - step * grad, problem.radius, problem.free_coords,
                                         problem.nonnegative);
      next_objective = quadratic_objective(gram, rhs, constant, next);
    }
    const Scalar change = (next - z).cwiseAbs().maxCoeff();
    if (next_objective <= objective) {
      z = std::move(next);
      objective = next_objective;
    }
    trace.push_back(objective);
    if (change < problem.step_tol) {
      converged = true;
      break;
    }
  }
  if (!std::isfinite(static_cast<double>(objective)))
    throw SolverError("projected gradient produced a non-finite objective");
  if (!converged && objective > start_objective)
    throw SolverError("projected gradient failed to decrease the objective");
  return finish(std::move(z), iter, converged, std::move(trace));
}

// ---------------------------------------------------------------------------
// Subset enumeration
// ---------------------------------------------------------------------------

/// All subsets of {0..k-1} with 1 <= |S| <= budget, in lexicographic order
/// of their sorted index sequences.
inline std::vector<std::vector<int>> enumerate_subsets(int k, int budget) {
  if (k < 1 || budget < 1) throw ConfigError("subset enumeration needs k >= 1 and budget >= 1");
  budget = std::min(budget, k);
  if (binomial(static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(budget)) >
      kMaxSubsetCombinations)
    throw ConfigError("C(k, budget) exceeds the enumeration guard of 1e6");

  std::vector<std::vector<int>> out;
  std::vector<int> current;
  std::function<void(int)> extend = [&](int next) {
    for (int j = next; j < k; ++j) {
      current.push_back(j);
      out.push_back(current);
      if (static_cast<int>(current.size()) < budget) extend(j + 1);
      current.pop_back();
    }
  };
  extend(0);
  return out;
}

}  // namespace sparse_moe
