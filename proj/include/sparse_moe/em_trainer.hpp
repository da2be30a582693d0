#pragma once

// EM training for the regularized mixture of experts.
//
// Each M-step is reduced to weighted least squares against log-targets
// (softmax inversion) and solved under an L1 budget by l1_solver. The
// optional expert selector mu is updated first in every outer iteration
// with gate and experts frozen, either by exhaustive subset search (l0)
// or by a nonnegative L1-constrained least-squares fit (l1).

#include "sparse_moe/common.hpp"
#include "sparse_moe/l1_solver.hpp"
#include "sparse_moe/model.hpp"
#include "sparse_moe/parallel.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sparse_moe {

inline constexpr double kTargetEps = 1e-3;
inline constexpr double kDeadExpertMass = 1e-8;
inline constexpr double kInitScale = 0.01;
inline constexpr int kMaxHalvings = 10;

// ---------------------------------------------------------------------------
// E-step and single-instance quantities
// ---------------------------------------------------------------------------

/// Posterior R_in of expert i having generated instance n, with the
/// selector entering through the gated gate. Rows are floored at 1e-12 and
/// renormalized.
template <typename Scalar>
Matrix<Scalar> e_step(const GateParams<Scalar>& gate, const ExpertParams<Scalar>& experts,
                      const Matrix<Scalar>& x, const std::vector<int>& labels,
                      const Matrix<Scalar>& mu) {
  detail::require(static_cast<Index>(labels.size()) == x.rows(), "label count mismatch");
  detail::require(mu.rows() == x.rows() && mu.cols() == gate.k(), "selector shape mismatch");
  const Index n_rows = x.rows();
  const Index k = gate.k();
  Matrix<Scalar> r(n_rows, k);
  for (Index n = 0; n < n_rows; ++n) {
    const Vector<Scalar> xn = x.row(n).transpose();
    const Vector<Scalar> h = gate_forward(gate, xn, mu.row(n).transpose());
    Vector<Scalar> joint(k);
    for (Index i = 0; i < k; ++i)
      joint(i) = expert_forward(experts, i, xn)(labels[static_cast<std::size_t>(n)]) * h(i);
    const Scalar total = joint.sum();
    if (total > 0) {
      joint /= total;
    } else {
      joint.setConstant(Scalar(1) / static_cast<Scalar>(k));
    }
    joint = joint.cwiseMax(Scalar(kProbFloor));
    r.row(n) = (joint / joint.sum()).transpose();
  }
  return r;
}

template <typename Scalar>
Matrix<Scalar> e_step(const MixtureModel<Scalar>& model, const Dataset<Scalar>& data,
                      const ExpertSelector<Scalar>& selector) {
  return e_step(model.gate, model.experts, augment_rows(model.scaler, data.features), data.labels,
                selector.mu);
}

/// E' = -log sum_k p(y | x, m_k) p(m_k | x) for one augmented instance.
template <typename Scalar, typename DerivedX, typename DerivedMu>
Scalar single_instance_loss(const GateParams<Scalar>& gate, const ExpertParams<Scalar>& experts,
                            const Eigen::MatrixBase<DerivedX>& x, int y,
                            const Eigen::MatrixBase<DerivedMu>& mu_row) {
  const Vector<Scalar> p = mixture_forward(gate, experts, x, mu_row);
  return -std::log(std::max(p(y), Scalar(kProbFloor)));
}

namespace detail {

// Unfloored posterior and gate for one instance; used by the gradients.
template <typename Scalar, typename DerivedX, typename DerivedMu>
std::pair<Vector<Scalar>, Vector<Scalar>> posterior_and_gate(
    const GateParams<Scalar>& gate, const ExpertParams<Scalar>& experts,
    const Eigen::MatrixBase<DerivedX>& x, int y, const Eigen::MatrixBase<DerivedMu>& mu_row) {
  const Vector<Scalar> h = gate_forward(gate, x, mu_row);
  Vector<Scalar> joint(gate.k());
  for (Index i = 0; i < gate.k(); ++i) joint(i) = expert_forward(experts, i, x)(y) * h(i);
  return {joint / joint.sum(), h};
}

}  // namespace detail

/// dE'/dnu_i = (h_i - R_in) mu_in x_n.
template <typename Scalar, typename DerivedX, typename DerivedMu>
Vector<Scalar> analytic_gate_gradient(const GateParams<Scalar>& gate,
                                      const ExpertParams<Scalar>& experts,
                                      const Eigen::MatrixBase<DerivedMu>& mu_row,
                                      const Eigen::MatrixBase<DerivedX>& x, int y, Index i) {
  detail::require(i >= 0 && i < gate.k(), "expert index out of range");
  const auto [r, h] = detail::posterior_and_gate(gate, experts, x, y, mu_row);
  return ((h(i) - r(i)) * mu_row(i)) * x;
}

/// dE'/dmu_in = (h_i - R_in) nu_i . x_n.
template <typename Scalar, typename DerivedX, typename DerivedMu>
Scalar analytic_selector_gradient(const GateParams<Scalar>& gate,
                                  const ExpertParams<Scalar>& experts,
                                  const Eigen::MatrixBase<DerivedMu>& mu_row,
                                  const Eigen::MatrixBase<DerivedX>& x, int y, Index i) {
  detail::require(i >= 0 && i < gate.k(), "expert index out of range");
  const auto [r, h] = detail::posterior_and_gate(gate, experts, x, y, mu_row);
  return (h(i) - r(i)) * gate.nu.row(i).dot(x);
}

// ---------------------------------------------------------------------------
// Log-targets
// ---------------------------------------------------------------------------

/// One-hot labels with log clamping: 0 for the true class, log(eps) elsewhere.
template <typename Scalar = double>
Matrix<Scalar> build_expert_targets(const std::vector<int>& labels, int q,
                                    Scalar eps = Scalar(kTargetEps)) {
  if (!(eps > 0 && eps < 1)) throw ConfigError("target eps must lie in (0, 1)");
  Matrix<Scalar> t = Matrix<Scalar>::Constant(static_cast<Index>(labels.size()), q, std::log(eps));
  for (std::size_t n = 0; n < labels.size(); ++n) {
    detail::require(labels[n] >= 0 && labels[n] < q, "label out of range");
    t(static_cast<Index>(n), labels[n]) = Scalar(0);
  }
  return t;
}

template <typename Scalar>
Matrix<Scalar> build_gate_targets(const Matrix<Scalar>& r, Scalar eps = Scalar(kProbFloor)) {
  return r.cwiseMax(eps).array().log().matrix();
}

// ---------------------------------------------------------------------------
// M-steps
// ---------------------------------------------------------------------------

namespace detail {

/// Unconstrained WLS that raises the ridge until the factorization succeeds.
template <typename Scalar>
Vector<Scalar> stabilized_wls(const Matrix<Scalar>& design, const Vector<Scalar>& target,
                              const Vector<Scalar>& weights) {
  Scalar ridge = Scalar(kRidge);
  for (int attempt = 0; attempt < 8; ++attempt, ridge *= Scalar(100)) {
    try {
      return unconstrained_wls(design, target, weights, ridge);
    } catch (const SingularSystemError&) {
    }
  }
  throw SingularSystemError("weighted least squares stayed singular after ridge escalation");
}

inline std::vector<Index> bias_coord(Index d_aug) { return {d_aug - 1}; }

}  // namespace detail

template <typename Scalar>
struct ExpertUpdate {
  ExpertParams<Scalar> params;
  std::vector<Index> empty_experts;  // rows left unchanged; candidates for reinitialization
  int constrained_solves = 0;
  int plain_solves = 0;
};

/// Fits every omega_li by weighted least squares with weights R_in against
/// targets t_nl. With `constrained` the non-bias L1 norm of each row is
/// bounded by lambda_omega; otherwise the plain ridge-stabilized solution is
/// used.
template <typename Scalar>
ExpertUpdate<Scalar> m_step_experts(const Matrix<Scalar>& r, const Matrix<Scalar>& x,
                                    const Matrix<Scalar>& targets, double lambda_omega,
                                    const ExpertParams<Scalar>& incumbent,
                                    bool constrained = true, int threads = 1) {
  const Index k = r.cols();
  const Index q = targets.cols();
  detail::require(r.rows() == x.rows() && targets.rows() == x.rows(), "row count mismatch");
  detail::require(incumbent.k() == k && incumbent.q() == q, "incumbent expert shape mismatch");
  if (!(lambda_omega > 0)) throw ConfigError("lambda_omega must be positive");

  ExpertUpdate<Scalar> update{incumbent, {}, 0, 0};
  const Scalar dead_mass = Scalar(kDeadExpertMass) * static_cast<Scalar>(x.rows());
  std::vector<bool> empty(static_cast<std::size_t>(k), false);
  for (Index i = 0; i < k; ++i) {
    if (r.col(i).sum() < dead_mass) {
      empty[static_cast<std::size_t>(i)] = true;
      update.empty_experts.push_back(i);
    }
  }

  parallel_for(static_cast<long>(k * q), threads, [&](long job) {
    const Index i = static_cast<Index>(job) / q;
    const Index l = static_cast<Index>(job) % q;
    if (empty[static_cast<std::size_t>(i)]) return;
    const Vector<Scalar> weights = r.col(i);
    const Vector<Scalar> target = targets.col(l);
    auto& row = update.params.by_expert[static_cast<std::size_t>(i)];
    try {
      if (!constrained) {
        row.row(l) = detail::stabilized_wls(x, target, weights).transpose();
        return;
      }
      WlsProblem<Scalar> problem{x, target, weights, Scalar(lambda_omega),
                                 detail::bias_coord(x.cols()), false,
                                 Vector<Scalar>(row.row(l).transpose())};
      row.row(l) = solve(problem).solution.transpose();
    } catch (const SolverError& e) {
      throw SolverError(std::string(e.what()) + " [expert " + std::to_string(i) + ", class " +
                        std::to_string(l) + "]");
    }
  });
  for (Index i = 0; i < k; ++i) {
    if (empty[static_cast<std::size_t>(i)]) continue;
    (constrained ? update.constrained_solves : update.plain_solves) += static_cast<int>(q);
  }
  return update;
}

template <typename Scalar>
struct GateUpdate {
  GateParams<Scalar> params;
  std::vector<Index> unselected;  // gate rows no instance selects; left unchanged
  int solves = 0;
};

/// Fits each gate row nu_i to log R_in through the masked design mu_in x_n
/// with the non-bias L1 norm bounded by lambda_nu.
template <typename Scalar>
GateUpdate<Scalar> m_step_gate(const Matrix<Scalar>& r, const Matrix<Scalar>& x,
                               const Matrix<Scalar>& mu, double lambda_nu,
                               const GateParams<Scalar>& incumbent, int threads = 1) {
  const Index k = r.cols();
  detail::require(r.rows() == x.rows() && mu.rows() == x.rows() && mu.cols() == k,
                  "gate M-step shape mismatch");
  detail::require(incumbent.k() == k && incumbent.nu.cols() == x.cols(),
                  "incumbent gate shape mismatch");
  if (!(lambda_nu > 0)) throw ConfigError("lambda_nu must be positive");

  const Matrix<Scalar> targets = build_gate_targets(r);
  GateUpdate<Scalar> update{incumbent, {}, 0};
  std::vector<char> solved(static_cast<std::size_t>(k), 0);

  parallel_for(static_cast<long>(k), threads, [&](long job) {
    const Index i = static_cast<Index>(job);
    std::vector<Index> rows;
    for (Index n = 0; n < x.rows(); ++n)
      if (mu(n, i) != Scalar(0)) rows.push_back(n);
    if (rows.empty()) return;
    const Vector<Scalar> scale = mu.col(i)(rows);
    Matrix<Scalar> design = scale.asDiagonal() * x(rows, Eigen::all);
    WlsProblem<Scalar> problem{std::move(design),
                               targets.col(i)(rows),
                               Vector<Scalar>::Ones(static_cast<Index>(rows.size())),
                               Scalar(lambda_nu),
                               detail::bias_coord(x.cols()),
                               false,
                               Vector<Scalar>(incumbent.nu.row(i).transpose())};
    try {
      update.params.nu.row(i) = solve(problem).solution.transpose();
    } catch (const SolverError& e) {
      throw SolverError(std::string(e.what()) + " [gate " + std::to_string(i) + "]");
    }
    solved[static_cast<std::size_t>(i)] = 1;
  });
  for (Index i = 0; i < k; ++i) {
    if (solved[static_cast<std::size_t>(i)]) {
      ++update.solves;
    } else {
      update.unselected.push_back(i);
    }
  }
  return update;
}

/// Norm-0 selector: for each instance, the subset S with 1 <= |S| <= budget
/// minimizing E'. Ties (within a relative 1e-12) go to the lexicographically
/// smallest subset.
template <typename Scalar>
ExpertSelector<Scalar> m_step_selector_norm0(const GateParams<Scalar>& gate,
                                             const ExpertParams<Scalar>& experts,
                                             const Matrix<Scalar>& x,
                                             const std::vector<int>& labels, double lambda_mu,
                                             int threads = 1) {
  const Index k = gate.k();
  if (!(lambda_mu >= 1) || lambda_mu != std::floor(lambda_mu))
    throw ConfigError("norm-0 budget must be a positive integer");
  const int budget = static_cast<int>(std::min<double>(lambda_mu, static_cast<double>(k)));
  const auto subsets = enumerate_subsets(static_cast<int>(k), budget);
  detail::require(static_cast<Index>(labels.size()) == x.rows(), "label count mismatch");

  ExpertSelector<Scalar> out{Matrix<Scalar>::Zero(x.rows(), k), SelectorMode::l0};
  parallel_for(static_cast<long>(x.rows()), threads, [&](long job) {
    const Index n = static_cast<Index>(job);
    const Vector<Scalar> xn = x.row(n).transpose();
    const Vector<Scalar> scores = gate.nu * xn;
    const Vector<Scalar> likelihood =
        expert_table(experts, xn).row(labels[static_cast<std::size_t>(n)]).transpose();
    std::size_t best = 0;
    Scalar best_loss = std::numeric_limits<Scalar>::infinity();
    Vector<Scalar> logits(k);
    for (std::size_t s = 0; s < subsets.size(); ++s) {
      logits.setZero();
      for (int i : subsets[s]) logits(i) = scores(i);
      const Scalar p = likelihood.dot(softmax(logits));
      const Scalar loss = -std::log(std::max(p, Scalar(kProbFloor)));
      if (s == 0 || loss < best_loss - Scalar(1e-12) * (Scalar(1) + std::abs(best_loss))) {
        best_loss = loss;
        best = s;
      }
    }
    for (int i : subsets[best]) out.mu(n, i) = Scalar(1);
  });
  return out;
}

/// Norm-1 selector: for each instance, mu_n = argmin sum_i (log R_in - mu_in nu_i.x_n)^2
/// over mu_n >= 0 with sum mu_n <= lambda_mu. Coordinates whose gate score
/// is exactly zero do not affect the objective and are set to zero.
template <typename Scalar>
ExpertSelector<Scalar> m_step_selector_norm1(const GateParams<Scalar>& gate,
                                             const Matrix<Scalar>& r, const Matrix<Scalar>& x,
                                             double lambda_mu,
                                             const Matrix<Scalar>* incumbent = nullptr,
                                             int threads = 1) {
  const Index k = gate.k();
  detail::require(r.rows() == x.rows() && r.cols() == k, "responsibility shape mismatch");
  if (incumbent) detail::require(incumbent->rows() == x.rows() && incumbent->cols() == k,
                                 "incumbent selector shape mismatch");
  if (!(lambda_mu > 0)) throw ConfigError("norm-1 budget must be positive");
  const Matrix<Scalar> log_r = build_gate_targets(r);

  ExpertSelector<Scalar> out{Matrix<Scalar>::Zero(x.rows(), k), SelectorMode::l1};
  parallel_for(static_cast<long>(x.rows()), threads, [&](long job) {
    const Index n = static_cast<Index>(job);
    const Vector<Scalar> scores = gate.nu * x.row(n).transpose();
    std::vector<Index> active;
    for (Index i = 0; i < k; ++i)
      if (scores(i) != Scalar(0)) active.push_back(i);
    if (active.empty()) return;
    const Index m = static_cast<Index>(active.size());
    WlsProblem<Scalar> problem{Matrix<Scalar>(scores(active).asDiagonal()),
                               log_r.row(n)(active).transpose(),
                               Vector<Scalar>::Ones(m),
                               Scalar(lambda_mu),
                               {},
                               true,
                               std::nullopt};
    if (incumbent) problem.warm_start = Vector<Scalar>(incumbent->row(n)(active).transpose());
    try {
      const Vector<Scalar> sol = solve(problem).solution;
      for (Index a = 0; a < m; ++a) out.mu(n, active[static_cast<std::size_t>(a)]) = sol(a);
    } catch (const SolverError& e) {
      throw SolverError(std::string(e.what()) + " [instance " + std::to_string(n) + "]");
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

struct ObjectiveRecord {
  int iter = 0;
  double expected_complete_ll = 0;
  double l1_penalty_nu = 0;     // total excess of gate rows over lambda_nu
  double l1_penalty_omega = 0;  // total excess of expert rows over lambda_omega
  double selector_penalty = 0;  // total excess of selector rows over lambda_mu
  double penalized_total = 0;

  bool finite() const {
    return std::isfinite(expected_complete_ll) && std::isfinite(l1_penalty_nu) &&
           std::isfinite(l1_penalty_omega) && std::isfinite(selector_penalty) &&
           std::isfinite(penalized_total);
  }
};

/// <L_c> = sum_n sum_i R_in [log p(y_n | x_n, m_i) + log p(m_i | x_n)].
template <typename Scalar>
Scalar expected_complete_ll(const GateParams<Scalar>& gate, const ExpertParams<Scalar>& experts,
                            const Matrix<Scalar>& x, const std::vector<int>& labels,
                            const Matrix<Scalar>& mu, const Matrix<Scalar>& r) {
  Scalar total = 0;
  for (Index n = 0; n < x.rows(); ++n) {
    const Vector<Scalar> xn = x.row(n).transpose();
    const Vector<Scalar> h = gate_forward(gate, xn, mu.row(n).transpose());
    for (Index i = 0; i < gate.k(); ++i) {
      const Scalar g = expert_forward(experts, i, xn)(labels[static_cast<std::size_t>(n)]);
      total += r(n, i) * (std::log(std::max(g, Scalar(kProbFloor))) +
                          std::log(std::max(h(i), Scalar(kProbFloor))));
    }
  }
  return total;
}

/// Objective for the budgeted problem: <L_c> minus the amount by which each
/// weight row or selector row exceeds its budget (zero at feasible points).
template <typename Scalar>
ObjectiveRecord penalized_objective(int iter, const GateParams<Scalar>& gate,
                                    const ExpertParams<Scalar>& experts, const Matrix<Scalar>& x,
                                    const std::vector<int>& labels,
                                    const ExpertSelector<Scalar>& selector,
                                    const Matrix<Scalar>& r, const Hyperparams& hyper) {
  ObjectiveRecord rec;
  rec.iter = iter;
  rec.expected_complete_ll =
      static_cast<double>(expected_complete_ll(gate, experts, x, labels, selector.mu, r));
  for (Index i = 0; i < gate.k(); ++i) {
    const double norm = static_cast<double>(gate.nu.row(i).head(gate.nu.cols() - 1).cwiseAbs().sum());
    rec.l1_penalty_nu += std::max(0.0, norm - hyper.lambda_nu);
  }
  for (const auto& w : experts.by_expert)
    for (Index l = 0; l < w.rows(); ++l) {
      const double norm = static_cast<double>(w.row(l).head(w.cols() - 1).cwiseAbs().sum());
      rec.l1_penalty_omega += std::max(0.0, norm - hyper.lambda_omega);
    }
  if (selector.mode != SelectorMode::none) {
    for (Index n = 0; n < selector.mu.rows(); ++n) {
      const auto row = selector.mu.row(n);
      const double used = selector.mode == SelectorMode::l0
                              ? static_cast<double>((row.array() != Scalar(0)).count())
                              : static_cast<double>(row.cwiseAbs().sum());
      rec.selector_penalty += std::max(0.0, used - hyper.lambda_mu);
    }
  }
  rec.penalized_total = rec.expected_complete_ll - rec.l1_penalty_nu - rec.l1_penalty_omega -
                        rec.selector_penalty;
  return rec;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct FitReport {
  std::vector<ObjectiveRecord> trace;  // entry 0 is the initialization
  int iterations_run = 0;
  bool converged = false;
  double sparsity = 0;                  // fraction of non-bias weights below 1e-6
  std::vector<long> selector_histogram;  // [c] = instances with c active experts
  int gate_solves = 0;
  int expert_constrained_solves = 0;
  int expert_plain_solves = 0;
  int selector_solves = 0;
  int reinitialized_experts = 0;
  int damped_steps = 0;     // M-steps shortened by the safeguard
  int best_iteration = -1;  // iterate returned by fit (-1: the last one)

  /// Penalized objective of the parameters fit() returned.
  double final_objective() const {
    if (trace.empty()) return 0;
    return best_iteration >= 0 ? trace[static_cast<std::size_t>(best_iteration)].penalized_total
                               : trace.back().penalized_total;
  }
};

struct FitOptions {
  int threads = 1;
  // Backtrack each M-step toward the incumbent until the penalized objective
  // does not decrease; if no halving (up to kMaxHalvings) helps, take the full
  // step anyway. The best feasible iterate is returned.
  bool safeguard = true;
  std::function<void(const ObjectiveRecord&)> on_iteration;
};

template <typename Scalar>
struct FitResult {
  MixtureModel<Scalar> model;
  FitReport report;
  ExpertSelector<Scalar> selector;  // training-set selector of the last iteration
};

template <typename Scalar>
double weight_sparsity(const GateParams<Scalar>& gate, const ExpertParams<Scalar>& experts) {
  long zeros = 0;
  long total = 0;
  auto count = [&](const Matrix<Scalar>& w) {
    const auto body = w.leftCols(w.cols() - 1);
    zeros += (body.array().abs() < Scalar(kZeroThreshold)).count();
    total += body.size();
  };
  count(gate.nu);
  for (const auto& w : experts.by_expert) count(w);
  return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

template <typename Scalar>
std::vector<long> active_expert_histogram(const Matrix<Scalar>& mu) {
  std::vector<long> hist(static_cast<std::size_t>(mu.cols() + 1), 0);
  for (Index n = 0; n < mu.rows(); ++n)
    ++hist[static_cast<std::size_t>((mu.row(n).array() > Scalar(kZeroThreshold)).count())];
  return hist;
}

namespace detail {

template <typename Scalar>
void randomize_expert(std::mt19937_64& rng, GateParams<Scalar>& gate,
                      ExpertParams<Scalar>& experts, Index i) {
  std::normal_distribution<double> normal(0.0, kInitScale);
  for (Index j = 0; j < gate.nu.cols(); ++j) gate.nu(i, j) = static_cast<Scalar>(normal(rng));
  auto& w = experts.by_expert[static_cast<std::size_t>(i)];
  for (Index l = 0; l < w.rows(); ++l)
    for (Index j = 0; j < w.cols(); ++j) w(l, j) = static_cast<Scalar>(normal(rng));
}

}  // namespace detail

/// Runs EM from a seeded random start. See README for the iteration order
/// and the fast schedule.
template <typename Scalar>
FitResult<Scalar> fit(const Dataset<Scalar>& data, const Hyperparams& hyper,
                      const FitOptions& options = {}) {
  data.validate();
  hyper.validate();
  const Index k = hyper.k;
  const Index q = data.q;
  const Index d_aug = data.d() + 1;
  const int threads = std::max(1, options.threads);

  MixtureModel<Scalar> model;
  model.hyper = hyper;
  model.label_names = data.label_names;
  model.scaler = fit_scaler(data.features);
  model.gate.nu = Matrix<Scalar>::Zero(k, d_aug);
  model.experts = ExpertParams<Scalar>::zeros(k, q, d_aug);
  std::mt19937_64 rng(hyper.seed);
  for (Index i = 0; i < k; ++i) detail::randomize_expert(rng, model.gate, model.experts, i);

  const Matrix<Scalar> x = augment_rows(model.scaler, data.features);
  const Matrix<Scalar> targets = build_expert_targets<Scalar>(data.labels, data.q);
  auto& gate = model.gate;
  auto& experts = model.experts;
  FitReport report;

  auto update_selector = [&](ExpertSelector<Scalar>& selector, const Matrix<Scalar>& r) {
    switch (hyper.selector_mode) {
      case SelectorMode::none:
        return;
      case SelectorMode::l0:
        selector = m_step_selector_norm0(gate, experts, x, data.labels, hyper.lambda_mu, threads);
        break;
      case SelectorMode::l1:
        selector = m_step_selector_norm1(gate, r, x, hyper.lambda_mu, &selector.mu, threads);
        break;
    }
    report.selector_solves += static_cast<int>(data.n());
  };

  ExpertSelector<Scalar> selector = ExpertSelector<Scalar>::ones(data.n(), k, hyper.selector_mode);
  Matrix<Scalar> r = e_step(gate, experts, x, data.labels, selector.mu);
  if (hyper.selector_mode != SelectorMode::none) {
    update_selector(selector, r);
    r = e_step(gate, experts, x, data.labels, selector.mu);
  }
  ObjectiveRecord rec = penalized_objective(0, gate, experts, x, data.labels, selector, r, hyper);
  if (!rec.finite()) throw TrainingError("non-finite objective at initialization", 0);
  report.trace.push_back(rec);
  if (options.on_iteration) options.on_iteration(rec);

  struct Snapshot {
    GateParams<Scalar> gate;
    ExpertParams<Scalar> experts;
    ExpertSelector<Scalar> selector;
    double objective;
    int iter;
  };
  auto feasible = [](const ObjectiveRecord& rec) {
    return rec.l1_penalty_nu == 0 && rec.l1_penalty_omega == 0 && rec.selector_penalty == 0;
  };
  std::optional<Snapshot> best;
  if (options.safeguard && feasible(rec))
    best = Snapshot{gate, experts, selector, rec.penalized_total, 0};

  const bool fast = hyper.schedule == Schedule::fast;
  bool final_pass_pending = false;
  for (int iter = 1; iter <= hyper.max_iters; ++iter) {
    const bool final_pass = fast && (iter == hyper.max_iters || final_pass_pending);
    try {
      update_selector(selector, r);
      r = e_step(gate, experts, x, data.labels, selector.mu);

      bool reinitialized = false;
      for (Index i = 0; i < k; ++i) {
        if (r.col(i).sum() < Scalar(kDeadExpertMass) * static_cast<Scalar>(data.n())) {
          detail::randomize_expert(rng, gate, experts, i);
          ++report.reinitialized_experts;
          reinitialized = true;
        }
      }
      if (reinitialized) r = e_step(gate, experts, x, data.labels, selector.mu);

      auto gate_update = m_step_gate(r, x, selector.mu, hyper.lambda_nu, gate, threads);
      report.gate_solves += gate_update.solves;
      const bool constrained = !fast || final_pass;
      auto expert_update =
          m_step_experts(r, x, targets, hyper.lambda_omega, experts, constrained, threads);
      report.expert_constrained_solves += expert_update.constrained_solves;
      report.expert_plain_solves += expert_update.plain_solves;

      GateParams<Scalar> next_gate = std::move(gate_update.params);
      ExpertParams<Scalar> next_experts = std::move(expert_update.params);
      // The final fast-schedule pass must land on the constrained experts.
      if (options.safeguard && !final_pass) {
        const double baseline =
            penalized_objective(iter, gate, experts, x, data.labels, selector, r, hyper)
                .penalized_total;
        auto score = [&](const GateParams<Scalar>& g, const ExpertParams<Scalar>& e) {
          const Matrix<Scalar> post = e_step(g, e, x, data.labels, selector.mu);
          return penalized_objective(iter, g, e, x, data.labels, selector, post, hyper)
              .penalized_total;
        };
        if (!(score(next_gate, next_experts) >= baseline)) {
          GateParams<Scalar> trial_gate = next_gate;
          ExpertParams<Scalar> trial_experts = next_experts;
          for (int halving = 1; halving <= kMaxHalvings; ++halving) {
            trial_gate.nu = gate.nu + Scalar(0.5) * (trial_gate.nu - gate.nu);
            for (std::size_t i = 0; i < trial_experts.by_expert.size(); ++i)
              trial_experts.by_expert[i] =
                  experts.by_expert[i] +
                  Scalar(0.5) * (trial_experts.by_expert[i] - experts.by_expert[i]);
            if (score(trial_gate, trial_experts) >= baseline) {
              next_gate = std::move(trial_gate);
              next_experts = std::move(trial_experts);
              ++report.damped_steps;
              break;
            }
          }
        }
      }
      gate = std::move(next_gate);
      experts = std::move(next_experts);
    } catch (const SolverError& e) {
      throw TrainingError(e.what(), iter);
    }

    r = e_step(gate, experts, x, data.labels, selector.mu);
    rec = penalized_objective(iter, gate, experts, x, data.labels, selector, r, hyper);
    if (!rec.finite()) throw TrainingError("non-finite objective", iter);
    const double previous = report.trace.back().penalized_total;
    report.trace.push_back(rec);
    report.iterations_run = iter;
    if (options.on_iteration) options.on_iteration(rec);

    if (options.safeguard && feasible(rec) && (!best || rec.penalized_total > best->objective))
      best = Snapshot{gate, experts, selector, rec.penalized_total, iter};

    if (final_pass) break;
    const double change =
        std::abs(rec.penalized_total - previous) / (1.0 + std::abs(rec.penalized_total));
    if (change < hyper.tol) {
      report.converged = true;
      if (!fast) break;
      final_pass_pending = true;
    }
  }

  if (best && best->objective > report.trace.back().penalized_total) {
    gate = std::move(best->gate);
    experts = std::move(best->experts);
    selector = std::move(best->selector);
    report.best_iteration = best->iter;
  }
  report.sparsity = weight_sparsity(gate, experts);
  report.selector_histogram = active_expert_histogram(selector.mu);
  return {std::move(model), std::move(report), std::move(selector)};
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class SelectorPolicy { ones, gate_surrogate };

std::string to_string(SelectorPolicy policy);
SelectorPolicy parse_selector_policy(const std::string& text);

/// Test-time selector. gate_surrogate stands in for the unknown responsibilities
/// with the plain gate output and runs the norm-1 selector fit on it.
template <typename Scalar>
Matrix<Scalar> prediction_selector(const MixtureModel<Scalar>& model, const Matrix<Scalar>& x_aug,
                                   SelectorPolicy policy, int threads = 1) {
  const Index k = model.k();
  Matrix<Scalar> ones = Matrix<Scalar>::Ones(x_aug.rows(), k);
  if (policy == SelectorPolicy::ones) return ones;
  Matrix<Scalar> provisional(x_aug.rows(), k);
  for (Index n = 0; n < x_aug.rows(); ++n)
    provisional.row(n) = gate_forward(model.gate, x_aug.row(n).transpose()).transpose();
  const double budget =
      model.hyper.selector_mode == SelectorMode::none ? static_cast<double>(k) : model.hyper.lambda_mu;
  return m_step_selector_norm1(model.gate, provisional, x_aug, budget,
                               static_cast<const Matrix<Scalar>*>(nullptr), threads)
      .mu;
}

/// Row-wise mixture probabilities (N x Q) for raw features.
template <typename Scalar>
Matrix<Scalar> predict_proba_rows(const MixtureModel<Scalar>& model, const Matrix<Scalar>& features,
                                  SelectorPolicy policy, int threads = 1) {
  const Matrix<Scalar> x = augment_rows(model.scaler, features);
  const Matrix<Scalar> mu = prediction_selector(model, x, policy, threads);
  Matrix<Scalar> out(x.rows(), model.q());
  for (Index n = 0; n < x.rows(); ++n)
    out.row(n) = mixture_forward(model.gate, model.experts, x.row(n).transpose(),
                                 mu.row(n).transpose())
                     .transpose();
  return out;
}

struct Metrics {
  double accuracy = 0;
  double nll = 0;  // mean negative log-likelihood
};

template <typename Scalar>
Metrics evaluate(const MixtureModel<Scalar>& model, const Dataset<Scalar>& data,
                 SelectorPolicy policy, int threads = 1) {
  detail::require(data.d() == model.d(), "dataset width does not match model");
  const Matrix<Scalar> proba = predict_proba_rows(model, data.features, policy, threads);
  Metrics m;
  long correct = 0;
  double nll = 0;
  for (Index n = 0; n < proba.rows(); ++n) {
    const int y = data.labels[static_cast<std::size_t>(n)];
    correct += argmax(proba.row(n).transpose()) == y;
    nll -= std::log(std::max(static_cast<double>(proba(n, y)), kProbFloor));
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(proba.rows());
  m.nll = nll / static_cast<double>(proba.rows());
  return m;
}

}  // namespace sparse_moe
