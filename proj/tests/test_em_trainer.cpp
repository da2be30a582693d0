#include "oracles.hpp"
#include "sparse_moe/data_io.hpp"
#include "sparse_moe/em_trainer.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace sparse_moe;
using Md = Eigen::MatrixXd;
using Vd = Eigen::VectorXd;
using oracle::ld;

namespace {

GateParams<double> make_gate(Md nu) { return GateParams<double>{std::move(nu)}; }
ExpertParams<double> make_experts(std::vector<Md> w) { return ExpertParams<double>{std::move(w)}; }

// Rows of N(0,1) features followed by a constant-1 bias column.
Md augmented(std::mt19937_64& rng, int n, int d) {
  Md x(n, d + 1);
  x << oracle::random_matrix(rng, n, d, 1.0), Vd::Ones(n);
  return x;
}

std::vector<int> random_labels(std::mt19937_64& rng, int n, int q) {
  std::uniform_int_distribution<int> pick(0, q - 1);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int& v : y) v = pick(rng);
  return y;
}

std::vector<ld> row_ld(const Md& m, Index r) {
  std::vector<ld> out(static_cast<std::size_t>(m.cols()));
  for (Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(j)] = m(r, j);
  return out;
}

double rel_err(const Vd& a, const Vd& b) {
  return (a - b).norm() / std::max(1e-12, std::max(a.norm(), b.norm()));
}

DatasetD two_cluster_data() { return generate_synthetic(synth_preset("two-cluster-xor", 50, 0, 3)); }

}  // namespace

// --- E-step ------------------------------------------------------------------

TEST(EStep, IdenticalExpertsUniformGate) {
  std::mt19937_64 rng(21);
  const Md w = oracle::random_matrix(rng, 3, 3, 1.0);
  const Md x = augmented(rng, 10, 2);
  const auto r = e_step(make_gate(Md::Zero(4, 3)), make_experts({w, w, w, w}), x,
                        random_labels(rng, 10, 3), Md(Md::Ones(10, 4)));
  EXPECT_LT((r.array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(EStep, SingleExpertIsOne) {
  std::mt19937_64 rng(22);
  const Md x = augmented(rng, 7, 3);
  const auto r = e_step(make_gate(oracle::random_matrix(rng, 1, 4, 1.0)),
                        make_experts(oracle::random_experts(rng, 1, 2, 4, 1.0)), x,
                        random_labels(rng, 7, 2), Md(Md::Ones(7, 1)));
  EXPECT_EQ(r, Md::Ones(7, 1));
}

TEST(EStep, MatchesExtendedPrecisionQuotient) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> unif(0.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Md nu = oracle::random_matrix(rng, 3, 3, 1.0);
    const auto omega = oracle::random_experts(rng, 3, 2, 3, 1.5);
    const Md x = augmented(rng, 5, 2);
    const auto y = random_labels(rng, 5, 2);
    Md mu(5, 3);
    for (int n = 0; n < 5; ++n)
      for (int i = 0; i < 3; ++i) mu(n, i) = unif(rng);
    const Md r = e_step(make_gate(nu), make_experts(omega), x, y, mu);
    for (int n = 0; n < 5; ++n) {
      const auto ref = oracle::posterior(nu, omega, x.row(n).transpose(), y[n], mu.row(n).transpose());
      for (int i = 0; i < 3; ++i) EXPECT_NEAR(r(n, i), static_cast<double>(ref[i]), 1e-12);
    }
  }
}

// --- Targets -----------------------------------------------------------------

TEST(ExpertTargets, LogClampedOneHot) {
  const Md t = build_expert_targets({0, 1}, 2, 1e-3);
  EXPECT_EQ(t(0, 0), 0.0);
  EXPECT_NEAR(t(0, 1), -6.907755, 1e-6);
  EXPECT_EQ(t(1, 1), 0.0);
  EXPECT_EQ(t(1, 0), t(0, 1));
  EXPECT_THROW(build_expert_targets({0}, 2, 1.0), ConfigError);
}

TEST(GateTargets, ClampAndLogHalf) {
  Md r(2, 2);
  r << 1.0, 0.0, 0.5, 0.5;
  const Md t = build_gate_targets(r);
  EXPECT_EQ(t(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(t(0, 1), std::log(1e-12));
  EXPECT_NEAR(t(1, 0), -0.693147, 1e-6);
  EXPECT_EQ(t(1, 0), t(1, 1));
}

// --- Gradients ---------------------------------------------------------------

TEST(Gradients, GateVanishesAtPosteriorMatch) {
  // K=2 identical experts: posterior equals the gate, so the factor is zero.
  std::mt19937_64 rng(24);
  const Md w = oracle::random_matrix(rng, 2, 3, 1.0);
  const auto experts = make_experts({w, w});
  const auto gate = make_gate(oracle::random_matrix(rng, 2, 3, 1.0));
  const Vd x = augmented(rng, 1, 2).row(0).transpose();
  EXPECT_LT(analytic_gate_gradient(gate, experts, Vd::Ones(2), x, 1, 0).cwiseAbs().maxCoeff(),
            1e-15);
  EXPECT_LT(std::abs(analytic_selector_gradient(gate, experts, Vd::Ones(2), x, 1, 1)), 1e-15);
}

TEST(Gradients, ZeroSelectorOrZeroGateRow) {
  std::mt19937_64 rng(25);
  Md nu = oracle::random_matrix(rng, 2, 3, 1.0);
  nu.row(1).setZero();
  const auto gate = make_gate(nu);
  const auto experts = make_experts(oracle::random_experts(rng, 2, 2, 3, 1.0));
  const Vd x = augmented(rng, 1, 2).row(0).transpose();
  Vd mu(2);
  mu << 0.0, 1.0;
  EXPECT_EQ(analytic_gate_gradient(gate, experts, mu, x, 0, 0), Vd::Zero(3));
  EXPECT_EQ(analytic_selector_gradient(gate, experts, mu, x, 0, 1), 0.0);
}

TEST(Gradients, CentralFiniteDifferences) {
  std::mt19937_64 rng(26);
  std::uniform_real_distribution<double> unif(0.2, 1.5);
  const double h = 1e-6;
  for (int trial = 0; trial < 10; ++trial) {
    const int k = 2 + trial % 3;
    const Md nu = oracle::random_matrix(rng, k, 4, 0.7);
    const auto omega = oracle::random_experts(rng, k, 3, 4, 0.7);
    const Vd x = augmented(rng, 1, 3).row(0).transpose();
    Vd mu(k);
    for (int i = 0; i < k; ++i) mu(i) = unif(rng);
    const int y = trial % 3;
    for (int i = 0; i < k; ++i) {
      Vd fd(4);
      for (int j = 0; j < 4; ++j) {
        Md up = nu, down = nu;
        up(i, j) += h;
        down(i, j) -= h;
        fd(j) = static_cast<double>((oracle::loss(up, omega, x, y, mu) -
                                     oracle::loss(down, omega, x, y, mu)) / (2 * h));
      }
      const Vd g = analytic_gate_gradient(make_gate(nu), make_experts(omega), mu, x, y, i);
      EXPECT_LT(rel_err(g, fd), 1e-5) << "trial " << trial << " expert " << i;

      Vd mu_up = mu, mu_down = mu;
      mu_up(i) += h;
      mu_down(i) -= h;
      const double fd_mu = static_cast<double>(
          (oracle::loss(nu, omega, x, y, mu_up) - oracle::loss(nu, omega, x, y, mu_down)) / (2 * h));
      const double g_mu = analytic_selector_gradient(make_gate(nu), make_experts(omega), mu, x, y, i);
      EXPECT_LT(std::abs(g_mu - fd_mu) / std::max(1e-12, std::abs(fd_mu)), 1e-5);
    }
  }
}

// --- Expert M-step -----------------------------------------------------------

TEST(ExpertMStep, HugeRadiusEqualsWeightedLeastSquares) {
  std::mt19937_64 rng(27);
  const Md x = augmented(rng, 40, 3);
  const auto y = random_labels(rng, 40, 3);
  Md r = (oracle::random_matrix(rng, 40, 2, 1.0).array().abs() + 0.1).matrix();
  r = (r.array().colwise() / r.rowwise().sum().array()).matrix();
  const Md targets = build_expert_targets(y, 3);
  const auto update = m_step_experts(r, x, targets, 1e9, ExpertParams<double>::zeros(2, 3, 4));
  for (int i = 0; i < 2; ++i)
    for (int l = 0; l < 3; ++l) {
      const auto ref = oracle::normal_equations(x, targets.col(l), r.col(i), 1e-8L);
      for (int j = 0; j < 4; ++j)
        EXPECT_NEAR(update.params.by_expert[i](l, j), static_cast<double>(ref[j]), 1e-6);
    }
}

TEST(ExpertMStep, EmptyExpertLeftUnchanged) {
  std::mt19937_64 rng(28);
  const Md x = augmented(rng, 10, 2);
  Md r(10, 2);
  r.col(0).setOnes();
  r.col(1).setZero();
  const auto incumbent = make_experts(oracle::random_experts(rng, 2, 2, 3, 1.0));
  const auto update =
      m_step_experts(r, x, build_expert_targets(random_labels(rng, 10, 2), 2), 1.0, incumbent);
  EXPECT_EQ(update.params.by_expert[1], incumbent.by_expert[1]);
  EXPECT_EQ(update.empty_experts, std::vector<Index>{1});
  EXPECT_NE(update.params.by_expert[0], incumbent.by_expert[0]);
}

TEST(ExpertMStep, GridOracleTwoFeatures) {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 5; ++trial) {
    const Md x = augmented(rng, 6, 2);
    const auto y = random_labels(rng, 6, 2);
    Md r(6, 1);
    for (int n = 0; n < 6; ++n) r(n, 0) = 0.2 + 0.15 * n;
    const Md targets = build_expert_targets(y, 2);
    const double t = 0.5 + 0.5 * trial;
    const auto update = m_step_experts(r, x, targets, t, ExpertParams<double>::zeros(1, 2, 3));
    for (int l = 0; l < 2; ++l) {
      const Vd b = targets.col(l);
      const Vd w = r.col(0);
      const auto grid = oracle::grid_2d(
          [&](ld a0, ld a1) { return oracle::minimize_free_coord(x, b, w, {a0, a1, 0.0L}, 2); },
          t, 1e-3L, false);
      const ld ours = oracle::wls_objective(x, b, w, row_ld(update.params.by_expert[0], l));
      EXPECT_LE(static_cast<double>(ours - grid.objective), 1e-4);
      EXPECT_LE(update.params.by_expert[0].row(l).head(2).cwiseAbs().sum(), t + 1e-8);
    }
  }
}

TEST(ExpertMStep, UnconstrainedModeIgnoresRadius) {
  std::mt19937_64 rng(30);
  const Md x = augmented(rng, 30, 2);
  const Md targets = build_expert_targets(random_labels(rng, 30, 2), 2);
  const Md r = Md::Ones(30, 1);
  const auto plain =
      m_step_experts(r, x, targets, 1e-3, ExpertParams<double>::zeros(1, 2, 3), false);
  const auto loose = m_step_experts(r, x, targets, 1e9, ExpertParams<double>::zeros(1, 2, 3));
  EXPECT_LT((plain.params.by_expert[0] - loose.params.by_expert[0]).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(plain.plain_solves, 2);
  EXPECT_EQ(plain.constrained_solves, 0);
}

// --- Gate M-step -------------------------------------------------------------

TEST(GateMStep, HugeRadiusEqualsLeastSquares) {
  std::mt19937_64 rng(31);
  const Md x = augmented(rng, 25, 3);
  Md r = (oracle::random_matrix(rng, 25, 3, 1.0).array().abs() + 0.05).matrix();
  r = (r.array().colwise() / r.rowwise().sum().array()).matrix();
  const auto update =
      m_step_gate(r, x, Md(Md::Ones(25, 3)), 1e9, make_gate(Md::Zero(3, 4)));
  const Md t = build_gate_targets(r);
  for (int i = 0; i < 3; ++i) {
    const auto ref = oracle::normal_equations(x, t.col(i), Vd::Ones(25), 1e-8L);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(update.params.nu(i, j), static_cast<double>(ref[j]), 1e-6);
  }
}

TEST(GateMStep, GridOracleTwoFeatures) {
  std::mt19937_64 rng(32);
  const Md x = augmented(rng, 8, 2);
  Md r = (oracle::random_matrix(rng, 8, 2, 1.0).array().abs() + 0.05).matrix();
  r = (r.array().colwise() / r.rowwise().sum().array()).matrix();
  Md mu = Md::Ones(8, 2);
  mu(3, 0) = 0.5;
  mu(5, 1) = 0.0;
  const double t = 0.4;
  const auto update = m_step_gate(r, x, mu, t, make_gate(Md::Zero(2, 3)));
  const Md targets = build_gate_targets(r);
  for (int i = 0; i < 2; ++i) {
    // Dropping a row with mu = 0 is the same as giving it weight zero.
    const Md design = mu.col(i).asDiagonal() * x;
    const Vd w = (mu.col(i).array() != 0).cast<double>();
    const Vd b = targets.col(i);
    const auto grid = oracle::grid_2d(
        [&](ld a0, ld a1) { return oracle::minimize_free_coord(design, b, w, {a0, a1, 0.0L}, 2); },
        t, 1e-3L, false);
    const ld ours = oracle::wls_objective(design, b, w, row_ld(update.params.nu, i));
    EXPECT_LE(static_cast<double>(ours - grid.objective), 1e-4) << "gate " << i;
  }
}

TEST(GateMStep, UnselectedExpertKeepsIncumbent) {
  std::mt19937_64 rng(33);
  const Md x = augmented(rng, 5, 2);
  Md mu = Md::Ones(5, 2);
  mu.col(1).setZero();
  const auto incumbent = make_gate(oracle::random_matrix(rng, 2, 3, 1.0));
  const auto update = m_step_gate(Md(Md::Constant(5, 2, 0.5)), x, mu, 1.0, incumbent);
  EXPECT_EQ(update.params.nu.row(1), incumbent.nu.row(1));
  EXPECT_EQ(update.unselected, std::vector<Index>{1});
  EXPECT_EQ(update.solves, 1);
}

// --- Selectors ---------------------------------------------------------------

TEST(SelectorNorm0, SingletonBudgetMatchesDirectEvaluation) {
  std::mt19937_64 rng(34);
  const Md nu = oracle::random_matrix(rng, 3, 3, 1.5);
  const auto omega = oracle::random_experts(rng, 3, 2, 3, 2.0);
  const Md x = augmented(rng, 30, 2);
  const auto y = random_labels(rng, 30, 2);
  const auto sel = m_step_selector_norm0(make_gate(nu), make_experts(omega), x, y, 1.0);
  for (int n = 0; n < 30; ++n) {
    // mu = e_i zeroes the other logits; it does not remove those experts.
    int best = 0;
    ld best_loss = 0;
    for (int i = 0; i < 3; ++i) {
      const ld loss = oracle::loss(nu, omega, x.row(n).transpose(), y[n], Vd::Unit(3, i));
      if (i == 0 || loss < best_loss) {
        best = i;
        best_loss = loss;
      }
    }
    EXPECT_EQ(sel.mu.row(n).sum(), 1.0);
    EXPECT_EQ(sel.mu(n, best), 1.0) << "instance " << n;
  }
}

TEST(SelectorNorm0, FullBudgetNeverWorseThanAllOnes) {
  std::mt19937_64 rng(35);
  const Md nu = oracle::random_matrix(rng, 3, 3, 1.0);
  const auto omega = oracle::random_experts(rng, 3, 3, 3, 1.0);
  const Md x = augmented(rng, 20, 2);
  const auto y = random_labels(rng, 20, 3);
  const auto sel = m_step_selector_norm0(make_gate(nu), make_experts(omega), x, y, 3.0);
  for (int n = 0; n < 20; ++n) {
    const Vd xn = x.row(n).transpose();
    EXPECT_LE(oracle::loss(nu, omega, xn, y[n], sel.mu.row(n).transpose()),
              oracle::loss(nu, omega, xn, y[n], Vd::Ones(3)) + 1e-12L);
  }
}

TEST(SelectorNorm0, IdenticalExpertsPickSmallestSubset) {
  std::mt19937_64 rng(36);
  const Md w = oracle::random_matrix(rng, 2, 3, 1.0);
  const Md nu = oracle::random_matrix(rng, 2, 3, 1.0);
  const Md x = augmented(rng, 5, 2);
  const auto sel = m_step_selector_norm0(make_gate(nu), make_experts({w, w}), x,
                                         random_labels(rng, 5, 2), 2.0);
  for (int n = 0; n < 5; ++n) {
    EXPECT_EQ(sel.mu(n, 0), 1.0);
    EXPECT_EQ(sel.mu(n, 1), 0.0);
  }
}

TEST(SelectorNorm0, RejectsFractionalBudget) {
  const Md x = Md::Ones(1, 2);
  EXPECT_THROW(m_step_selector_norm0(make_gate(Md::Zero(2, 2)), ExpertParams<double>::zeros(2, 2, 2),
                                     x, {0}, 1.5),
               ConfigError);
}

TEST(SelectorNorm1, SingleExpertClosedForm) {
  Md nu(1, 2);
  nu << 0.5, -1.0;
  Md x(2, 2);
  x << 1.0, 1.0, 4.0, 1.0;
  Md r(2, 1);
  r << 0.3, 1.0;  // a real E-step gives 1 for K=1; exercise the formula anyway
  const auto sel = m_step_selector_norm1(make_gate(nu), r, x, 1.0);
  // score -0.5, target log 0.3 < 0: ratio is positive
  EXPECT_NEAR(sel.mu(0, 0), std::min(1.0, std::log(0.3) / -0.5), 1e-8);
  // score 1, target 0: ratio 0
  EXPECT_NEAR(sel.mu(1, 0), 0.0, 1e-12);
}

TEST(SelectorNorm1, ZeroGateGivesZeroRow) {
  const auto sel = m_step_selector_norm1(make_gate(Md::Zero(3, 2)), Md(Md::Constant(4, 3, 1.0 / 3)),
                                         Md(Md::Ones(4, 2)), 2.0);
  EXPECT_EQ(sel.mu, Md::Zero(4, 3));
}

TEST(SelectorNorm1, GridOracleOnTriangle) {
  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 5; ++trial) {
    const Md nu = oracle::random_matrix(rng, 2, 3, 2.0);
    const Md x = augmented(rng, 1, 2);
    Md r(1, 2);
    std::uniform_real_distribution<double> unif(0.01, 0.99);
    r(0, 0) = unif(rng);
    r(0, 1) = 1 - r(0, 0);
    const double budget = 0.5 + 0.5 * trial;
    const auto sel = m_step_selector_norm1(make_gate(nu), r, x, budget);
    const Vd s = nu * x.row(0).transpose();
    const Vd t = build_gate_targets(r).row(0).transpose();
    auto f = [&](ld a, ld b) {
      const ld e0 = t(0) - a * s(0);
      const ld e1 = t(1) - b * s(1);
      return e0 * e0 + e1 * e1;
    };
    const auto grid = oracle::grid_2d(f, budget, 1e-3L, true);
    EXPECT_LE(static_cast<double>(f(sel.mu(0, 0), sel.mu(0, 1)) - grid.objective), 1e-4);
    EXPECT_GE(sel.mu.minCoeff(), 0.0);
    EXPECT_LE(sel.mu.sum(), budget + 1e-8);
  }
}

// --- Fit ---------------------------------------------------------------------

TEST(Fit, SingleExpertReducesToOneClassifier) {
  const auto data = two_cluster_data();
  Hyperparams h;
  h.k = 1;
  h.lambda_nu = 1.0;
  h.lambda_omega = 2.0;
  h.max_iters = 5;
  const auto res = fit(data, h);
  const Md x = augment_rows(res.model.scaler, data.features);
  // log R = 0 everywhere, so the gate regression lands on zero.
  EXPECT_LT(res.model.gate.nu.cwiseAbs().maxCoeff(), 1e-12);
  for (Index n = 0; n < x.rows(); ++n) {
    const Vd xn = x.row(n).transpose();
    EXPECT_EQ(mixture_forward(res.model.gate, res.model.experts, xn, Vd::Ones(1)),
              expert_forward(res.model.experts, 0, xn));
  }
  for (Index l = 0; l < res.model.q(); ++l)
    EXPECT_LE(res.model.experts.by_expert[0].row(l).head(2).cwiseAbs().sum(), 2.0 + 1e-8);
}

TEST(Fit, DeterministicReport) {
  const auto data = two_cluster_data();
  Hyperparams h;
  h.k = 2;
  h.lambda_nu = 3.0;
  h.lambda_omega = 3.0;
  h.max_iters = 8;
  h.seed = 5;
  const auto a = fit(data, h);
  const auto b = fit(data, h);
  ASSERT_EQ(a.report.trace.size(), b.report.trace.size());
  for (std::size_t i = 0; i < a.report.trace.size(); ++i)
    EXPECT_EQ(a.report.trace[i].penalized_total, b.report.trace[i].penalized_total);
  EXPECT_EQ(a.model.gate.nu, b.model.gate.nu);
  EXPECT_EQ(a.report.selector_histogram, b.report.selector_histogram);

  FitOptions threaded;
  threaded.threads = 4;
  const auto c = fit(data, h, threaded);
  EXPECT_EQ(a.model.gate.nu, c.model.gate.nu);
  EXPECT_EQ(a.model.experts.by_expert, c.model.experts.by_expert);
}

TEST(Fit, ObjectiveImprovesOnTwoClusterTask) {
  const auto data = two_cluster_data();
  Hyperparams h;
  h.k = 2;
  h.lambda_nu = 5.0;
  h.lambda_omega = 5.0;
  h.seed = 7;
  const auto res = fit(data, h);
  EXPECT_GT(res.report.final_objective(), res.report.trace.front().penalized_total);
  for (const auto& rec : res.report.trace) EXPECT_TRUE(rec.finite());
  EXPECT_GE(res.report.sparsity, 0.0);
  EXPECT_LE(res.report.sparsity, 1.0);
}

TEST(Fit, FastScheduleEndsConstrained) {
  const auto data = two_cluster_data();
  Hyperparams h;
  h.k = 2;
  h.lambda_nu = 2.0;
  h.lambda_omega = 0.5;
  h.max_iters = 6;
  h.schedule = Schedule::fast;
  const auto res = fit(data, h);
  EXPECT_GT(res.report.expert_plain_solves, 0);
  EXPECT_GT(res.report.expert_constrained_solves, 0);
  for (const auto& w : res.model.experts.by_expert)
    for (Index l = 0; l < w.rows(); ++l)
      EXPECT_LE(w.row(l).head(w.cols() - 1).cwiseAbs().sum(), 0.5 + 1e-8);
}

TEST(Fit, SelectorModesRespectBudget) {
  const auto data = two_cluster_data();
  for (auto mode : {SelectorMode::l0, SelectorMode::l1}) {
    Hyperparams h;
    h.k = 3;
    h.lambda_nu = 2.0;
    h.lambda_omega = 2.0;
    h.selector_mode = mode;
    h.lambda_mu = 1.0;
    h.max_iters = 5;
    const auto res = fit(data, h);
    EXPECT_TRUE(res.selector.satisfies_budget(1.0 + 1e-9));
    long total = 0;
    for (long c : res.report.selector_histogram) total += c;
    EXPECT_EQ(total, data.n());
    EXPECT_EQ(res.report.trace.back().selector_penalty, 0.0);
  }
}

TEST(Fit, RejectsInvalidConfig) {
  const auto data = two_cluster_data();
  Hyperparams h;
  h.lambda_nu = -1;
  EXPECT_THROW(fit(data, h), ConfigError);
}

// --- Evaluate ----------------------------------------------------------------

TEST(Evaluate, UniformModelNllIsLogTwo) {
  const auto data = two_cluster_data();
  MixtureModel<double> model;
  model.scaler = Scaler<double>::identity(2);
  model.gate = make_gate(Md::Zero(2, 3));
  model.experts = ExpertParams<double>::zeros(2, 2, 3);
  model.label_names = data.label_names;
  const auto m = evaluate(model, data, SelectorPolicy::ones);
  EXPECT_NEAR(m.nll, 0.693147, 1e-6);
  EXPECT_GE(m.accuracy, 0.0);
  EXPECT_LE(m.accuracy, 1.0);
}

TEST(Evaluate, SeparableTaskIsPerfect) {
  SynthSpec spec;
  spec.n_per_cluster = 40;
  spec.clusters = {{{4.0}, {0}, 0}, {{-4.0}, {0}, 1}};
  const auto data = generate_synthetic(spec);
  Hyperparams h;
  h.k = 1;
  h.lambda_nu = 1.0;
  h.lambda_omega = 20.0;
  const auto res = fit(data, h);
  EXPECT_EQ(evaluate(res.model, data, SelectorPolicy::ones).accuracy, 1.0);
}

TEST(Evaluate, OnesPolicyEqualsPlainMixture) {
  std::mt19937_64 rng(38);
  const auto data = two_cluster_data();
  MixtureModel<double> model;
  model.scaler = fit_scaler(data.features);
  model.gate = make_gate(oracle::random_matrix(rng, 2, 3, 1.0));
  model.experts = make_experts(oracle::random_experts(rng, 2, 2, 3, 1.0));
  const Md proba = predict_proba_rows(model, data.features, SelectorPolicy::ones);
  for (Index n = 0; n < data.n(); ++n) {
    const Vd xn = augment(model.scaler, Vd(data.features.row(n).transpose()));
    EXPECT_EQ(Vd(proba.row(n).transpose()), mixture_forward(model.gate, model.experts, xn, Vd::Ones(2)));
  }
}

TEST(Evaluate, GateSurrogateRowsAreDistributions) {
  const auto data = two_cluster_data();
  Hyperparams h;
  h.k = 2;
  h.lambda_nu = 2.0;
  h.lambda_omega = 2.0;
  h.selector_mode = SelectorMode::l1;
  h.lambda_mu = 1.5;
  h.max_iters = 4;
  const auto res = fit(data, h);
  const Md proba = predict_proba_rows(res.model, data.features, SelectorPolicy::gate_surrogate);
  EXPECT_LT((proba.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
}
