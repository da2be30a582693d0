#pragma once

// Parameter containers and forward evaluation for a mixture of softmax
// experts with a (optionally selector-masked) softmax gate.
//
// Every input vector handed to the forward functions is "augmented": it is
// already standardized and carries a trailing constant 1 for the bias
// weight. predict_proba / predict_label accept raw feature vectors and do
// the augmentation themselves using the stored scaler.

#include "sparse_moe/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace sparse_moe {

enum class SelectorMode { none, l0, l1 };
enum class Schedule { full, fast };

std::string to_string(SelectorMode mode);
std::string to_string(Schedule schedule);
SelectorMode parse_selector_mode(const std::string& text);
Schedule parse_schedule(const std::string& text);

/// Binomial coefficient saturating at UINT64_MAX.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t result = 1;
  for (std::uint64_t j = 1; j <= k; ++j) {
    const std::uint64_t num = n - k + j;
    if (result > UINT64_MAX / num) return UINT64_MAX;
    result = result * num / j;
  }
  return result;
}

inline constexpr std::uint64_t kMaxSubsetCombinations = 1'000'000;

/// Training configuration. The three lambdas are L1 radii (constraint
/// budgets), not penalty multipliers.
struct Hyperparams {
  int k = 2;
  double lambda_nu = 1.0;
  double lambda_omega = 1.0;
  double lambda_mu = 1.0;
  SelectorMode selector_mode = SelectorMode::none;
  int max_iters = 30;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::full;

  void validate() const {
    if (k < 1) throw ConfigError("expert count must be >= 1");
    if (!(lambda_nu > 0) || !std::isfinite(lambda_nu))
      throw ConfigError("lambda_nu must be a positive finite radius");
    if (!(lambda_omega > 0) || !std::isfinite(lambda_omega))
      throw ConfigError("lambda_omega must be a positive finite radius");
    if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
    if (!(tol >= 0)) throw ConfigError("tol must be non-negative");
    if (selector_mode == SelectorMode::none) return;
    if (!(lambda_mu > 0) || !std::isfinite(lambda_mu))
      throw ConfigError("lambda_mu must be positive");
    if (selector_mode == SelectorMode::l0) {
      if (lambda_mu != std::floor(lambda_mu))
        throw ConfigError("lambda_mu must be an integer in l0 mode");
      const auto budget = static_cast<std::uint64_t>(std::min<double>(lambda_mu, k));
      if (binomial(static_cast<std::uint64_t>(k), budget) > kMaxSubsetCombinations)
        throw ConfigError("C(k, lambda_mu) exceeds the enumeration guard of 1e6");
    }
  }
};

template <typename Scalar>
struct Dataset {
  Matrix<Scalar> features;  // n x d
  std::vector<int> labels;
  int q = 0;
  std::vector<std::string> label_names;  // token for each dense class id

  Index n() const { return features.rows(); }
  Index d() const { return features.cols(); }

  void validate() const {
    if (n() < 1) throw DataError("dataset has no rows");
    if (d() < 1) throw DataError("dataset has no feature columns");
    if (q < 2) throw DataError("dataset needs at least 2 classes");
    if (static_cast<Index>(labels.size()) != n())
      throw DataError("label count does not match row count");
    for (int y : labels)
      if (y < 0 || y >= q) throw DataError("label id out of range");
    if (!features.allFinite()) throw DataError("non-finite feature value");
  }
};

/// Per-feature standardization recorded at training time.
template <typename Scalar>
struct Scaler {
  Vector<Scalar> mean;
  Vector<Scalar> std;

  static Scaler identity(Index d) {
    return {Vector<Scalar>::Zero(d), Vector<Scalar>::Ones(d)};
  }
};

/// Column means and population standard deviations (floored at 1e-12).
template <typename Scalar>
Scaler<Scalar> fit_scaler(const Matrix<Scalar>& features) {
  Scaler<Scalar> s;
  s.mean = features.colwise().mean().transpose();
  const Matrix<Scalar> centered = features.rowwise() - s.mean.transpose();
  s.std = (centered.colwise().squaredNorm() / static_cast<Scalar>(features.rows()))
              .cwiseSqrt()
              .transpose()
              .cwiseMax(Scalar(kProbFloor));
  return s;
}

template <typename Scalar>
Matrix<Scalar> apply_scaler(const Matrix<Scalar>& features, const Scaler<Scalar>& scaler) {
  if (features.cols() != scaler.mean.size()) throw DimensionError("scaler width mismatch");
  return ((features.rowwise() - scaler.mean.transpose()).array().rowwise() /
          scaler.std.transpose().array())
      .matrix();
}

template <typename Scalar>
struct GateParams {
  Matrix<Scalar> nu;  // K x D', last column is the bias
  Index k() const { return nu.rows(); }
};

template <typename Scalar>
struct ExpertParams {
  // by_expert[i] is the Q x D' weight matrix of expert i; row l scores class l.
  std::vector<Matrix<Scalar>> by_expert;

  Index k() const { return static_cast<Index>(by_expert.size()); }
  Index q() const { return by_expert.empty() ? 0 : by_expert.front().rows(); }

  static ExpertParams zeros(Index k, Index q, Index d_aug) {
    return {std::vector<Matrix<Scalar>>(k, Matrix<Scalar>::Zero(q, d_aug))};
  }
};

/// Per-instance expert relevance vectors, one row per instance.
template <typename Scalar>
struct ExpertSelector {
  Matrix<Scalar> mu;  // N x K
  SelectorMode mode = SelectorMode::none;

  static ExpertSelector ones(Index n, Index k, SelectorMode mode = SelectorMode::none) {
    return {Matrix<Scalar>::Ones(n, k), mode};
  }

  /// Checks the per-mode invariants; returns false on the first violation.
  bool satisfies_budget(double lambda_mu) const {
    for (Index n = 0; n < mu.rows(); ++n) {
      const auto row = mu.row(n);
      switch (mode) {
        case SelectorMode::none:
          if ((row.array() != Scalar(1)).any()) return false;
          break;
        case SelectorMode::l0: {
          Index active = 0;
          for (Index i = 0; i < row.size(); ++i) {
            if (row(i) != Scalar(0) && row(i) != Scalar(1)) return false;
            active += row(i) == Scalar(1);
          }
          if (static_cast<double>(active) > lambda_mu) return false;
          break;
        }
        case SelectorMode::l1:
          if ((row.array() < Scalar(0)).any()) return false;
          if (static_cast<double>(row.sum()) > lambda_mu + 1e-8) return false;
          break;
      }
    }
    return true;
  }
};

template <typename Scalar>
struct MixtureModel {
  GateParams<Scalar> gate;
  ExpertParams<Scalar> experts;
  Hyperparams hyper;
  Scaler<Scalar> scaler;
  std::vector<std::string> label_names;

  Index k() const { return gate.k(); }
  Index q() const { return experts.q(); }
  Index d() const { return gate.nu.cols() - 1; }

  void validate() const {
    detail::require(k() >= 1, "model needs at least one expert");
    detail::require(experts.k() == k(), "gate and expert counts differ");
    for (const auto& w : experts.by_expert) {
      detail::require(w.rows() == q() && w.cols() == gate.nu.cols(),
                      "expert weight shape mismatch");
      detail::require(w.allFinite(), "non-finite expert weight");
    }
    detail::require(gate.nu.allFinite(), "non-finite gate weight");
    detail::require(scaler.mean.size() == d() && scaler.std.size() == d(),
                    "scaler shape mismatch");
  }
};

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

/// Numerically stable softmax (max-subtracted).
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  Vector<Scalar> out = (logits.array() - logits.maxCoeff()).exp().matrix();
  out /= out.sum();
  return out;
}

/// Standardizes a raw D-vector and appends the bias slot.
template <typename Scalar, typename Derived>
Vector<Scalar> augment(const Scaler<Scalar>& scaler, const Eigen::MatrixBase<Derived>& x) {
  detail::require(x.size() == scaler.mean.size(), "feature vector length mismatch");
  const Index d = x.size();
  Vector<Scalar> out(d + 1);
  out.head(d) = ((x.array() - scaler.mean.array()) / scaler.std.array()).matrix();
  out(d) = Scalar(1);
  return out;
}

/// Standardizes every row of X and appends the bias column.
template <typename Scalar>
Matrix<Scalar> augment_rows(const Scaler<Scalar>& scaler, const Matrix<Scalar>& x) {
  detail::require(x.cols() == scaler.mean.size(), "feature matrix width mismatch");
  Matrix<Scalar> out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = apply_scaler(x, scaler);
  out.col(x.cols()).setOnes();
  return out;
}

/// Gate distribution p(m_i | x) with every logit nu_i . x scaled by mu_i.
template <typename Scalar, typename DerivedX, typename DerivedMu>
Vector<Scalar> gate_forward(const GateParams<Scalar>& gate,
                            const Eigen::MatrixBase<DerivedX>& x,
                            const Eigen::MatrixBase<DerivedMu>& mu_row) {
  detail::require(x.size() == gate.nu.cols(), "gate input length mismatch");
  detail::require(mu_row.size() == gate.k(), "selector row length mismatch");
  const Vector<Scalar> logits = (mu_row.array() * (gate.nu * x).array()).matrix();
  return softmax(logits);
}

/// Plain (unselected) gate.
template <typename Scalar, typename DerivedX>
Vector<Scalar> gate_forward(const GateParams<Scalar>& gate,
                            const Eigen::MatrixBase<DerivedX>& x) {
  return gate_forward(gate, x, Vector<Scalar>::Ones(gate.k()));
}

/// Class distribution p(y | x, m_i) of expert i.
template <typename Scalar, typename DerivedX>
Vector<Scalar> expert_forward(const ExpertParams<Scalar>& experts, Index i,
                              const Eigen::MatrixBase<DerivedX>& x) {
  if (i < 0 || i >= experts.k()) throw DimensionError("expert index out of range");
  const auto& w = experts.by_expert[static_cast<std::size_t>(i)];
  detail::require(x.size() == w.cols(), "expert input length mismatch");
  return softmax(w * x);
}

/// Q x K matrix whose column i is expert i's class distribution.
template <typename Scalar, typename DerivedX>
Matrix<Scalar> expert_table(const ExpertParams<Scalar>& experts,
                            const Eigen::MatrixBase<DerivedX>& x) {
  Matrix<Scalar> table(experts.q(), experts.k());
  for (Index i = 0; i < experts.k(); ++i) table.col(i) = expert_forward(experts, i, x);
  return table;
}

/// Mixture class distribution for an augmented input.
template <typename Scalar, typename DerivedX, typename DerivedMu>
Vector<Scalar> mixture_forward(const GateParams<Scalar>& gate,
                               const ExpertParams<Scalar>& experts,
                               const Eigen::MatrixBase<DerivedX>& x,
                               const Eigen::MatrixBase<DerivedMu>& mu_row) {
  const Vector<Scalar> h = gate_forward(gate, x, mu_row);
  return expert_table(experts, x) * h;
}

/// p(y | x) for a raw feature vector.
template <typename Scalar, typename DerivedX, typename DerivedMu>
Vector<Scalar> predict_proba(const MixtureModel<Scalar>& model,
                             const Eigen::MatrixBase<DerivedX>& x,
                             const Eigen::MatrixBase<DerivedMu>& mu_row) {
  const Vector<Scalar> xa = augment(model.scaler, x);
  return mixture_forward(model.gate, model.experts, xa, mu_row);
}

/// Smallest index attaining the maximum.
template <typename Derived>
int argmax(const Eigen::MatrixBase<Derived>& p) {
  Index best = 0;
  for (Index j = 1; j < p.size(); ++j)
    if (p(j) > p(best)) best = j;
  return static_cast<int>(best);
}

template <typename Scalar, typename DerivedX, typename DerivedMu>
int predict_label(const MixtureModel<Scalar>& model, const Eigen::MatrixBase<DerivedX>& x,
                  const Eigen::MatrixBase<DerivedMu>& mu_row) {
  return argmax(predict_proba(model, x, mu_row));
}

// ---------------------------------------------------------------------------
// Norm helpers (bias column excluded)
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar weight_l1(const Matrix<Scalar>& w) {
  return w.leftCols(w.cols() - 1).cwiseAbs().sum();
}

}  // namespace sparse_moe
