#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sparse_moe {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Floor applied to every probability before a logarithm is taken.
inline constexpr double kProbFloor = 1e-12;

/// Diagonal stabilizer added to every weighted normal-equation system.
inline constexpr double kRidge = 1e-8;

/// Weights whose magnitude falls below this count as pruned features.
inline constexpr double kZeroThreshold = 1e-6;

// Error hierarchy. The CLI maps each family onto a stable exit code.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shapes of the operands do not agree.
struct DimensionError : Error {
  using Error::Error;
};

/// Invalid hyperparameters or flags.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed input file or dataset.
struct DataError : Error {
  using Error::Error;
};

/// The inner least-squares engine could not produce an acceptable iterate.
struct SolverError : Error {
  using Error::Error;
};

/// Normal equations could not be factorized; callers may retry with a larger ridge.
struct SingularSystemError : SolverError {
  using SolverError::SolverError;
};

/// EM failed; carries the outer iteration at which it happened.
struct TrainingError : Error {
  TrainingError(const std::string& what, int iteration)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration(iteration) {}
  int iteration;
};

namespace detail {

inline void require(bool cond, const char* what) {
  if (!cond) throw DimensionError(what);
}

}  // namespace detail

}  // namespace sparse_moe
