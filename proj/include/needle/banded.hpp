#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace needle::fem {

/// Symmetric banded matrix, lower band stored column-wise.
///
/// Entry (i, j) with 0 <= i - j <= half_bandwidth lives at data_[(i - j) * n + j].
class BandedSpdMatrix {
 public:
  BandedSpdMatrix() = default;
  BandedSpdMatrix(std::size_t n, std::size_t half_bandwidth);

  std::size_t size() const noexcept { return n_; }
  std::size_t half_bandwidth() const noexcept { return kd_; }

  /// Symmetric read access; zero outside the band.
  double operator()(std::size_t i, std::size_t j) const;

  /// Adds `value` to (i, j) and, implicitly, to (j, i).
  void add(std::size_t i, std::size_t j, double value);

  Eigen::VectorXd multiply(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd to_dense() const;

 private:
  friend class BandedCholesky;

  double& lower(std::size_t i, std::size_t j) { return data_[(i - j) * n_ + j]; }
  double lower(std::size_t i, std::size_t j) const { return data_[(i - j) * n_ + j]; }

  std::size_t n_ = 0;
  std::size_t kd_ = 0;
  std::vector<double> data_;
};

/// Banded Cholesky factorization A = L L^T in O(n kd^2).
class BandedCholesky {
 public:
  /// Throws SolverError when a pivot is non-positive or the pivot spread
  /// indicates a numerically singular matrix.
  explicit BandedCholesky(const BandedSpdMatrix& a);

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;

  /// Squared ratio of largest to smallest Cholesky pivot; a cheap lower bound on cond(A).
  double condition_estimate() const noexcept { return condition_estimate_; }

 private:
  BandedSpdMatrix l_;
  double condition_estimate_ = 1.0;
};

/// Factorizes, solves, applies one refinement pass with a long double residual, then
/// checks the normwise backward error against 1e-10.
Eigen::VectorXd solve_banded(const BandedSpdMatrix& a, const Eigen::VectorXd& b);

}  // namespace needle::fem
