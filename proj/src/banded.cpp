#include "needle/banded.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

#include "needle/error.hpp"

namespace needle::fem {

namespace {

// Pivot loss relative to the original diagonal beyond which the matrix is
// treated as numerically singular.
constexpr double kPivotLoss = 1e-13;
constexpr double kResidualTolerance = 1e-10;

// b - A x accumulated in long double. The clamped beam systems reach cond(A)
// around 1e9, and a double residual cannot recover the digits lost there.
Eigen::VectorXd residual(const BandedSpdMatrix& a, const Eigen::VectorXd& x, const Eigen::VectorXd& b) {
  const std::size_t n = a.size();
  const std::size_t kd = a.half_bandwidth();
  Eigen::VectorXd r(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    long double s = b[static_cast<Eigen::Index>(i)];
    const std::size_t lo = i >= kd ? i - kd : 0;
    const std::size_t hi = std::min(n - 1, i + kd);
    for (std::size_t j = lo; j <= hi; ++j) {
      s -= static_cast<long double>(a(i, j)) * x[static_cast<Eigen::Index>(j)];
    }
    r[static_cast<Eigen::Index>(i)] = static_cast<double>(s);
  }
  return r;
}

}  // namespace

BandedSpdMatrix::BandedSpdMatrix(std::size_t n, std::size_t half_bandwidth)
    : n_(n), kd_(std::min(half_bandwidth, n == 0 ? 0 : n - 1)), data_((kd_ + 1) * n, 0.0) {}

double BandedSpdMatrix::operator()(std::size_t i, std::size_t j) const {
  if (i < j) std::swap(i, j);
  if (i - j > kd_) return 0.0;
  return lower(i, j);
}

void BandedSpdMatrix::add(std::size_t i, std::size_t j, double value) {
  if (i < j) std::swap(i, j);
  if (i - j > kd_ || i >= n_) {
    throw InvalidProperty("banded matrix: entry (" + std::to_string(i) + ", " + std::to_string(j) +
                          ") outside storage");
  }
  lower(i, j) += value;
}

Eigen::VectorXd BandedSpdMatrix::multiply(const Eigen::VectorXd& x) const {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_));
  for (std::size_t j = 0; j < n_; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    y[jj] += lower(j, j) * x[jj];
    const std::size_t last = std::min(n_ - 1, j + kd_);
    for (std::size_t i = j + 1; i <= last; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double a = lower(i, j);
      y[ii] += a * x[jj];
      y[jj] += a * x[ii];
    }
  }
  return y;
}

Eigen::MatrixXd BandedSpdMatrix::to_dense() const {
  const auto n = static_cast<Eigen::Index>(n_);
  Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      dense(i, j) = (*this)(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    }
  }
  return dense;
}

BandedCholesky::BandedCholesky(const BandedSpdMatrix& a) : l_(a) {
  const std::size_t n = l_.n_;
  const std::size_t kd = l_.kd_;
  double min_pivot = std::numeric_limits<double>::infinity();
  double max_pivot = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t first = j > kd ? j - kd : 0;
    double d = l_.lower(j, j);
    for (std::size_t k = first; k < j; ++k) d -= l_.lower(j, k) * l_.lower(j, k);
    const double original = a.lower(j, j);
    if (!(d > kPivotLoss * std::abs(original)) || !(original > 0.0) || !std::isfinite(d)) {
      const double cond = d > 0.0 && original > 0.0 ? original / d
                                                     : std::numeric_limits<double>::infinity();
      throw SolverError("banded Cholesky: pivot " + std::to_string(d) + " at row " +
                            std::to_string(j) + " (matrix singular or not positive definite)",
                        cond);
    }
    const double pivot = std::sqrt(d);
    l_.lower(j, j) = pivot;
    min_pivot = std::min(min_pivot, pivot);
    max_pivot = std::max(max_pivot, pivot);

    const std::size_t last = std::min(n - 1, j + kd);
    for (std::size_t i = j + 1; i <= last; ++i) {
      const std::size_t lo = i > kd ? i - kd : 0;
      double s = l_.lower(i, j);
      for (std::size_t k = std::max(first, lo); k < j; ++k) s -= l_.lower(i, k) * l_.lower(j, k);
      l_.lower(i, j) = s / pivot;
    }
  }
  if (n > 0) {
    const double ratio = max_pivot / min_pivot;
    condition_estimate_ = ratio * ratio;
  }
}

Eigen::VectorXd BandedCholesky::solve(const Eigen::VectorXd& b) const {
  const std::size_t n = l_.n_;
  const std::size_t kd = l_.kd_;
  Eigen::VectorXd x = b;
  // L y = b
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t first = i > kd ? i - kd : 0;
    double s = x[static_cast<Eigen::Index>(i)];
    for (std::size_t k = first; k < i; ++k) s -= l_.lower(i, k) * x[static_cast<Eigen::Index>(k)];
    x[static_cast<Eigen::Index>(i)] = s / l_.lower(i, i);
  }
  // L^T x = y
  for (std::size_t ii = n; ii-- > 0;) {
    const std::size_t last = std::min(n - 1, ii + kd);
    double s = x[static_cast<Eigen::Index>(ii)];
    for (std::size_t k = ii + 1; k <= last; ++k) s -= l_.lower(k, ii) * x[static_cast<Eigen::Index>(k)];
    x[static_cast<Eigen::Index>(ii)] = s / l_.lower(ii, ii);
  }
  return x;
}

Eigen::VectorXd solve_banded(const BandedSpdMatrix& a, const Eigen::VectorXd& b) {
  if (static_cast<std::size_t>(b.size()) != a.size()) {
    throw InvalidProperty("solve: right-hand side has " + std::to_string(b.size()) +
                          " entries, matrix has " + std::to_string(a.size()));
  }
  const BandedCholesky chol(a);
  Eigen::VectorXd x = chol.solve(b);
  if (b.norm() == 0.0) return x;

  // Normwise backward error |r| / (|A| |x| + |b|) in the infinity norm.
  double a_norm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double row = 0.0;
    const std::size_t lo = i >= a.half_bandwidth() ? i - a.half_bandwidth() : 0;
    const std::size_t hi = std::min(a.size() - 1, i + a.half_bandwidth());
    for (std::size_t j = lo; j <= hi; ++j) row += std::abs(a(i, j));
    a_norm = std::max(a_norm, row);
  }
  const auto backward_error = [&](const Eigen::VectorXd& r) {
    return r.cwiseAbs().maxCoeff() / (a_norm * x.cwiseAbs().maxCoeff() + b.cwiseAbs().maxCoeff());
  };

  // One refinement pass always; it costs a band product and two triangular sweeps.
  x += chol.solve(residual(a, x, b));
  const Eigen::VectorXd r = residual(a, x, b);
  const double err = backward_error(r);
  if (!(err <= kResidualTolerance)) {
    char msg[96];
    std::snprintf(msg, sizeof msg, "solve: backward error %.3e exceeds tolerance", err);
    throw SolverError(msg, chol.condition_estimate());
  }
  return x;
}

}  // namespace needle::fem
