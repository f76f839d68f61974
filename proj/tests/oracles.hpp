#pragma once

// Test-only reference computations. Nothing here calls into the library code
// paths it is used to check.

#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

namespace needle::test {

// Four-point Gauss-Legendre rule on [0, 1]; exact for polynomials up to degree 7.
inline const std::array<std::pair<double, double>, 4>& gauss4() {
  static const std::array<std::pair<double, double>, 4> rule = [] {
    const double a = std::sqrt(3.0 / 7.0 - 2.0 / 7.0 * std::sqrt(6.0 / 5.0));
    const double b = std::sqrt(3.0 / 7.0 + 2.0 / 7.0 * std::sqrt(6.0 / 5.0));
    const double wa = (18.0 + std::sqrt(30.0)) / 36.0;
    const double wb = (18.0 - std::sqrt(30.0)) / 36.0;
    return std::array<std::pair<double, double>, 4>{{{0.5 - b / 2, wb / 2},
                                                     {0.5 - a / 2, wa / 2},
                                                     {0.5 + a / 2, wa / 2},
                                                     {0.5 + b / 2, wb / 2}}};
  }();
  return rule;
}

// Cubic Hermite basis on an element of length h, local coordinate xi in [0, 1].
inline Eigen::Vector4d hermite_n(double xi, double h) {
  return {1 - 3 * xi * xi + 2 * xi * xi * xi, h * (xi - 2 * xi * xi + xi * xi * xi),
          3 * xi * xi - 2 * xi * xi * xi, h * (xi * xi * xi - xi * xi)};
}

// Second derivative with respect to x.
inline Eigen::Vector4d hermite_n_xx(double xi, double h) {
  return Eigen::Vector4d(-6 + 12 * xi, h * (-4 + 6 * xi), 6 - 12 * xi, h * (6 * xi - 2)) / (h * h);
}

inline Eigen::Matrix4d quadrature_bending(double ei, double h) {
  Eigen::Matrix4d k = Eigen::Matrix4d::Zero();
  for (const auto& [xi, w] : gauss4()) {
    const Eigen::Vector4d b = hermite_n_xx(xi, h);
    k += ei * w * h * b * b.transpose();
  }
  return k;
}

inline Eigen::Matrix4d quadrature_foundation(double k, double h) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
  for (const auto& [xi, w] : gauss4()) {
    const Eigen::Vector4d n = hermite_n(xi, h);
    m += k * w * h * n * n.transpose();
  }
  return m;
}

inline Eigen::Vector4d quadrature_load(double q, double h) {
  Eigen::Vector4d f = Eigen::Vector4d::Zero();
  for (const auto& [xi, w] : gauss4()) f += q * w * h * hermite_n(xi, h);
  return f;
}

/// Semi-infinite beam on a Winkler foundation with a transverse end force P at x = 0
/// (free end): w(x) = 2 P beta / k exp(-beta x) cos(beta x), beta = (k / 4EI)^(1/4).
inline double winkler_end_load(double x, double force, double k, double ei) {
  const double beta = std::pow(k / (4.0 * ei), 0.25);
  return 2.0 * force * beta / k * std::exp(-beta * x) * std::cos(beta * x);
}

/// Cantilever clamped at x = 0 under uniform load q: w = q x^2 (6L^2 - 4Lx + x^2) / (24 EI).
inline double cantilever_uniform(double x, double q, double length, double ei) {
  return q * x * x * (6 * length * length - 4 * length * x + x * x) / (24.0 * ei);
}

/// Dense lower-triangular solve through Eigen's LLT; used as an independent check.
inline Eigen::VectorXd dense_spd_solve(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  return a.llt().solve(b);
}

}  // namespace needle::test
