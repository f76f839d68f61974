#pragma once

#include <cmath>

#include <Eigen/Core>

namespace needle::sim {

/// Planar position plus heading (rad).
struct Pose2 {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  double angle = 0.0;

  Eigen::Vector2d axis() const { return {std::cos(angle), std::sin(angle)}; }
  Eigen::Vector2d normal() const { return {-std::sin(angle), std::cos(angle)}; }
};

/// Rigid motion p -> R(angle) p + translation.
class Rigid2 {
 public:
  Rigid2() = default;
  Rigid2(double angle, Eigen::Vector2d translation)
      : angle_(angle), c_(std::cos(angle)), s_(std::sin(angle)), t_(std::move(translation)) {}

  double angle() const noexcept { return angle_; }
  const Eigen::Vector2d& translation() const noexcept { return t_; }

  Eigen::Vector2d rotate(const Eigen::Vector2d& v) const {
    return {c_ * v.x() - s_ * v.y(), s_ * v.x() + c_ * v.y()};
  }
  Eigen::Vector2d apply(const Eigen::Vector2d& p) const { return rotate(p) + t_; }
  Eigen::Vector2d operator()(const Eigen::Vector2d& p) const { return apply(p); }

  Rigid2 inverse() const {
    // R^T (p - t), written with the cached cosine and sine so a round trip stays exact to rounding.
    Rigid2 inv;
    inv.angle_ = -angle_;
    inv.c_ = c_;
    inv.s_ = -s_;
    inv.t_ = -Eigen::Vector2d(c_ * t_.x() + s_ * t_.y(), -s_ * t_.x() + c_ * t_.y());
    return inv;
  }

  /// (this * other)(p) = this(other(p)).
  Rigid2 operator*(const Rigid2& other) const {
    Rigid2 out;
    out.angle_ = angle_ + other.angle_;
    out.c_ = c_ * other.c_ - s_ * other.s_;
    out.s_ = s_ * other.c_ + c_ * other.s_;
    out.t_ = rotate(other.t_) + t_;
    return out;
  }

  /// Rotation block entries; orthonormal up to rounding.
  double cos_part() const noexcept { return c_; }
  double sin_part() const noexcept { return s_; }

 private:
  double angle_ = 0.0;
  double c_ = 1.0;
  double s_ = 0.0;
  Eigen::Vector2d t_ = Eigen::Vector2d::Zero();
};

/// Transforms between the world frame W and the constraint frame C.
struct FramePair {
  Rigid2 world_to_constraint;
  Rigid2 constraint_to_world;
};

/// Frame C has its origin at the contact pose and its x-axis along the contact heading.
inline FramePair make_frames(const Pose2& first_constraint) {
  const Rigid2 c_to_w(first_constraint.angle, first_constraint.position);
  return {c_to_w.inverse(), c_to_w};
}

}  // namespace needle::sim
