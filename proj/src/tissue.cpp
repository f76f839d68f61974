#include "needle/tissue.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "needle/error.hpp"

namespace needle::tissue {

Stretch stretch(double u_rel, double thickness) {
  if (!(thickness > 0.0)) {
    throw InvalidProperty("tissue thickness must be positive, got " + std::to_string(thickness));
  }
  const double lambda = (thickness - std::abs(u_rel)) / thickness;
  if (lambda < kMinStretch) return {kMinStretch, true};
  return {std::min(lambda, 1.0), false};
}

double tangent_stiffness(double lambda, double mu, double alpha) {
  if (!(lambda >= kMinStretch) || !(lambda <= 1.0)) {
    throw DomainError("stretch " + std::to_string(lambda) + " outside [" +
                      std::to_string(kMinStretch) + ", 1]");
  }
  if (!(mu > 0.0)) throw DomainError("shear modulus must be positive, got " + std::to_string(mu));
  return 2.0 * mu * (std::pow(lambda, alpha - 1.0) + 0.5 * std::pow(lambda, -alpha / 2.0 - 1.0));
}

double friction_factor(double slope, double gamma) {
  const double s = std::sin(std::atan(slope));
  return 1.0 - gamma * s * s;
}

double force_density(double u_rel, double slope, const OgdenLayer& layer, ForceMode mode) {
  const double k = tangent_stiffness(stretch(u_rel, layer.thickness).value, layer.mu, layer.alpha);
  const double f = k * u_rel;
  return mode == ForceMode::full ? f * friction_factor(slope, layer.gamma) : f;
}

Boundary Boundary::vertical(double abscissa, double half_span) {
  return {Eigen::Vector2d(abscissa, -half_span), Eigen::Vector2d(abscissa, half_span)};
}

TissueDomain::TissueDomain(std::vector<OgdenLayer> layers, Eigen::Vector2d insertion_direction)
    : layers_(std::move(layers)), direction_(insertion_direction) {
  if (layers_.empty()) throw InvalidProperty("tissue domain needs at least one layer");
  if (!(direction_.norm() > 0.0)) throw InvalidProperty("insertion direction is zero");
  direction_.normalize();

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const OgdenLayer& l = layers_[i];
    const std::string where = "layer " + std::to_string(i);
    if (!(l.mu > 0.0)) throw InvalidProperty(where + ": mu must be positive");
    if (!std::isfinite(l.alpha)) throw InvalidProperty(where + ": alpha is not finite");
    if (!(l.gamma >= 0.0 && l.gamma < 1.0)) throw InvalidProperty(where + ": gamma outside [0, 1)");
    if (!(l.thickness > 0.0)) throw InvalidProperty(where + ": thickness must be positive");

    const Eigen::Vector2d t = l.entry.to - l.entry.from;
    if (!(t.norm() > 0.0)) throw InvalidProperty(where + ": boundary has zero length");
    Eigen::Vector2d n(-t.y(), t.x());
    n.normalize();
    const double facing = n.dot(direction_);
    if (std::abs(facing) < 1e-12) {
      throw InvalidProperty(where + ": boundary is parallel to the insertion direction");
    }
    normals_.push_back(facing > 0.0 ? n : Eigen::Vector2d(-n));
  }

  // Consecutive boundaries must not cross within their extents.
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    const Boundary& next = layers_[i + 1].entry;
    const Boundary& here = layers_[i].entry;
    const bool ordered = signed_distance(i, next.from) > 0.0 && signed_distance(i, next.to) > 0.0 &&
                         signed_distance(i + 1, here.from) < 0.0 &&
                         signed_distance(i + 1, here.to) < 0.0;
    if (!ordered) {
      throw InvalidProperty("layer " + std::to_string(i + 1) +
                            ": boundary overlaps or precedes the boundary of layer " +
                            std::to_string(i));
    }
  }
}

double TissueDomain::signed_distance(std::size_t index, const Eigen::Vector2d& point) const {
  return normals_.at(index).dot(point - layers_.at(index).entry.from);
}

std::optional<std::size_t> TissueDomain::layer_at(const Eigen::Vector2d& point) const {
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (signed_distance(i, point) >= 0.0) return i;
  }
  return std::nullopt;
}

std::optional<double> TissueDomain::distance_to_entry(const Eigen::Vector2d& origin,
                                                      const Eigen::Vector2d& dir) const {
  const double rate = normals_.front().dot(dir);
  const double s = signed_distance(0, origin);
  if (s >= 0.0) return 0.0;
  if (!(rate > 0.0)) return std::nullopt;
  return -s / rate;
}

}  // namespace needle::tissue
