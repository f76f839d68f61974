#pragma once

// One-term incompressible Ogden layers loaded in unconfined compression by the
// needle shaft, and the planar layer map used to look them up.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace needle::tissue {

/// Floor of the stretch ratio; keeps lambda^(-alpha/2 - 1) finite.
inline constexpr double kMinStretch = 0.05;

struct Stretch {
  double value = 1.0;
  bool clamped = false;
};

/// lambda = (ti - |u_rel|) / ti, clamped to [kMinStretch, 1].
Stretch stretch(double u_rel, double thickness);

/// Tangent modulus 2 mu (lambda^(alpha-1) + 0.5 lambda^(-alpha/2-1)).
/// Throws DomainError for lambda outside [kMinStretch, 1] or mu <= 0.
double tangent_stiffness(double lambda, double mu, double alpha);

/// 1 - gamma sin^2(atan(slope)).
double friction_factor(double slope, double gamma);

enum class ForceMode {
  approximate,  // f = k u
  full,         // f = k u (1 - gamma sin^2(atan u_x))
};

/// A straight boundary through `from` and `to`; treated as the infinite line through both.
struct Boundary {
  Eigen::Vector2d from = Eigen::Vector2d::Zero();
  Eigen::Vector2d to = Eigen::Vector2d::Zero();

  /// Vertical line x = abscissa spanning +-half_span.
  static Boundary vertical(double abscissa, double half_span = 0.1);
};

struct OgdenLayer {
  std::string id;
  double mu = 0.0;            // Pa
  double alpha = 1.0;
  double gamma = 0.0;
  double thickness = 0.040;   // m, initial tissue thickness ti
  Boundary entry;             // leading boundary of the region
};

/// Lateral force density on the shaft (N/m) for a deflection u_rel from the assigned constraint.
double force_density(double u_rel, double slope, const OgdenLayer& layer,
                     ForceMode mode = ForceMode::approximate);

/// Ordered stack of layers. Layer i occupies the band between its entry boundary
/// (inclusive) and the next layer's entry boundary; the last layer is a half-plane.
class TissueDomain {
 public:
  /// Validates parameters and boundary ordering; throws InvalidProperty with the layer index.
  explicit TissueDomain(std::vector<OgdenLayer> layers,
                        Eigen::Vector2d insertion_direction = Eigen::Vector2d::UnitX());

  const std::vector<OgdenLayer>& layers() const noexcept { return layers_; }
  const OgdenLayer& layer(std::size_t index) const { return layers_.at(index); }
  std::size_t size() const noexcept { return layers_.size(); }
  const Eigen::Vector2d& insertion_direction() const noexcept { return direction_; }

  /// Index of the layer containing `point`; a point on a shared boundary belongs to the deeper layer.
  std::optional<std::size_t> layer_at(const Eigen::Vector2d& point) const;

  /// Signed distance from the entry boundary of layer `index`, positive on the deeper side.
  double signed_distance(std::size_t index, const Eigen::Vector2d& point) const;

  /// Distance along the ray origin + t dir to the first boundary, if the ray reaches it.
  std::optional<double> distance_to_entry(const Eigen::Vector2d& origin,
                                          const Eigen::Vector2d& dir) const;

 private:
  std::vector<OgdenLayer> layers_;
  Eigen::Vector2d direction_;
  std::vector<Eigen::Vector2d> normals_;
};

}  // namespace needle::tissue
