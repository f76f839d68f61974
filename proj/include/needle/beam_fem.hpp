#pragma once

// Euler-Bernoulli beam kernel: two-node cubic Hermite elements, each node
// carrying a transverse deflection and a slope. Foundation springs pull the
// beam toward per-element reference ordinates; essential conditions are
// eliminated from the system before the banded Cholesky solve.

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "needle/banded.hpp"

namespace needle::fem {

using Matrix4 = Eigen::Matrix4d;
using Vector4 = Eigen::Vector4d;

/// Flexural properties of the needle shaft.
struct BeamProperties {
  double youngs_modulus = 0.0;  // Pa
  double area_moment = 0.0;     // m^4

  double flexural_rigidity() const noexcept { return youngs_modulus * area_moment; }

  /// Hollow circular section, I = pi (Do^4 - Di^4) / 64. Throws InvalidProperty.
  static BeamProperties hollow_circular(double youngs_modulus, double outer_diameter,
                                        double inner_diameter);
};

/// Uniform mesh along the beam axis. Stations are x_i = first_station + i h.
struct BeamMesh {
  double first_station = 0.0;
  double element_length = 1e-3;
  std::size_t node_count = 2;

  std::size_t element_count() const noexcept { return node_count - 1; }
  std::size_t dof_count() const noexcept { return 2 * node_count; }
  double station(std::size_t node) const noexcept {
    return first_station + static_cast<double>(node) * element_length;
  }
  double last_station() const noexcept { return station(node_count - 1); }
  double midpoint(std::size_t element) const noexcept {
    return first_station + (static_cast<double>(element) + 0.5) * element_length;
  }

  /// Throws InvalidProperty unless h > 0 and there are at least two nodes.
  void validate() const;
};

inline constexpr std::size_t deflection_dof(std::size_t node) { return 2 * node; }
inline constexpr std::size_t slope_dof(std::size_t node) { return 2 * node + 1; }

enum class DofKind { deflection, slope, both };

/// Prescribed nodal value(s). `deflection` is used for deflection|both, `slope` for slope|both.
struct EssentialBC {
  std::size_t node = 0;
  DofKind which = DofKind::both;
  double deflection = 0.0;
  double slope = 0.0;
};

/// Winkler springs of stiffness k over one element, pulling toward `reference`.
struct FoundationPatch {
  std::size_t element = 0;
  double stiffness = 0.0;  // N/m per m of beam
  double reference = 0.0;  // m
};

struct NodalLoad {
  std::size_t node = 0;
  double force = 0.0;   // N
  double moment = 0.0;  // N m
};

/// Uniform transverse load density over one element.
struct ElementLoad {
  std::size_t element = 0;
  double intensity = 0.0;  // N/m
};

struct Loads {
  std::vector<NodalLoad> nodal;
  std::vector<ElementLoad> distributed;
};

/// (EI / h^3) times the classical Hermite bending matrix. EI = 0 yields a zero matrix.
Matrix4 element_stiffness(double flexural_rigidity, double h);
Matrix4 element_stiffness(const BeamProperties& props, double h);

struct FoundationMatrices {
  Matrix4 stiffness;
  Vector4 load;
};

/// Consistent mass-like matrix k h/420 [...] and nodal forces of the uniform pull k y_ref.
FoundationMatrices foundation_element_matrices(double k, double y_ref, double h);

/// Consistent nodal forces of a uniform load q over an element of length h.
Vector4 uniform_load_vector(double q, double h);

/// Reduced system over the free DOFs. Prescribed values are kept for expansion.
struct LinearSystem {
  BandedSpdMatrix matrix;
  Eigen::VectorXd rhs;
  std::vector<std::ptrdiff_t> free_index;  // global DOF -> reduced index, -1 when prescribed
  Eigen::VectorXd prescribed;              // global vector; meaningful at prescribed DOFs

  std::size_t free_dof_count() const noexcept { return matrix.size(); }
};

LinearSystem assemble(const BeamMesh& mesh, const BeamProperties& props,
                      std::span<const FoundationPatch> patches, std::span<const EssentialBC> bcs,
                      const Loads& extra_loads = {});

/// Solves the reduced system and expands it to the full nodal DOF vector.
Eigen::VectorXd solve(const LinearSystem& system);

struct BeamPoint {
  double deflection = 0.0;
  double slope = 0.0;
};

/// Hermite interpolation of (u, u_x) at station x. Throws OutOfRange outside the mesh.
BeamPoint evaluate(const BeamMesh& mesh, const Eigen::VectorXd& dofs, double x);

/// Midpoint value of one element; cheaper than evaluate().
BeamPoint element_midpoint(const BeamMesh& mesh, const Eigen::VectorXd& dofs, std::size_t element);

}  // namespace needle::fem
