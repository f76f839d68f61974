#include "needle/beam_fem.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "needle/error.hpp"

namespace needle::fem {

namespace {

// Two DOFs per node and two nodes per element couple DOFs at most 3 apart.
constexpr std::size_t kBeamHalfBandwidth = 3;

void require_positive_length(double h) {
  if (!(h > 0.0) || !std::isfinite(h)) {
    throw InvalidProperty("element length must be positive, got " + std::to_string(h));
  }
}

}  // namespace

BeamProperties BeamProperties::hollow_circular(double youngs_modulus, double outer_diameter,
                                               double inner_diameter) {
  if (!(youngs_modulus > 0.0)) throw InvalidProperty("Young's modulus must be positive");
  if (!(outer_diameter > inner_diameter) || !(inner_diameter >= 0.0)) {
    throw InvalidProperty("section requires outer diameter > inner diameter >= 0");
  }
  const double d4 = std::pow(outer_diameter, 4) - std::pow(inner_diameter, 4);
  return {youngs_modulus, std::numbers::pi * d4 / 64.0};
}

void BeamMesh::validate() const {
  require_positive_length(element_length);
  if (node_count < 2) throw InvalidProperty("beam mesh needs at least two nodes");
  if (!std::isfinite(first_station)) throw InvalidProperty("beam mesh origin is not finite");
}

Matrix4 element_stiffness(double flexural_rigidity, double h) {
  require_positive_length(h);
  if (!(flexural_rigidity >= 0.0) || !std::isfinite(flexural_rigidity)) {
    throw InvalidProperty("flexural rigidity must be non-negative, got " +
                          std::to_string(flexural_rigidity));
  }
  const double c = flexural_rigidity / (h * h * h);
  const double h2 = h * h;
  Matrix4 k;
  k << 12.0, 6.0 * h, -12.0, 6.0 * h,
       6.0 * h, 4.0 * h2, -6.0 * h, 2.0 * h2,
       -12.0, -6.0 * h, 12.0, -6.0 * h,
       6.0 * h, 2.0 * h2, -6.0 * h, 4.0 * h2;
  return c * k;
}

Matrix4 element_stiffness(const BeamProperties& props, double h) {
  if (!(props.youngs_modulus > 0.0) || !(props.area_moment > 0.0)) {
    throw InvalidProperty("beam properties require E > 0 and I > 0");
  }
  return element_stiffness(props.flexural_rigidity(), h);
}

FoundationMatrices foundation_element_matrices(double k, double y_ref, double h) {
  require_positive_length(h);
  if (!(k >= 0.0) || !std::isfinite(k)) {
    throw InvalidProperty("foundation stiffness must be non-negative, got " + std::to_string(k));
  }
  const double h2 = h * h;
  Matrix4 m;
  m << 156.0, 22.0 * h, 54.0, -13.0 * h,
       22.0 * h, 4.0 * h2, 13.0 * h, -3.0 * h2,
       54.0, 13.0 * h, 156.0, -22.0 * h,
       -13.0 * h, -3.0 * h2, -22.0 * h, 4.0 * h2;
  return {(k * h / 420.0) * m, uniform_load_vector(k * y_ref, h)};
}

Vector4 uniform_load_vector(double q, double h) {
  return q * Vector4(h / 2.0, h * h / 12.0, h / 2.0, -h * h / 12.0);
}

LinearSystem assemble(const BeamMesh& mesh, const BeamProperties& props,
                      std::span<const FoundationPatch> patches, std::span<const EssentialBC> bcs,
                      const Loads& extra_loads) {
  mesh.validate();
  const std::size_t ndof = mesh.dof_count();
  const std::size_t nel = mesh.element_count();
  const double h = mesh.element_length;

  Eigen::VectorXd prescribed = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ndof));
  std::vector<bool> is_prescribed(ndof, false);
  auto prescribe = [&](std::size_t dof, double value) {
    if (is_prescribed[dof]) {
      throw InvalidProperty("DOF " + std::to_string(dof) + " prescribed twice");
    }
    if (!std::isfinite(value)) throw InvalidProperty("prescribed value is not finite");
    is_prescribed[dof] = true;
    prescribed[static_cast<Eigen::Index>(dof)] = value;
  };
  for (const EssentialBC& bc : bcs) {
    if (bc.node >= mesh.node_count) {
      throw InvalidProperty("essential condition on node " + std::to_string(bc.node) +
                            " outside mesh of " + std::to_string(mesh.node_count) + " nodes");
    }
    if (bc.which != DofKind::slope) prescribe(deflection_dof(bc.node), bc.deflection);
    if (bc.which != DofKind::deflection) prescribe(slope_dof(bc.node), bc.slope);
  }

  bool any_foundation = false;
  for (const FoundationPatch& p : patches) {
    if (p.element >= nel) {
      throw InvalidProperty("foundation patch on element " + std::to_string(p.element) +
                            " outside mesh of " + std::to_string(nel) + " elements");
    }
    if (p.stiffness > 0.0) any_foundation = true;
  }
  const auto constrained = std::count(is_prescribed.begin(), is_prescribed.end(), true);
  if (constrained < 2 && !any_foundation) {
    throw SingularSystem("beam is insufficiently constrained: " + std::to_string(constrained) +
                         " prescribed DOF(s) and no foundation stiffness");
  }

  LinearSystem sys;
  sys.free_index.assign(ndof, -1);
  std::ptrdiff_t nfree = 0;
  for (std::size_t d = 0; d < ndof; ++d) {
    if (!is_prescribed[d]) sys.free_index[d] = nfree++;
  }
  sys.matrix = BandedSpdMatrix(static_cast<std::size_t>(nfree), kBeamHalfBandwidth);
  sys.rhs = Eigen::VectorXd::Zero(nfree);
  sys.prescribed = std::move(prescribed);

  // Per-element stiffness and load accumulators; bending is identical for every element.
  std::vector<Matrix4> ke(nel, element_stiffness(props, h));
  std::vector<Vector4> fe(nel, Vector4::Zero());
  for (const FoundationPatch& p : patches) {
    const FoundationMatrices fm = foundation_element_matrices(p.stiffness, p.reference, h);
    ke[p.element] += fm.stiffness;
    fe[p.element] += fm.load;
  }
  for (const ElementLoad& q : extra_loads.distributed) {
    if (q.element >= nel) throw InvalidProperty("element load outside mesh");
    fe[q.element] += uniform_load_vector(q.intensity, h);
  }

  for (std::size_t e = 0; e < nel; ++e) {
    const std::size_t base = 2 * e;
    for (int a = 0; a < 4; ++a) {
      const std::ptrdiff_t ra = sys.free_index[base + static_cast<std::size_t>(a)];
      if (ra < 0) continue;
      sys.rhs[ra] += fe[e][a];
      for (int b = 0; b < 4; ++b) {
        const std::size_t gb = base + static_cast<std::size_t>(b);
        const std::ptrdiff_t rb = sys.free_index[gb];
        if (rb < 0) {
          sys.rhs[ra] -= ke[e](a, b) * sys.prescribed[static_cast<Eigen::Index>(gb)];
        } else if (rb <= ra) {
          sys.matrix.add(static_cast<std::size_t>(ra), static_cast<std::size_t>(rb), ke[e](a, b));
        }
      }
    }
  }

  for (const NodalLoad& load : extra_loads.nodal) {
    if (load.node >= mesh.node_count) throw InvalidProperty("nodal load outside mesh");
    if (const auto r = sys.free_index[deflection_dof(load.node)]; r >= 0) sys.rhs[r] += load.force;
    if (const auto r = sys.free_index[slope_dof(load.node)]; r >= 0) sys.rhs[r] += load.moment;
  }
  return sys;
}

Eigen::VectorXd solve(const LinearSystem& system) {
  const Eigen::VectorXd reduced = solve_banded(system.matrix, system.rhs);
  Eigen::VectorXd full = system.prescribed;
  for (std::size_t d = 0; d < system.free_index.size(); ++d) {
    if (const auto r = system.free_index[d]; r >= 0) full[static_cast<Eigen::Index>(d)] = reduced[r];
  }
  return full;
}

namespace {

BeamPoint hermite(const BeamMesh& mesh, const Eigen::VectorXd& dofs, std::size_t e, double xi) {
  const double h = mesh.element_length;
  const auto i = static_cast<Eigen::Index>(2 * e);
  const double u1 = dofs[i], t1 = dofs[i + 1], u2 = dofs[i + 2], t2 = dofs[i + 3];
  const double xi2 = xi * xi;
  const double xi3 = xi2 * xi;
  const double n1 = 1.0 - 3.0 * xi2 + 2.0 * xi3;
  const double n2 = h * (xi - 2.0 * xi2 + xi3);
  const double n3 = 3.0 * xi2 - 2.0 * xi3;
  const double n4 = h * (xi3 - xi2);
  const double d1 = (-6.0 * xi + 6.0 * xi2) / h;
  const double d2 = 1.0 - 4.0 * xi + 3.0 * xi2;
  const double d3 = (6.0 * xi - 6.0 * xi2) / h;
  const double d4 = 3.0 * xi2 - 2.0 * xi;
  return {n1 * u1 + n2 * t1 + n3 * u2 + n4 * t2, d1 * u1 + d2 * t1 + d3 * u2 + d4 * t2};
}

}  // namespace

BeamPoint evaluate(const BeamMesh& mesh, const Eigen::VectorXd& dofs, double x) {
  mesh.validate();
  if (static_cast<std::size_t>(dofs.size()) != mesh.dof_count()) {
    throw InvalidProperty("DOF vector does not match mesh");
  }
  const double h = mesh.element_length;
  const double slack = 1e-12 * h;
  if (!(x >= mesh.first_station - slack) || !(x <= mesh.last_station() + slack)) {
    throw OutOfRange("station " + std::to_string(x) + " outside beam [" +
                     std::to_string(mesh.first_station) + ", " +
                     std::to_string(mesh.last_station()) + "]");
  }
  const double s = (x - mesh.first_station) / h;
  const auto e = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(s))),
                          mesh.element_count() - 1);
  const double xi = std::clamp(s - static_cast<double>(e), 0.0, 1.0);
  return hermite(mesh, dofs, e, xi);
}

BeamPoint element_midpoint(const BeamMesh& mesh, const Eigen::VectorXd& dofs, std::size_t element) {
  return hermite(mesh, dofs, element, 0.5);
}

}  // namespace needle::fem
