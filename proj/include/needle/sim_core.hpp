#pragma once

// Interactive bevel-tip needle stepping loop.
//
// Before tissue contact the needle is a rigid straight line described by its
// base pose in the world frame W. Contact anchors the constraint frame C at
// the tip pose; from then on the needle is an Euler-Bernoulli beam in C whose
// node stations slide along the C x-axis on insertion and retraction, and
// tissue constraint points are laid down behind the advancing tip. Each cycle
// solves the nonlinear foundation problem by under-relaxed fixed-point
// iteration before applying the horizontal motion.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "needle/beam_fem.hpp"
#include "needle/se2.hpp"
#include "needle/tissue.hpp"

namespace needle::sim {

struct NeedleSpec {
  double youngs_modulus = 80e9;     // Pa
  double outer_diameter = 1.27e-3;  // m
  double inner_diameter = 1.0e-3;   // m
  double length = 0.150;            // m
  double element_length = 1e-3;     // m

  fem::BeamProperties properties() const;
  std::size_t element_count() const;
  /// Throws InvalidProperty unless the element length divides the needle length.
  void validate() const;
};

struct BevelSpec {
  double offset = 0.0;  // m, b >= 0
  int direction = 1;    // +1 or -1
};

struct SolverSettings {
  double relaxation = 0.5;
  double tolerance = 1e-7;  // m, on the largest deflection update
  int max_iterations = 50;
  tissue::ForceMode force_mode = tissue::ForceMode::approximate;
  double constraint_spacing = 0.0;  // m; 0 means one element length
};

struct Model {
  NeedleSpec needle;
  tissue::TissueDomain domain;
  BevelSpec bevel;
  SolverSettings solver;
  Pose2 initial_pose;  // base pose in W; also the reference frame of base V-inputs

  double constraint_spacing() const noexcept {
    return solver.constraint_spacing > 0.0 ? solver.constraint_spacing : needle.element_length;
  }
};

/// Throws InvalidProperty on an inconsistent model.
void validate(const Model& model);

struct ConstraintPoint {
  double station = 0.0;         // m, frame C
  double ordinate = 0.0;        // m, frame C, bevel offset included
  std::size_t layer = 0;
  double creation_depth = 0.0;  // m

  friend bool operator==(const ConstraintPoint&, const ConstraintPoint&) = default;
};

// ---- control inputs -------------------------------------------------------

/// Needle base. Values are the lateral offset (m) and heading change (rad)
/// relative to the model's initial pose axis.
struct BaseTarget {
  friend bool operator==(const BaseTarget&, const BaseTarget&) = default;
};

/// Template fixed at a W abscissa; `deflection` is its W ordinate and the slope is held at zero.
struct TemplateTarget {
  double abscissa = 0.0;
  friend bool operator==(const TemplateTarget&, const TemplateTarget&) = default;
};

/// Mesh node; values in frame C.
struct NodeTarget {
  std::size_t index = 0;
  friend bool operator==(const NodeTarget&, const NodeTarget&) = default;
};

using VTarget = std::variant<BaseTarget, TemplateTarget, NodeTarget>;

/// Vertical input. For template and node targets, an input with neither value releases the target.
struct VInput {
  VTarget target = BaseTarget{};
  std::optional<double> deflection;
  std::optional<double> slope;

  friend bool operator==(const VInput&, const VInput&) = default;
};

/// Horizontal input: signed axial advance (m); negative retracts.
struct HInput {
  double advance = 0.0;
  friend bool operator==(const HInput&, const HInput&) = default;
};

using ControlInput = std::variant<VInput, HInput>;

// ---- state ----------------------------------------------------------------

struct NodeCommand {
  std::optional<double> deflection;
  std::optional<double> slope;
  friend bool operator==(const NodeCommand&, const NodeCommand&) = default;
};

/// V-inputs currently held by the solver.
struct HeldCommands {
  double base_deflection = 0.0;  // frame C once in contact
  double base_slope = 0.0;       // frame C once in contact
  std::optional<Eigen::Vector2d> template_point;  // W
  std::map<std::size_t, NodeCommand> nodes;

  friend bool operator==(const HeldCommands&, const HeldCommands&) = default;
};

struct ConvergenceReport {
  int iterations = 0;
  double residual = 0.0;  // largest deflection update of the final iteration, m
  int clamp_count = 0;    // stretch clamp events in the final iteration
  bool converged = true;

  friend bool operator==(const ConvergenceReport&, const ConvergenceReport&) = default;
};

struct SimState {
  fem::BeamMesh mesh;              // frame C stations; meaningful when in contact
  Eigen::VectorXd dofs;            // (u, theta) per node, frame C
  std::vector<Eigen::Vector2d> polyline;  // node positions in W, base first
  std::vector<ConstraintPoint> constraints;
  std::optional<FramePair> frames;
  Pose2 rigid_pose;                // base pose in W while out of contact
  HeldCommands commands;
  double depth = 0.0;              // tip station minus first constraint station
  std::uint64_t step = 0;
  ConvergenceReport report;

  bool in_contact() const noexcept { return frames.has_value(); }
  Pose2 tip_pose() const;
  Eigen::Vector2d tip() const { return polyline.back(); }
};

/// Straight needle at the model's initial pose.
SimState initial_state(const Model& model);

/// First constraint pose when the tip is inside the tissue (on-boundary counts as inside).
std::optional<Pose2> detect_contact(const SimState& state, const Model& model);

struct EquilibriumResult {
  ConvergenceReport report;
  std::vector<double> update_history;  // largest deflection update per iteration
};

/// Fixed-point equilibrium of the beam on the Ogden foundation under the held V-inputs.
/// Updates state.dofs and state.report. Throws StepError when not in contact.
EquilibriumResult equilibrium_solve(SimState& state, const Model& model);

/// Essential conditions implied by the held V-inputs for the current mesh.
std::vector<fem::EssentialBC> essential_conditions(const SimState& state, const Model& model);

/// Element -> assigned constraint index, or nullopt for elements outside the tissue.
std::vector<std::optional<std::size_t>> assign_constraints(const SimState& state,
                                                           const Model& model);

/// One geometric insertion (dh > 0) or retraction (dh < 0) sub-step with |dh| <= h.
/// Out of contact this is a rigid translation along the needle axis.
void advance(SimState& state, const Model& model, double dh);

/// Applies one V-input to the held commands (frame conversion included).
void apply_v_input(SimState& state, const Model& model, const VInput& input);

/// One cycle: inputs, contact check, equilibrium, insertion/retraction, W refresh.
/// Strong exception guarantee: on error the state is unchanged.
void step(SimState& state, std::span<const ControlInput> inputs, const Model& model);

/// Recomputes the W polyline from the current representation.
void refresh_polyline(SimState& state, const Model& model);

/// Constraint point position in W.
Eigen::Vector2d constraint_world(const SimState& state, const ConstraintPoint& c);

}  // namespace needle::sim
