#include "needle/sim_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <utility>

#include "needle/error.hpp"

namespace needle::sim {

namespace {

// Relative slack (in units of h) for station comparisons that should be exact
// up to accumulated rounding.
constexpr double kStationSlack = 1e-9;

std::size_t node_count(const Model& model) { return model.needle.element_count() + 1; }

Eigen::Vector2d to_world(const SimState& state, double station, double ordinate) {
  return state.frames->constraint_to_world.apply(Eigen::Vector2d(station, ordinate));
}

double deflection(const SimState& state, std::size_t node) {
  return state.dofs[static_cast<Eigen::Index>(fem::deflection_dof(node))];
}

double slope(const SimState& state, std::size_t node) {
  return state.dofs[static_cast<Eigen::Index>(fem::slope_dof(node))];
}

double tip_station(const SimState& state) { return state.mesh.last_station(); }

void update_depth(SimState& state) {
  state.depth = tip_station(state) - state.constraints.front().station;
}

void enter_contact(SimState& state, const Model& model, const Pose2& first) {
  const std::size_t n = node_count(model);
  const double h = model.needle.element_length;
  state.frames = make_frames(first);
  state.mesh.element_length = h;
  state.mesh.node_count = n;
  // Tip node exactly at the frame origin.
  state.mesh.first_station = -(static_cast<double>(n - 1) * h);
  state.dofs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * n));
  const std::size_t layer = model.domain.layer_at(first.position).value_or(0);
  state.constraints = {ConstraintPoint{0.0, 0.0, layer, 0.0}};
  state.commands.base_deflection = 0.0;
  state.commands.base_slope = 0.0;
  state.commands.nodes.clear();
  update_depth(state);
}

void exit_contact(SimState& state, const Model& model) {
  const Eigen::Vector2d base = to_world(state, state.mesh.first_station, deflection(state, 0));
  const double heading = state.frames->constraint_to_world.angle() + std::atan(slope(state, 0));
  state.rigid_pose = Pose2{base, heading};
  state.frames.reset();
  state.constraints.clear();
  state.depth = 0.0;
  state.dofs.setZero();
  state.commands.nodes.clear();
  const Pose2& ref = model.initial_pose;
  state.commands.base_deflection = ref.normal().dot(base - ref.position);
  state.commands.base_slope = heading - ref.angle;
}

void rigid_translate(SimState& state, const Model& model, double dh) {
  state.rigid_pose.position += dh * state.rigid_pose.axis();
  const Pose2& ref = model.initial_pose;
  state.commands.base_deflection = ref.normal().dot(state.rigid_pose.position - ref.position);
}

Eigen::Vector2d rigid_tip(const SimState& state, const Model& model) {
  return state.rigid_pose.position + model.needle.length * state.rigid_pose.axis();
}

}  // namespace

// ---- model ------------------------------------------------------------------

fem::BeamProperties NeedleSpec::properties() const {
  return fem::BeamProperties::hollow_circular(youngs_modulus, outer_diameter, inner_diameter);
}

std::size_t NeedleSpec::element_count() const {
  return static_cast<std::size_t>(std::llround(length / element_length));
}

void NeedleSpec::validate() const {
  if (!(element_length > 0.0)) throw InvalidProperty("needle element size must be positive");
  if (!(length > 0.0)) throw InvalidProperty("needle length must be positive");
  const double n = std::round(length / element_length);
  if (n < 1.0 || std::abs(n * element_length - length) > 1e-9 * length) {
    throw InvalidProperty("needle element size must divide the needle length");
  }
  (void)properties();
}

void validate(const Model& model) {
  model.needle.validate();
  if (!(model.bevel.offset >= 0.0)) throw InvalidProperty("bevel offset must be non-negative");
  if (model.bevel.direction != 1 && model.bevel.direction != -1) {
    throw InvalidProperty("bevel direction must be +1 or -1");
  }
  const SolverSettings& s = model.solver;
  if (!(s.relaxation > 0.0 && s.relaxation <= 1.0)) {
    throw InvalidProperty("relaxation factor must lie in (0, 1]");
  }
  if (!(s.tolerance > 0.0)) throw InvalidProperty("solver tolerance must be positive");
  if (s.max_iterations < 1) throw InvalidProperty("max_iterations must be at least 1");
  if (!(s.constraint_spacing >= 0.0)) throw InvalidProperty("constraint spacing must be >= 0");
}

// ---- state ------------------------------------------------------------------

Pose2 SimState::tip_pose() const {
  if (!frames) return Pose2{polyline.back(), rigid_pose.angle};
  const std::size_t tip = mesh.node_count - 1;
  const double theta = dofs[static_cast<Eigen::Index>(fem::slope_dof(tip))];
  return Pose2{polyline.back(), frames->constraint_to_world.angle() + std::atan(theta)};
}

SimState initial_state(const Model& model) {
  validate(model);
  SimState state;
  const std::size_t n = node_count(model);
  state.mesh = fem::BeamMesh{0.0, model.needle.element_length, n};
  state.dofs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * n));
  state.rigid_pose = model.initial_pose;
  refresh_polyline(state, model);
  return state;
}

void refresh_polyline(SimState& state, const Model& model) {
  const std::size_t n = node_count(model);
  state.polyline.resize(n);
  if (state.frames) {
    for (std::size_t i = 0; i < n; ++i) {
      state.polyline[i] = to_world(state, state.mesh.station(i), deflection(state, i));
    }
  } else {
    const Eigen::Vector2d axis = state.rigid_pose.axis();
    const double h = model.needle.element_length;
    for (std::size_t i = 0; i < n; ++i) {
      state.polyline[i] = state.rigid_pose.position + (static_cast<double>(i) * h) * axis;
    }
  }
}

Eigen::Vector2d constraint_world(const SimState& state, const ConstraintPoint& c) {
  if (!state.frames) throw StepError("constraint points exist only in contact");
  return to_world(state, c.station, c.ordinate);
}

std::optional<Pose2> detect_contact(const SimState& state, const Model& model) {
  if (state.frames) return std::nullopt;
  const Eigen::Vector2d tip = rigid_tip(state, model);
  if (!model.domain.layer_at(tip)) return std::nullopt;
  return Pose2{tip, state.rigid_pose.angle};
}

// ---- V-inputs -----------------------------------------------------------------

void apply_v_input(SimState& state, const Model& model, const VInput& input) {
  const Pose2& ref = model.initial_pose;
  const auto finite = [](const std::optional<double>& v) { return !v || std::isfinite(*v); };
  if (!finite(input.deflection) || !finite(input.slope)) throw StepError("V-input value is not finite");

  if (std::holds_alternative<BaseTarget>(input.target)) {
    if (!state.frames) {
      // Rigid motion: keep the axial coordinate along the reference axis.
      const Eigen::Vector2d rel = state.rigid_pose.position - ref.position;
      const double axial = ref.axis().dot(rel);
      const double lateral = input.deflection.value_or(ref.normal().dot(rel));
      state.rigid_pose.position = ref.position + axial * ref.axis() + lateral * ref.normal();
      if (input.slope) state.rigid_pose.angle = ref.angle + *input.slope;
      state.commands.base_deflection = lateral;
      state.commands.base_slope = state.rigid_pose.angle - ref.angle;
      return;
    }
    const Rigid2& c2w = state.frames->constraint_to_world;
    if (input.deflection) {
      const Eigen::Vector2d axis_c(c2w.cos_part(), c2w.sin_part());
      const Eigen::Vector2d normal_c(-c2w.sin_part(), c2w.cos_part());
      const double facing = ref.normal().dot(normal_c);
      if (std::abs(facing) < 1e-6) {
        throw StepError("base V-input: constraint frame is perpendicular to the reference axis");
      }
      const Eigen::Vector2d on_axis = c2w.translation() + state.mesh.first_station * axis_c;
      state.commands.base_deflection =
          (*input.deflection - ref.normal().dot(on_axis - ref.position)) / facing;
    }
    if (input.slope) state.commands.base_slope = std::tan(ref.angle + *input.slope - c2w.angle());
    return;
  }

  if (!state.frames) {
    throw StepError("only base V-inputs are accepted before tissue contact");
  }

  if (const auto* t = std::get_if<TemplateTarget>(&input.target)) {
    if (!input.deflection && !input.slope) {
      state.commands.template_point.reset();
      return;
    }
    if (!input.deflection) throw StepError("template V-input needs an ordinate");
    if (input.slope && *input.slope != 0.0) throw StepError("template V-input prescribes zero slope");
    if (!std::isfinite(t->abscissa)) throw StepError("template abscissa is not finite");
    state.commands.template_point = Eigen::Vector2d(t->abscissa, *input.deflection);
    return;
  }

  const auto& node = std::get<NodeTarget>(input.target);
  if (node.index >= state.mesh.node_count) {
    throw StepError("V-input on node " + std::to_string(node.index) + " outside the needle");
  }
  if (!input.deflection && !input.slope) {
    state.commands.nodes.erase(node.index);
    return;
  }
  NodeCommand& cmd = state.commands.nodes[node.index];
  if (input.deflection) cmd.deflection = input.deflection;
  if (input.slope) cmd.slope = input.slope;
}

std::vector<fem::EssentialBC> essential_conditions(const SimState& state, const Model& model) {
  (void)model;
  std::vector<fem::EssentialBC> bcs;
  std::set<std::size_t> taken;  // global DOF indices
  const auto claim = [&](std::size_t dof, const char* what) {
    if (!taken.insert(dof).second) {
      throw StepError(std::string("V-inputs over-constrain DOF ") + std::to_string(dof) + " (" +
                      what + ")");
    }
  };

  bcs.push_back({0, fem::DofKind::both, state.commands.base_deflection, state.commands.base_slope});
  claim(fem::deflection_dof(0), "base");
  claim(fem::slope_dof(0), "base");

  const fem::BeamMesh& mesh = state.mesh;
  if (state.commands.template_point && state.frames) {
    const Eigen::Vector2d q = state.frames->world_to_constraint.apply(*state.commands.template_point);
    const double h = mesh.element_length;
    if (q.x() >= mesh.first_station - h / 2 && q.x() <= mesh.last_station() + h / 2) {
      const double s = std::round((q.x() - mesh.first_station) / h);
      const auto j = std::min(static_cast<std::size_t>(std::max(0.0, s)), mesh.node_count - 1);
      claim(fem::deflection_dof(j), "template");
      claim(fem::slope_dof(j), "template");
      bcs.push_back({j, fem::DofKind::both, q.y(), 0.0});
    }
  }

  for (const auto& [index, cmd] : state.commands.nodes) {
    if (index >= mesh.node_count) throw StepError("node V-input outside the needle");
    if (cmd.deflection) {
      claim(fem::deflection_dof(index), "node");
      bcs.push_back({index, fem::DofKind::deflection, *cmd.deflection, 0.0});
    }
    if (cmd.slope) {
      claim(fem::slope_dof(index), "node");
      bcs.push_back({index, fem::DofKind::slope, 0.0, *cmd.slope});
    }
  }
  return bcs;
}

std::vector<std::optional<std::size_t>> assign_constraints(const SimState& state,
                                                           const Model& model) {
  (void)model;
  const fem::BeamMesh& mesh = state.mesh;
  std::vector<std::optional<std::size_t>> out(mesh.element_count());
  if (state.constraints.empty()) return out;
  const double entry = state.constraints.front().station;
  const double tie = kStationSlack * mesh.element_length;

  for (std::size_t e = 0; e < out.size(); ++e) {
    const double mid = mesh.midpoint(e);
    if (mid < entry) continue;
    // First constraint at or beyond the midpoint.
    const auto it = std::lower_bound(
        state.constraints.begin(), state.constraints.end(), mid,
        [](const ConstraintPoint& c, double x) { return c.station < x; });
    std::size_t best;
    if (it == state.constraints.end()) {
      best = state.constraints.size() - 1;
    } else if (it == state.constraints.begin()) {
      best = 0;
    } else {
      const auto hi = static_cast<std::size_t>(it - state.constraints.begin());
      const double d_hi = it->station - mid;
      const double d_lo = mid - std::prev(it)->station;
      // Equidistant: the deeper constraint wins.
      best = d_hi <= d_lo + tie ? hi : hi - 1;
    }
    out[e] = best;
  }
  return out;
}

// ---- equilibrium ----------------------------------------------------------------

EquilibriumResult equilibrium_solve(SimState& state, const Model& model) {
  if (!state.frames) throw StepError("equilibrium solve requires tissue contact");
  const SolverSettings& cfg = model.solver;
  const std::vector<fem::EssentialBC> bcs = essential_conditions(state, model);
  const auto assignment = assign_constraints(state, model);
  const fem::BeamProperties props = model.needle.properties();
  const auto ndof = static_cast<Eigen::Index>(state.mesh.dof_count());

  // Prescribed values go in before relaxing so that they hold exactly at every iterate.
  Eigen::VectorXd d = state.dofs;
  for (const fem::EssentialBC& bc : bcs) {
    if (bc.which != fem::DofKind::slope) d[static_cast<Eigen::Index>(fem::deflection_dof(bc.node))] = bc.deflection;
    if (bc.which != fem::DofKind::deflection) d[static_cast<Eigen::Index>(fem::slope_dof(bc.node))] = bc.slope;
  }
  Eigen::VectorXd best = d;
  double best_update = std::numeric_limits<double>::infinity();
  EquilibriumResult result;
  ConvergenceReport& report = result.report;
  report.converged = false;

  std::vector<fem::FoundationPatch> patches;
  patches.reserve(assignment.size());
  for (int itr = 1; itr <= cfg.max_iterations; ++itr) {
    patches.clear();
    int clamps = 0;
    for (std::size_t e = 0; e < assignment.size(); ++e) {
      if (!assignment[e]) continue;
      const ConstraintPoint& c = state.constraints[*assignment[e]];
      const tissue::OgdenLayer& layer = model.domain.layer(c.layer);
      const fem::BeamPoint mid = fem::element_midpoint(state.mesh, d, e);
      const tissue::Stretch st = tissue::stretch(mid.deflection - c.ordinate, layer.thickness);
      clamps += st.clamped ? 1 : 0;
      double k = tissue::tangent_stiffness(st.value, layer.mu, layer.alpha);
      if (cfg.force_mode == tissue::ForceMode::full) k *= tissue::friction_factor(mid.slope, layer.gamma);
      patches.push_back({e, k, c.ordinate});
    }

    const Eigen::VectorXd solved = fem::solve(fem::assemble(state.mesh, props, patches, bcs));
    const Eigen::VectorXd next = (1.0 - cfg.relaxation) * d + cfg.relaxation * solved;
    double update = 0.0;
    for (Eigen::Index i = 0; i < ndof; i += 2) update = std::max(update, std::abs(next[i] - d[i]));
    d = next;
    result.update_history.push_back(update);
    report.iterations = itr;
    report.residual = update;
    report.clamp_count = clamps;
    if (update < best_update) {
      best_update = update;
      best = d;
    }
    if (update <= cfg.tolerance) {
      report.converged = true;
      break;
    }
  }
  if (!report.converged) {
    d = best;
    report.residual = best_update;
  }
  state.dofs = std::move(d);
  state.report = report;
  return result;
}

// ---- insertion / retraction ------------------------------------------------------

void advance(SimState& state, const Model& model, double dh) {
  const double h = model.needle.element_length;
  if (!std::isfinite(dh) || std::abs(dh) > h * (1.0 + kStationSlack)) {
    throw StepError("advance sub-step exceeds one element length");
  }
  if (!state.frames) {
    rigid_translate(state, model, dh);
    return;
  }
  const double first = state.mesh.first_station + dh;
  if (dh > 0.0 && first >= state.constraints.front().station) {
    throw StepError("needle fully inserted: the base cannot enter the tissue");
  }
  state.mesh.first_station = first;
  update_depth(state);
  const double slack = kStationSlack * h;

  if (state.depth < -slack) {
    exit_contact(state, model);
    return;
  }
  if (dh < 0.0) {
    std::erase_if(state.constraints, [&](const ConstraintPoint& c) {
      return c.creation_depth > state.depth + slack;
    });
    return;
  }
  const double spacing = model.constraint_spacing();
  if (state.depth - state.constraints.back().creation_depth >= spacing * (1.0 - kStationSlack)) {
    const std::size_t tip = state.mesh.node_count - 1;
    const double u_tip = deflection(state, tip);
    const double station = tip_station(state);
    const Eigen::Vector2d tip_w = to_world(state, station, u_tip);
    const std::size_t layer =
        model.domain.layer_at(tip_w).value_or(state.constraints.back().layer);
    state.constraints.push_back(ConstraintPoint{
        station, u_tip + model.bevel.direction * model.bevel.offset, layer, state.depth});
  }
}

namespace {

struct Chunk {
  double length = 0.0;
  bool reaches_entry = false;
};

Chunk next_chunk(const SimState& state, const Model& model, double remaining) {
  const double h = model.needle.element_length;
  if (remaining < 0.0) return {std::max(remaining, -h), false};
  double chunk = std::min(remaining, h);
  if (state.frames) {
    const double next_creation = state.constraints.back().creation_depth + model.constraint_spacing();
    const double gap = next_creation - state.depth;
    if (gap > kStationSlack * h) chunk = std::min(chunk, gap);
    return {chunk, false};
  }
  const auto dist = model.domain.distance_to_entry(rigid_tip(state, model), state.rigid_pose.axis());
  if (dist && *dist > 0.0 && *dist <= chunk) return {*dist, true};
  return {chunk, false};
}

void aggregate(ConvergenceReport& total, const ConvergenceReport& r, bool first) {
  if (first) {
    total = r;
    return;
  }
  total.iterations = std::max(total.iterations, r.iterations);
  total.residual = std::max(total.residual, r.residual);
  total.clamp_count = std::max(total.clamp_count, r.clamp_count);
  total.converged = total.converged && r.converged;
}

}  // namespace

void step(SimState& state, std::span<const ControlInput> inputs, const Model& model) {
  if (inputs.empty()) {
    ++state.step;
    return;
  }
  SimState next = state;
  double remaining = 0.0;
  for (const ControlInput& input : inputs) {
    if (const auto* v = std::get_if<VInput>(&input)) {
      apply_v_input(next, model, *v);
    } else {
      const double a = std::get<HInput>(input).advance;
      if (!std::isfinite(a)) throw StepError("H-input is not finite");
      remaining += a;
    }
  }
  if (auto contact = detect_contact(next, model)) enter_contact(next, model, *contact);

  ConvergenceReport total;
  bool solved = false;
  const double done = kStationSlack * model.needle.element_length;
  while (true) {
    if (next.frames) {
      aggregate(total, equilibrium_solve(next, model).report, !solved);
      solved = true;
    }
    if (std::abs(remaining) <= done) break;
    const Chunk chunk = next_chunk(next, model, remaining);
    advance(next, model, chunk.length);
    remaining -= chunk.length;
    if (!next.frames) {
      if (chunk.reaches_entry) {
        enter_contact(next, model, Pose2{rigid_tip(next, model), next.rigid_pose.angle});
      } else if (auto contact = detect_contact(next, model)) {
        enter_contact(next, model, *contact);
      }
    }
  }
  next.report = solved ? total : ConvergenceReport{};
  refresh_polyline(next, model);
  ++next.step;
  state = std::move(next);
}

}  // namespace needle::sim
