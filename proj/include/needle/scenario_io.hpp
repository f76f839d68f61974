#pragma once

// Scenario files (TOML with unit-annotated quantities), named parameter presets,
// ground-truth polylines (CSV) and step traces (newline-delimited JSON).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "needle/sim_core.hpp"

namespace needle::io {

enum class Dimension { length, pressure, angle };

/// Parses "150 mm", "80 GPa", "10 deg" into SI units (m, Pa, rad).
/// Throws LoadError(field, ...) on a missing or foreign unit.
double parse_quantity(std::string_view text, Dimension dim, const std::string& field);

/// Shortest text that parses back to exactly `value` in the SI unit of `dim`.
std::string format_quantity(double value, Dimension dim);

/// One simulation step: every input applied together.
using ScriptStep = std::vector<sim::ControlInput>;
using Script = std::vector<ScriptStep>;

struct Scenario {
  std::string name;
  sim::Model model;
  Script script;
};

// ---- presets ------------------------------------------------------------------

struct LayerParameters {
  double mu = 0.0;  // Pa
  double alpha = 1.0;
};

/// One row of the tuned parameter table shipped with the simulator.
struct ParameterRow {
  std::string key;    // e.g. "ph2_t4"
  std::string label;  // e.g. "Ph2 T4"
  std::vector<LayerParameters> layers;
  double bevel_mm = 0.0;
};

const std::vector<ParameterRow>& parameter_table();

/// The table as CSV: header `row,mu1,alpha1,...,mu4,alpha4,b_mm`, "n/a" for absent layers.
std::string parameter_table_csv();

/// Short names ("ph1", "ph2", "ph3", "chicken") followed by every table row key.
std::vector<std::string> preset_names();

/// Throws LoadError("preset", ...) for an unknown name.
Scenario preset(std::string_view name);

// ---- scenario files -------------------------------------------------------------

Scenario load_scenario(const std::filesystem::path& path);
Scenario parse_scenario(std::string_view toml_text, const std::string& source = "<inline>");

/// Script-only TOML file: the `[[script]]` array of a scenario.
Script load_script(const std::filesystem::path& path);

std::string dump_scenario(const Scenario& scenario);
void save_scenario(const Scenario& scenario, const std::filesystem::path& path);

// ---- ground truth ---------------------------------------------------------------

struct GroundTruth {
  std::vector<Eigen::Vector2d> points;  // W, metres, base first
  std::string source;

  double length() const;
};

/// CSV: first line `unit=mm` or `unit=m`, optional `x,y` header, then one point per line.
GroundTruth load_ground_truth(const std::filesystem::path& path);
GroundTruth parse_ground_truth(std::string_view csv, const std::string& source = "<inline>");

/// Checks K >= 2, finite coordinates and strictly increasing arc length. Throws IngestionError.
void validate_polyline(const std::vector<Eigen::Vector2d>& points, const std::string& source);

// ---- traces ----------------------------------------------------------------------

struct TraceStep {
  std::uint64_t step = 0;
  bool in_contact = false;
  double depth = 0.0;
  std::vector<Eigen::Vector2d> polyline;         // W
  std::vector<sim::ConstraintPoint> constraints;  // frame C
  std::vector<Eigen::Vector2d> constraints_world;
  sim::ConvergenceReport report;
  ScriptStep inputs;

  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

using SimTrace = std::vector<TraceStep>;

TraceStep record_step(const sim::SimState& state, const ScriptStep& inputs);

std::string trace_line(const TraceStep& step);
TraceStep parse_trace_line(std::string_view line);

void write_trace(const SimTrace& trace, std::ostream& out);
SimTrace read_trace(std::istream& in);
void save_trace(const SimTrace& trace, const std::filesystem::path& path);
SimTrace load_trace(const std::filesystem::path& path);

/// Runs a script from the model's initial state and records every step.
SimTrace run_script(const sim::Model& model, const Script& script);

}  // namespace needle::io
