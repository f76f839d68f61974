#pragma once

#include <string>

#include "needle/sim_core.hpp"

namespace needle::cli {

/// Static SVG of the scene in millimetres: tissue bands, needle path,
/// constraint points as blue crosses and the tip as a red dot.
std::string render_svg(const sim::SimState& state, const sim::Model& model);

}  // namespace needle::cli
