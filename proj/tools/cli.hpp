#pragma once

#include <functional>
#include <iosfwd>
#include <string>

#include "needle/scenario_io.hpp"
#include "needle/server.hpp"

namespace needle::cli {

/// Process exit codes.
enum Exit : int { kOk = 0, kFailure = 1, kNotConverged = 2 };

struct Hooks {
  /// Called once the server is listening, just before it starts serving.
  std::function<void(service::Server&, service::SessionManager&)> on_serving;
};

/// A scenario file path, or a preset name when no such file exists.
io::Scenario open_scenario(const std::string& ref);

/// Entry point of the `needle_sim` command line; returns the exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const Hooks& hooks = {});

}  // namespace needle::cli
