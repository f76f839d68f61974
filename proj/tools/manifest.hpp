#pragma once

// Dataset manifest for batch evaluation and fitting: a list of
// (scenario, script, ground truth) cases plus optional seed, bounds and options.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "needle/metrics_tuning.hpp"

namespace needle::cli {

struct ManifestCase {
  std::string label;
  io::Scenario scenario;  // script already resolved
  io::GroundTruth truth;
};

struct Manifest {
  std::vector<ManifestCase> cases;
  std::optional<metrics::FitParameters> seed;
  metrics::FitBounds bounds;
  metrics::FitOptions options;

  std::vector<metrics::FitCase> fit_cases() const;

  /// Explicit seed, or the parameters of the first case's scenario.
  metrics::FitParameters seed_or_default() const;
};

/// Relative paths resolve against `base_dir`. Throws LoadError (with the key path) for
/// unknown keys, missing files and a manifest without cases.
Manifest parse_manifest(std::string_view toml_text, const std::filesystem::path& base_dir,
                        const std::string& source = "<manifest>");
Manifest load_manifest(const std::filesystem::path& path);

}  // namespace needle::cli
