#pragma once

// Shape error metrics between a simulated needle and a reference polyline, and
// black-box fitting of tissue parameters against reference shapes.

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "needle/scenario_io.hpp"
#include "needle/sim_core.hpp"

namespace needle::metrics {

using Polyline = std::vector<Eigen::Vector2d>;

struct Correspondence {
  Polyline sim;
  Polyline truth;
};

/// Point at arc-length fraction t in [0, 1] of a polyline.
Eigen::Vector2d point_at_fraction(const Polyline& curve, double t);

/// Resamples both curves at K stations of equal arc length, each over its own length,
/// so pair j sits at fraction j / (K - 1) of both. K defaults to the reference point count.
/// Throws PreconditionError for fewer than 2 points, a zero-length curve or K < 2.
Correspondence correspond(const Polyline& sim, const Polyline& truth,
                          std::optional<std::size_t> k = std::nullopt);

/// Part of `polyline` on the tissue side of the first entry boundary, starting at the crossing.
/// Throws PreconditionError when the polyline never reaches the tissue.
Polyline inserted_part(const Polyline& polyline, const tissue::TissueDomain& domain);

double tip_error(const Correspondence& c);
std::vector<double> in_plane_errors(const Correspondence& c);

/// 100 TE / |y_last - y_first| of the reference; nullopt when the reference has no deflection.
std::optional<double> edp(double tip_error, const Polyline& truth);

struct ErrorReport {
  double tip_error = 0.0;
  std::vector<double> ipe;
  double max_ipe = 0.0;
  double median_ipe = 0.0;
  double mean_ipe = 0.0;
  double std_ipe = 0.0;  // population standard deviation of the IPE samples
  std::optional<double> edp_percent;
};

ErrorReport evaluate(const Polyline& sim, const Polyline& truth,
                     std::optional<std::size_t> k = std::nullopt);

/// Table-style aggregate over insertions; lengths in metres.
struct Summary {
  std::size_t insertions = 0;
  double median_ipe = 0.0;         // mean of per-insertion medians
  double pooled_median_ipe = 0.0;  // median over all IPE samples
  double mean_ipe = 0.0;           // mean of per-insertion means
  double std_ipe = 0.0;            // mean of per-insertion standard deviations
  double mean_ipe_spread = 0.0;    // population std of the per-insertion means
  double max_ipe = 0.0;            // mean of per-insertion maxima
  double tip_error = 0.0;          // mean
  std::optional<double> edp_percent;  // mean over insertions where it is defined
  std::size_t edp_defined = 0;
};

Summary summarize(const std::vector<ErrorReport>& reports);

/// CSV with one row per labelled summary; lengths in mm, EDP in percent, "undefined" when absent.
void write_report_csv(std::ostream& out, const std::vector<std::pair<std::string, Summary>>& rows);

// ---- fitting ------------------------------------------------------------------------

struct FitCase {
  sim::Model model;
  io::Script script;
  Polyline truth;
};

struct FitParameters {
  std::vector<io::LayerParameters> layers;
  double bevel = 0.0;  // m
};

struct FitBounds {
  double mu_min = 1e2;
  double mu_max = 1e9;
  double alpha_min = -3.0;
  double alpha_max = 3.0;
  double bevel_min = 0.0;
  double bevel_max = 0.5e-3;
};

struct FitOptions {
  int restarts = 3;
  int max_evaluations = 400;    // per restart
  double f_tolerance = 1e-9;    // m, spread of simplex objective values
  double x_tolerance = 1e-4;    // simplex diameter in scaled coordinates
  std::function<void(const std::string&)> log;  // optional diagnostics sink
};

struct FitResult {
  FitParameters parameters;
  double objective = 0.0;  // mean IPE over all cases, m
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::vector<double> best_trace;  // best objective after each iteration
};

/// Applies parameters to a model: layer i takes entry i, the bevel offset is replaced.
sim::Model with_parameters(const sim::Model& model, const FitParameters& p);

/// Final inserted needle shape after running the script.
Polyline simulate_shape(const sim::Model& model, const io::Script& script);

/// Mean IPE over cases; +infinity when any simulation fails.
double fit_objective(const std::vector<FitCase>& cases, const FitParameters& p,
                     const FitOptions& options = {});

/// Nelder-Mead over (log10 mu, alpha) per layer and b with box projection and restarts.
/// Throws PreconditionError for no cases or a seed outside the bounds.
FitResult fit_parameters(const std::vector<FitCase>& cases, const FitParameters& seed,
                         const FitBounds& bounds = {}, const FitOptions& options = {});

}  // namespace needle::metrics
