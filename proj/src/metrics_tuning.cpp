#include "needle/metrics_tuning.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "needle/error.hpp"

namespace needle::metrics {

namespace {

std::vector<double> cumulative_length(const Polyline& c) {
  std::vector<double> s(c.size(), 0.0);
  for (std::size_t i = 1; i < c.size(); ++i) s[i] = s[i - 1] + (c[i] - c[i - 1]).norm();
  return s;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace

Eigen::Vector2d point_at_fraction(const Polyline& curve, double t) {
  if (curve.size() < 2) throw PreconditionError("curve needs at least 2 points");
  if (t <= 0.0) return curve.front();
  if (t >= 1.0) return curve.back();
  const std::vector<double> s = cumulative_length(curve);
  const double target = t * s.back();
  const auto it = std::upper_bound(s.begin(), s.end(), target);
  const auto i = static_cast<std::size_t>(std::distance(s.begin(), it));
  if (i >= curve.size()) return curve.back();
  const double seg = s[i] - s[i - 1];
  const double u = seg > 0.0 ? (target - s[i - 1]) / seg : 0.0;
  return curve[i - 1] + u * (curve[i] - curve[i - 1]);
}

Correspondence correspond(const Polyline& sim, const Polyline& truth, std::optional<std::size_t> k) {
  if (sim.size() < 2 || truth.size() < 2) {
    throw PreconditionError("correspondence needs two curves with at least 2 points each");
  }
  const std::size_t count = k.value_or(truth.size());
  if (count < 2) throw PreconditionError("correspondence needs K >= 2");
  const double ls = cumulative_length(sim).back();
  const double lt = cumulative_length(truth).back();
  if (!(ls > 0.0) || !(lt > 0.0)) throw PreconditionError("degenerate zero-length curve");

  Correspondence c;
  c.sim.reserve(count);
  c.truth.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(count - 1);
    c.sim.push_back(point_at_fraction(sim, t));
    c.truth.push_back(point_at_fraction(truth, t));
  }
  return c;
}

Polyline inserted_part(const Polyline& polyline, const tissue::TissueDomain& domain) {
  for (std::size_t i = 0; i < polyline.size(); ++i) {
    const double here = domain.signed_distance(0, polyline[i]);
    if (here < 0.0) continue;
    if (i == 0) return polyline;
    const double before = domain.signed_distance(0, polyline[i - 1]);
    const double t = before / (before - here);
    const Eigen::Vector2d crossing = polyline[i - 1] + t * (polyline[i] - polyline[i - 1]);
    Polyline out{crossing};
    const std::size_t first = (polyline[i] - crossing).norm() > 0.0 ? i : i + 1;
    out.insert(out.end(), polyline.begin() + static_cast<std::ptrdiff_t>(first), polyline.end());
    if (out.size() < 2) break;
    return out;
  }
  throw PreconditionError("needle has not reached the tissue");
}

double tip_error(const Correspondence& c) { return (c.sim.back() - c.truth.back()).norm(); }

std::vector<double> in_plane_errors(const Correspondence& c) {
  std::vector<double> e(c.sim.size());
  for (std::size_t j = 0; j < e.size(); ++j) e[j] = (c.sim[j] - c.truth[j]).norm();
  return e;
}

std::optional<double> edp(double te, const Polyline& truth) {
  if (truth.empty()) return std::nullopt;
  const double deflection = std::abs(truth.back().y() - truth.front().y());
  if (!(deflection > 0.0)) return std::nullopt;
  return 100.0 * te / deflection;
}

ErrorReport evaluate(const Polyline& sim, const Polyline& truth, std::optional<std::size_t> k) {
  const Correspondence c = correspond(sim, truth, k);
  ErrorReport r;
  r.ipe = in_plane_errors(c);
  r.tip_error = r.ipe.back();
  r.max_ipe = *std::max_element(r.ipe.begin(), r.ipe.end());
  r.median_ipe = median_of(r.ipe);
  r.mean_ipe = mean_of(r.ipe);
  r.std_ipe = population_std(r.ipe);
  r.edp_percent = edp(r.tip_error, truth);
  return r;
}

Summary summarize(const std::vector<ErrorReport>& reports) {
  Summary s;
  s.insertions = reports.size();
  if (reports.empty()) return s;
  std::vector<double> medians, means, stds, maxima, tips, edps, pooled;
  for (const ErrorReport& r : reports) {
    medians.push_back(r.median_ipe);
    means.push_back(r.mean_ipe);
    stds.push_back(r.std_ipe);
    maxima.push_back(r.max_ipe);
    tips.push_back(r.tip_error);
    if (r.edp_percent) edps.push_back(*r.edp_percent);
    pooled.insert(pooled.end(), r.ipe.begin(), r.ipe.end());
  }
  s.median_ipe = mean_of(medians);
  s.pooled_median_ipe = median_of(pooled);
  s.mean_ipe = mean_of(means);
  s.std_ipe = mean_of(stds);
  s.mean_ipe_spread = population_std(means);
  s.max_ipe = mean_of(maxima);
  s.tip_error = mean_of(tips);
  s.edp_defined = edps.size();
  if (!edps.empty()) s.edp_percent = mean_of(edps);
  return s;
}

void write_report_csv(std::ostream& out, const std::vector<std::pair<std::string, Summary>>& rows) {
  const auto num = [](double v) {
    std::array<char, 64> buf{};
    const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), r.ptr);
  };
  out << "label,insertions,median_err_mm,pooled_median_err_mm,ipe_mean_mm,ipe_std_mm,"
         "ipe_spread_mm,max_ipe_mm,te_mm,edp_percent\n";
  for (const auto& [label, s] : rows) {
    out << label << ',' << s.insertions << ',' << num(s.median_ipe * 1e3) << ','
        << num(s.pooled_median_ipe * 1e3) << ',' << num(s.mean_ipe * 1e3) << ','
        << num(s.std_ipe * 1e3) << ',' << num(s.mean_ipe_spread * 1e3) << ','
        << num(s.max_ipe * 1e3) << ',' << num(s.tip_error * 1e3) << ','
        << (s.edp_percent ? num(*s.edp_percent) : std::string("undefined")) << '\n';
  }
}

// ---- fitting --------------------------------------------------------------------------

sim::Model with_parameters(const sim::Model& model, const FitParameters& p) {
  std::vector<tissue::OgdenLayer> layers = model.domain.layers();
  for (std::size_t i = 0; i < layers.size() && i < p.layers.size(); ++i) {
    layers[i].mu = p.layers[i].mu;
    layers[i].alpha = p.layers[i].alpha;
  }
  sim::Model out{model.needle, tissue::TissueDomain(std::move(layers), model.domain.insertion_direction()),
                 model.bevel, model.solver, model.initial_pose};
  out.bevel.offset = p.bevel;
  return out;
}

Polyline simulate_shape(const sim::Model& model, const io::Script& script) {
  sim::SimState state = sim::initial_state(model);
  for (const io::ScriptStep& s : script) sim::step(state, s, model);
  return inserted_part(state.polyline, model.domain);
}

double fit_objective(const std::vector<FitCase>& cases, const FitParameters& p,
                     const FitOptions& options) {
  double total = 0.0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    try {
      const FitCase& c = cases[i];
      const Polyline shape = simulate_shape(with_parameters(c.model, p), c.script);
      total += evaluate(shape, c.truth).mean_ipe;
    } catch (const Error& e) {
      if (options.log) options.log("case " + std::to_string(i) + " failed: " + e.what());
      return std::numeric_limits<double>::infinity();
    }
  }
  return total / static_cast<double>(cases.size());
}

namespace {

// Unit-cube coordinates: log10 mu and alpha per layer, then b, each scaled to its bound interval.
class ParameterMap {
 public:
  ParameterMap(std::size_t layers, const FitBounds& b) : layers_(layers), b_(b) {}

  std::size_t dimension() const { return 2 * layers_ + 1; }

  Eigen::VectorXd encode(const FitParameters& p) const {
    Eigen::VectorXd z(static_cast<Eigen::Index>(dimension()));
    const double lo = std::log10(b_.mu_min), hi = std::log10(b_.mu_max);
    for (std::size_t i = 0; i < layers_; ++i) {
      z[static_cast<Eigen::Index>(2 * i)] = (std::log10(p.layers[i].mu) - lo) / (hi - lo);
      z[static_cast<Eigen::Index>(2 * i + 1)] =
          (p.layers[i].alpha - b_.alpha_min) / (b_.alpha_max - b_.alpha_min);
    }
    z[static_cast<Eigen::Index>(2 * layers_)] =
        (p.bevel - b_.bevel_min) / (b_.bevel_max - b_.bevel_min);
    return z;
  }

  FitParameters decode(const Eigen::VectorXd& z) const {
    FitParameters p;
    const double lo = std::log10(b_.mu_min), hi = std::log10(b_.mu_max);
    for (std::size_t i = 0; i < layers_; ++i) {
      p.layers.push_back({std::pow(10.0, lo + z[static_cast<Eigen::Index>(2 * i)] * (hi - lo)),
                          b_.alpha_min + z[static_cast<Eigen::Index>(2 * i + 1)] *
                                             (b_.alpha_max - b_.alpha_min)});
    }
    p.bevel = b_.bevel_min + z[static_cast<Eigen::Index>(2 * layers_)] * (b_.bevel_max - b_.bevel_min);
    return p;
  }

 private:
  std::size_t layers_;
  FitBounds b_;
};

Eigen::VectorXd project(Eigen::VectorXd z) { return z.cwiseMax(0.0).cwiseMin(1.0); }

struct Simplex {
  std::vector<Eigen::VectorXd> x;
  std::vector<double> f;

  void sort() {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    // Stable so that equal values keep their insertion order and the run stays deterministic.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a] < f[b]; });
    std::vector<Eigen::VectorXd> xs;
    std::vector<double> fs;
    for (std::size_t i : order) {
      xs.push_back(x[i]);
      fs.push_back(f[i]);
    }
    x = std::move(xs);
    f = std::move(fs);
  }

  double diameter() const {
    double d = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) d = std::max(d, (x[i] - x[0]).cwiseAbs().maxCoeff());
    return d;
  }
};

}  // namespace

FitResult fit_parameters(const std::vector<FitCase>& cases, const FitParameters& seed,
                         const FitBounds& bounds, const FitOptions& options) {
  if (cases.empty()) throw PreconditionError("fit needs at least one (scenario, ground truth) pair");
  std::size_t layers = 0;
  for (const FitCase& c : cases) layers = std::max(layers, c.model.domain.size());
  if (seed.layers.size() < layers) {
    throw PreconditionError("seed has " + std::to_string(seed.layers.size()) +
                            " layers, the cases need " + std::to_string(layers));
  }
  if (!(bounds.mu_min > 0.0 && bounds.mu_min < bounds.mu_max && bounds.alpha_min < bounds.alpha_max &&
        bounds.bevel_min >= 0.0 && bounds.bevel_min < bounds.bevel_max)) {
    throw PreconditionError("fit bounds are empty or inverted");
  }
  for (std::size_t i = 0; i < layers; ++i) {
    const io::LayerParameters& l = seed.layers[i];
    if (!(l.mu >= bounds.mu_min && l.mu <= bounds.mu_max)) {
      throw PreconditionError("seed mu of layer " + std::to_string(i + 1) + " outside bounds");
    }
    if (!(l.alpha >= bounds.alpha_min && l.alpha <= bounds.alpha_max)) {
      throw PreconditionError("seed alpha of layer " + std::to_string(i + 1) + " outside bounds");
    }
  }
  if (!(seed.bevel >= bounds.bevel_min && seed.bevel <= bounds.bevel_max)) {
    throw PreconditionError("seed bevel offset outside bounds");
  }

  const ParameterMap map(layers, bounds);
  FitParameters trimmed = seed;
  trimmed.layers.resize(layers);
  const auto n = static_cast<Eigen::Index>(map.dimension());

  FitResult result;
  const auto evaluate_at = [&](const Eigen::VectorXd& z) {
    ++result.evaluations;
    return fit_objective(cases, map.decode(z), options);
  };

  Eigen::VectorXd best_x = map.encode(trimmed);
  double best_f = evaluate_at(best_x);
  constexpr double kStep = 0.05;

  for (int restart = 0; restart < std::max(1, options.restarts); ++restart) {
    Simplex s;
    s.x.push_back(best_x);
    s.f.push_back(best_f);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd v = best_x;
      // Step inward when the start sits on the upper face of the box.
      v[i] += v[i] + kStep <= 1.0 ? kStep : -kStep;
      s.x.push_back(v);
      s.f.push_back(evaluate_at(v));
    }
    const int budget_end = result.evaluations + options.max_evaluations;
    bool converged = false;

    while (true) {
      s.sort();
      best_x = s.x.front();
      best_f = s.f.front();
      result.best_trace.push_back(std::isfinite(best_f) ? best_f : std::numeric_limits<double>::max());
      const double spread = s.f.back() - s.f.front();
      if (std::isfinite(spread) && spread <= options.f_tolerance && s.diameter() <= options.x_tolerance) {
        converged = true;
        break;
      }
      if (result.evaluations >= budget_end) break;
      ++result.iterations;

      const std::size_t worst = s.x.size() - 1;
      Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
      for (std::size_t i = 0; i < worst; ++i) centroid += s.x[i];
      centroid /= static_cast<double>(worst);

      const Eigen::VectorXd xr = project(centroid + (centroid - s.x[worst]));
      const double fr = evaluate_at(xr);
      if (fr < s.f.front()) {
        const Eigen::VectorXd xe = project(centroid + 2.0 * (centroid - s.x[worst]));
        const double fe = evaluate_at(xe);
        if (fe < fr) {
          s.x[worst] = xe;
          s.f[worst] = fe;
        } else {
          s.x[worst] = xr;
          s.f[worst] = fr;
        }
        continue;
      }
      if (fr < s.f[worst - 1]) {
        s.x[worst] = xr;
        s.f[worst] = fr;
        continue;
      }
      const bool outside = fr < s.f[worst];
      const Eigen::VectorXd xc =
          outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                  : Eigen::VectorXd(centroid + 0.5 * (s.x[worst] - centroid));
      const double fc = evaluate_at(xc);
      if (outside ? fc <= fr : fc < s.f[worst]) {
        s.x[worst] = xc;
        s.f[worst] = fc;
        continue;
      }
      for (std::size_t i = 1; i < s.x.size(); ++i) {
        s.x[i] = s.x[0] + 0.5 * (s.x[i] - s.x[0]);
        s.f[i] = evaluate_at(s.x[i]);
      }
    }
    result.converged = converged;
    if (options.log) {
      options.log("restart " + std::to_string(restart + 1) + ": objective " + std::to_string(best_f * 1e3) +
                  " mm after " + std::to_string(result.evaluations) + " evaluations");
    }
  }

  result.parameters = map.decode(best_x);
  result.objective = best_f;
  return result;
}

}  // namespace needle::metrics
