#include <cmath>
#include <random>
#include <sstream>

#include <Eigen/Geometry>

#include "doctest.h"

#include "needle/error.hpp"
#include "needle/metrics_tuning.hpp"
#include "sim_fixtures.hpp"

using namespace needle;
using metrics::Polyline;
using Eigen::Vector2d;

namespace {

// Brute-force resampling: walk the curve in order and interpolate on the segment
// whose cumulative length brackets the target. Written without shared helpers.
Vector2d walk_to(const Polyline& c, double fraction) {
  double total = 0.0;
  for (std::size_t i = 1; i < c.size(); ++i) total += (c[i] - c[i - 1]).norm();
  const double target = fraction * total;
  double run = 0.0;
  for (std::size_t i = 1; i < c.size(); ++i) {
    const double seg = (c[i] - c[i - 1]).norm();
    if (run + seg >= target) {
      const double u = seg > 0 ? (target - run) / seg : 0.0;
      return c[i - 1] * (1.0 - u) + c[i] * u;
    }
    run += seg;
  }
  return c.back();
}

Polyline random_curve(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> step(0.5e-3, 3e-3), wobble(-0.6, 0.6), y0(-2e-3, 2e-3);
  Polyline c{Vector2d(0.0, y0(rng))};
  double heading = 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    heading = 0.5 * heading + 0.5 * wobble(rng);
    c.push_back(c.back() + step(rng) * Vector2d(std::cos(heading), std::sin(heading)));
  }
  return c;
}

Polyline transformed(const Polyline& c, double angle, const Vector2d& shift, bool flip) {
  const Eigen::Rotation2Dd r(angle);
  Polyline out;
  for (Vector2d p : c) {
    if (flip) p.y() = -p.y();
    out.push_back(r * p + shift);
  }
  return out;
}

double median_sorted_copy(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

metrics::ErrorReport report_from(std::vector<double> ipe, std::optional<double> edp) {
  metrics::ErrorReport r;
  r.ipe = ipe;
  r.tip_error = ipe.back();
  r.max_ipe = *std::max_element(ipe.begin(), ipe.end());
  r.median_ipe = median_sorted_copy(ipe);
  double m = 0;
  for (double x : ipe) m += x;
  r.mean_ipe = m / ipe.size();
  double v = 0;
  for (double x : ipe) v += (x - r.mean_ipe) * (x - r.mean_ipe);
  r.std_ipe = std::sqrt(v / ipe.size());
  r.edp_percent = edp;
  return r;
}

}  // namespace

TEST_CASE("identical curves have zero error everywhere") {
  const Polyline c{{0, 0}, {0.01, 0.001}, {0.02, 0.003}, {0.03, 0.006}};
  const auto r = metrics::evaluate(c, c);
  CHECK(r.ipe.size() == 4);
  for (double e : r.ipe) CHECK(e == 0.0);
  CHECK(r.tip_error == 0.0);
  CHECK(*r.edp_percent == 0.0);
}

TEST_CASE("parallel curves 1 mm apart give a constant 1 mm error") {
  const Polyline sim{{0, 0.001}, {0.04, 0.001}};
  const Polyline truth{{0, 0}, {0.01, 0}, {0.04, 0}};
  const auto r = metrics::evaluate(sim, truth, 5);
  REQUIRE(r.ipe.size() == 5);
  for (double e : r.ipe) CHECK(e == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(r.max_ipe == doctest::Approx(1e-3));
  CHECK(r.median_ipe == doctest::Approx(1e-3));
  CHECK(r.std_ipe == doctest::Approx(0.0).epsilon(1e-15));
  CHECK_FALSE(r.edp_percent.has_value());  // straight reference: no deflection to normalise by
}

TEST_CASE("three-point correspondence pins both endpoints and the midpoint of each curve") {
  const Polyline sim{{0, 0}, {0.01, 0}, {0.03, 0}};
  const Polyline truth{{0, 0}, {0, 0.02}};
  const auto c = metrics::correspond(sim, truth, 3);
  CHECK(c.sim[0] == Vector2d(0, 0));
  CHECK(c.sim[2] == Vector2d(0.03, 0));
  CHECK(c.sim[1].isApprox(Vector2d(0.015, 0)));
  CHECK(c.truth[1].isApprox(Vector2d(0, 0.01)));
}

TEST_CASE("tip error of a 3-4-5 offset and the deflection percentage") {
  const Polyline truth{{0, 0}, {0.05, 0.010}};
  const Polyline sim{{0, 0}, {0.05 + 0.003, 0.010 + 0.004}};
  const auto r = metrics::evaluate(sim, truth, 2);
  CHECK(r.tip_error == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(*r.edp_percent == doctest::Approx(50.0).epsilon(1e-12));
  CHECK(*metrics::edp(0.001, truth) == doctest::Approx(10.0));
  CHECK_FALSE(metrics::edp(0.001, Polyline{{0, 0.002}, {0.05, 0.002}}).has_value());
}

TEST_CASE("tip error equals the last in-plane error") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const auto r = metrics::evaluate(random_curve(rng, 12), random_curve(rng, 9));
    CHECK(r.tip_error == r.ipe.back());
  }
}

TEST_CASE("correspondence preconditions") {
  const Polyline ok{{0, 0}, {1, 0}};
  CHECK_THROWS_AS(metrics::correspond(Polyline{{0, 0}}, ok), PreconditionError);
  CHECK_THROWS_AS(metrics::correspond(ok, Polyline{{0, 0}, {0, 0}}), PreconditionError);
  CHECK_THROWS_AS(metrics::correspond(ok, ok, 1), PreconditionError);
}

TEST_CASE("metrics are invariant under a common rigid motion") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> angle(-3.0, 3.0), shift(-0.05, 0.05);
  for (int t = 0; t < 30; ++t) {
    const Polyline a = random_curve(rng, 15), b = random_curve(rng, 10);
    const auto base = metrics::evaluate(a, b);
    const double th = angle(rng);
    const Vector2d d(shift(rng), shift(rng));
    const bool flip = t % 2 == 1;
    const auto moved = metrics::evaluate(transformed(a, th, d, flip), transformed(b, th, d, flip));
    for (std::size_t j = 0; j < base.ipe.size(); ++j) CHECK(moved.ipe[j] == doctest::Approx(base.ipe[j]).epsilon(1e-9));
    CHECK(moved.tip_error == doctest::Approx(base.tip_error).epsilon(1e-9));

    // Deflection is measured along y, so EDP keeps its value only under translations and mirror flips.
    const auto shifted = metrics::evaluate(transformed(a, 0.0, d, flip), transformed(b, 0.0, d, flip));
    REQUIRE(base.edp_percent.has_value());
    CHECK(*shifted.edp_percent == doctest::Approx(*base.edp_percent).epsilon(1e-9));
  }
}

TEST_CASE("random pairs agree with a brute-force resampling oracle") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> count(2, 40);
  for (int t = 0; t < 100; ++t) {
    const Polyline sim = random_curve(rng, static_cast<std::size_t>(count(rng)));
    const Polyline truth = random_curve(rng, static_cast<std::size_t>(count(rng)));
    const auto r = metrics::evaluate(sim, truth);
    const std::size_t k = truth.size();
    REQUIRE(r.ipe.size() == k);
    double sum = 0, worst = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double f = double(j) / double(k - 1);
      const double e = (walk_to(sim, f) - walk_to(truth, f)).norm();
      CHECK(std::abs(r.ipe[j] - e) <= 1e-12);
      sum += e;
      worst = std::max(worst, e);
    }
    CHECK(std::abs(r.mean_ipe - sum / k) <= 1e-12);
    CHECK(std::abs(r.max_ipe - worst) <= 1e-12);
  }
}

TEST_CASE("inserted part starts at the entry crossing") {
  const auto model = test::homogeneous_model();
  const Polyline line{{-0.02, 0}, {-0.01, 0}, {0.0, 0.0}, {0.01, 0.001}, {0.02, 0.002}};
  const Polyline in = metrics::inserted_part(line, model.domain);
  REQUIRE(in.size() == 3);
  CHECK(in.front() == Vector2d(0, 0));

  const Polyline straddle{{-0.01, 0}, {0.01, 0.002}};
  const Polyline cut = metrics::inserted_part(straddle, model.domain);
  REQUIRE(cut.size() == 2);
  CHECK(cut.front().isApprox(Vector2d(0, 0.001)));

  CHECK_THROWS_AS(metrics::inserted_part(Polyline{{-0.02, 0}, {-0.01, 0}}, model.domain), PreconditionError);
}

TEST_CASE("summarize over one report reproduces it") {
  const auto r = report_from({1e-3, 2e-3, 4e-3}, 20.0);
  const auto s = metrics::summarize({r});
  CHECK(s.insertions == 1);
  CHECK(s.median_ipe == r.median_ipe);
  CHECK(s.pooled_median_ipe == r.median_ipe);
  CHECK(s.mean_ipe == r.mean_ipe);
  CHECK(s.std_ipe == r.std_ipe);
  CHECK(s.mean_ipe_spread == 0.0);
  CHECK(s.max_ipe == r.max_ipe);
  CHECK(s.tip_error == r.tip_error);
  CHECK(*s.edp_percent == 20.0);
}

TEST_CASE("summarize over identical reports has zero spread") {
  const auto r = report_from({1e-3, 3e-3}, std::nullopt);
  const auto s = metrics::summarize({r, r, r, r});
  CHECK(s.insertions == 4);
  CHECK(s.mean_ipe_spread == 0.0);
  CHECK(s.mean_ipe == doctest::Approx(2e-3));
  CHECK_FALSE(s.edp_percent.has_value());
  CHECK(s.edp_defined == 0);
}

TEST_CASE("summarize over three hand-computed reports") {
  // Means 2, 4, 6 mm; medians 2, 4, 5 mm; maxima 3, 5, 9 mm; tips 3, 5, 4 mm.
  const auto a = report_from({1e-3, 2e-3, 3e-3}, 10.0);
  const auto b = report_from({3e-3, 4e-3, 5e-3}, std::nullopt);
  const auto c = report_from({9e-3, 5e-3, 4e-3}, 30.0);
  const auto s = metrics::summarize({a, b, c});
  CHECK(s.mean_ipe == doctest::Approx(4e-3));
  CHECK(s.median_ipe == doctest::Approx(11e-3 / 3));
  CHECK(s.max_ipe == doctest::Approx(17e-3 / 3));
  CHECK(s.tip_error == doctest::Approx(4e-3));
  CHECK(s.mean_ipe_spread == doctest::Approx(std::sqrt(8.0 / 3.0) * 1e-3));
  CHECK(s.pooled_median_ipe == doctest::Approx(4e-3));  // sorted: 1 2 3 3 4 4 5 5 9
  CHECK(s.edp_defined == 2);
  CHECK(*s.edp_percent == doctest::Approx(20.0));
}

TEST_CASE("report CSV is in millimetres with undefined EDP spelled out") {
  const auto s1 = metrics::summarize({report_from({1e-3, 3e-3}, 12.5)});
  const auto s2 = metrics::summarize({report_from({2e-3, 2e-3}, std::nullopt)});
  std::ostringstream out;
  metrics::write_report_csv(out, {{"Ph2", s1}, {"flat", s2}});
  CHECK(out.str() ==
        "label,insertions,median_err_mm,pooled_median_err_mm,ipe_mean_mm,ipe_std_mm,"
        "ipe_spread_mm,max_ipe_mm,te_mm,edp_percent\n"
        "Ph2,1,2,2,2,1,0,3,3,12.5\n"
        "flat,1,2,2,2,0,0,2,2,undefined\n");
}

// ---- fitting ------------------------------------------------------------------------

namespace {

io::Script straight_push(double advance, int steps) {
  return io::Script(static_cast<std::size_t>(steps), io::ScriptStep{sim::HInput{advance}});
}

metrics::FitOptions quick_options() {
  metrics::FitOptions o;
  o.restarts = 1;
  o.max_evaluations = 60;
  return o;
}

}  // namespace

TEST_CASE("fitting needs cases and an in-bounds seed") {
  const metrics::FitParameters seed{{{2e5, 1.0}}, 0.0};
  CHECK_THROWS_AS(metrics::fit_parameters({}, seed), PreconditionError);

  const auto model = test::homogeneous_model();
  const auto script = straight_push(2e-3, 6);
  const metrics::FitCase c{model, script, metrics::simulate_shape(model, script)};
  CHECK_THROWS_AS(metrics::fit_parameters({c}, {{{1e12, 1.0}}, 0.0}), PreconditionError);
  CHECK_THROWS_AS(metrics::fit_parameters({c}, {{{2e5, 1.0}}, 2e-3}), PreconditionError);
  CHECK_THROWS_AS(metrics::fit_parameters({c}, {{}, 0.0}), PreconditionError);
}

TEST_CASE("a straight reference drives the bevel offset to zero") {
  const auto model = test::homogeneous_model();
  const auto script = straight_push(2e-3, 10);
  const Polyline truth = metrics::simulate_shape(model, script);
  const metrics::FitResult r =
      metrics::fit_parameters({{model, script, truth}}, {{{2e5, 1.0}}, 0.2e-3}, {}, quick_options());
  CHECK(r.parameters.bevel < 0.02e-3);
  CHECK(r.objective < 1e-6);
}

TEST_CASE("best objective never increases and a perturbed seed recovers the shape") {
  const auto truth_model = test::homogeneous_model(2e5, 1.0, 0.2e-3);
  const auto script = straight_push(2e-3, 10);
  const Polyline truth = metrics::simulate_shape(truth_model, script);

  metrics::FitOptions o = quick_options();
  o.max_evaluations = 150;
  const metrics::FitResult r =
      metrics::fit_parameters({{truth_model, script, truth}}, {{{3e5, 1.5}}, 0.1e-3}, {}, o);
  REQUIRE_FALSE(r.best_trace.empty());
  for (std::size_t i = 1; i < r.best_trace.size(); ++i) CHECK(r.best_trace[i] <= r.best_trace[i - 1]);
  CHECK(r.objective == r.best_trace.back());
  CHECK(r.objective < 0.05e-3);
  CHECK(metrics::fit_objective({{truth_model, script, truth}}, r.parameters) == doctest::Approx(r.objective));
}
