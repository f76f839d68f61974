#include <cmath>
#include <random>

#include "doctest.h"
#include "needle/error.hpp"
#include "needle/tissue.hpp"

using namespace needle;
using namespace needle::tissue;

namespace {

OgdenLayer layer(const char* id, double mu, double alpha, double entry_x, double gamma = 0.0) {
  return OgdenLayer{id, mu, alpha, gamma, 0.040, Boundary::vertical(entry_x)};
}

}  // namespace

TEST_SUITE("tissue") {

TEST_CASE("stretch ratio") {
  CHECK(stretch(0.0, 0.040).value == 1.0);
  CHECK_FALSE(stretch(0.0, 0.040).clamped);
  CHECK(stretch(-0.004, 0.040).value == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(stretch(0.004, 0.040).value == stretch(-0.004, 0.040).value);
  const Stretch over = stretch(0.05, 0.040);
  CHECK(over.value == kMinStretch);
  CHECK(over.clamped);
  CHECK_THROWS_AS(stretch(0.001, 0.0), InvalidProperty);
}

TEST_CASE("stretch is non-increasing in |u| and equals one only at zero") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (int i = 0; i < 2000; ++i) {
    const double a = u(rng);
    const double b = u(rng);
    const double lo = std::min(std::abs(a), std::abs(b));
    const double hi = std::max(std::abs(a), std::abs(b));
    CHECK(stretch(hi, 0.04).value <= stretch(-lo, 0.04).value);
    if (a != 0.0) CHECK(stretch(a, 0.04).value < 1.0);
  }
}

TEST_CASE("tangent modulus examples") {
  CHECK(tangent_stiffness(1.0, 2e5, 1.0) == doctest::Approx(6e5).epsilon(1e-15));
  CHECK(tangent_stiffness(0.9, 2e5, 1.0) ==
        doctest::Approx(4e5 * (1.0 + 0.5 * std::pow(0.9, -1.5))).epsilon(1e-14));
  CHECK(tangent_stiffness(0.9, 2e5, 1.0) == doctest::Approx(6.3425e5).epsilon(1e-4));

  // Stiff phantom layer: alpha = -1 makes the first term lambda^-2 and the second lambda^-0.5.
  const double lam = 0.95;
  const double expected = 2.0 * 3.3e7 * (1.0 / (lam * lam) + 0.5 / std::sqrt(lam));
  CHECK(tangent_stiffness(lam, 3.3e7, -1.0) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("tangent modulus domain errors") {
  CHECK_THROWS_AS(tangent_stiffness(0.04, 2e5, 1.0), DomainError);
  CHECK_THROWS_AS(tangent_stiffness(1.01, 2e5, 1.0), DomainError);
  CHECK_THROWS_AS(tangent_stiffness(0.5, 0.0, 1.0), DomainError);
  CHECK_THROWS_AS(tangent_stiffness(std::nan(""), 2e5, 1.0), DomainError);
  CHECK_NOTHROW(tangent_stiffness(kMinStretch, 2e5, 3.0));
}

TEST_CASE("undeformed modulus is three times mu for any alpha") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> alpha(-3.0, 3.0);
  std::uniform_real_distribution<double> log_mu(2.0, 8.0);
  for (int i = 0; i < 1000; ++i) {
    const double mu = std::pow(10.0, log_mu(rng));
    const double k = tangent_stiffness(1.0, mu, alpha(rng));
    CHECK(std::abs(k - 3.0 * mu) <= 1e-12 * 3.0 * mu);
  }
}

TEST_CASE("tangent modulus stays positive over the admissible box") {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> lam(kMinStretch, 1.0);
  std::uniform_real_distribution<double> alpha(-3.0, 3.0);
  std::uniform_real_distribution<double> log_mu(-3.0, 9.0);
  for (int i = 0; i < 5000; ++i) {
    const double k = tangent_stiffness(lam(rng), std::pow(10.0, log_mu(rng)), alpha(rng));
    CHECK(k > 0.0);
    CHECK(std::isfinite(k));
  }
}

TEST_CASE("friction factor and force density") {
  CHECK(friction_factor(0.0, 0.3) == 1.0);
  CHECK(friction_factor(1.0, 0.1) == doctest::Approx(0.95).epsilon(1e-15));

  const OgdenLayer l = layer("a", 2e5, 1.0, 0.0, 0.1);
  CHECK(force_density(0.0, 0.7, l, ForceMode::full) == 0.0);
  CHECK(force_density(0.0, 0.7, l) == 0.0);
  const double u = 1e-3;
  const double k = tangent_stiffness(stretch(u, l.thickness).value, l.mu, l.alpha);
  CHECK(force_density(u, 0.0, l, ForceMode::full) == k * u);
  CHECK(force_density(u, 1.0, l, ForceMode::full) == doctest::Approx(0.95 * k * u).epsilon(1e-14));
  CHECK(force_density(u, 1.0, l, ForceMode::approximate) == k * u);
}

TEST_CASE("force density is odd and modes agree without friction") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-0.03, 0.03);
  std::uniform_real_distribution<double> slope(-2.0, 2.0);
  std::uniform_real_distribution<double> alpha(-3.0, 3.0);
  std::uniform_real_distribution<double> gamma(0.0, 0.9);
  for (int i = 0; i < 2000; ++i) {
    const OgdenLayer with = layer("w", 1e5, alpha(rng), 0.0, gamma(rng));
    OgdenLayer without = with;
    without.gamma = 0.0;
    const double x = u(rng);
    const double s = slope(rng);
    CHECK(force_density(-x, 0.0, with, ForceMode::full) == -force_density(x, 0.0, with, ForceMode::full));
    CHECK(force_density(-x, 0.0, with) == -force_density(x, 0.0, with));
    CHECK(force_density(x, 0.0, with, ForceMode::full) == force_density(x, 0.0, with));
    CHECK(force_density(x, s, without, ForceMode::full) == force_density(x, s, without));
  }
}

TEST_CASE("layer lookup") {
  const TissueDomain d({layer("skin", 2e5, 1, 0.0), layer("fat", 3.3e7, -1, 0.020),
                        layer("muscle", 2e5, 1, 0.025), layer("core", 3.3e7, -1, 0.040)});
  CHECK_FALSE(d.layer_at({-0.001, 0.0}).has_value());
  CHECK(d.layer_at({0.0, 0.0}) == 0u);
  CHECK(d.layer_at({0.010, 0.003}) == 0u);
  CHECK(d.layer_at({0.0225, 0.0}) == 1u);
  CHECK(d.layer_at({0.020, 0.0}) == 1u);
  CHECK(d.layer_at({0.025, -0.05}) == 2u);
  CHECK(d.layer_at({0.5, 0.0}) == 3u);
  CHECK(d.distance_to_entry({-0.005, 0.0}, {1.0, 0.0}) == doctest::Approx(0.005));
  CHECK_FALSE(d.distance_to_entry({-0.005, 0.0}, {-1.0, 0.0}).has_value());
}

TEST_CASE("tilted entry boundary") {
  const double t = 20.0 * M_PI / 180.0;
  const Eigen::Vector2d along(std::sin(t), std::cos(t));
  const TissueDomain d({OgdenLayer{"a", 2e5, 1, 0, 0.04, {-0.05 * along, 0.05 * along}}});
  CHECK(d.layer_at({0.0, 0.0}) == 0u);
  CHECK(d.layer_at({0.001, 0.0}) == 0u);
  CHECK_FALSE(d.layer_at({-0.001, 0.0}).has_value());
  // Above the axis the boundary leans forward.
  CHECK_FALSE(d.layer_at({0.001, 0.01}).has_value());
  CHECK(d.distance_to_entry({-0.01, 0.0}, {1.0, 0.0}) == doctest::Approx(0.01));
}

TEST_CASE("domain validation names the offending layer") {
  auto message = [](auto&& make) {
    try {
      make();
    } catch (const InvalidProperty& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message([] { TissueDomain({layer("a", 2e5, 1, 0.0), layer("b", -1, 1, 0.01)}); })
            .find("layer 1") != std::string::npos);
  CHECK(message([] { TissueDomain({layer("a", 2e5, 1, 0.0, 1.0)}); }).find("layer 0") !=
        std::string::npos);
  CHECK(message([] { TissueDomain({layer("a", 2e5, 1, 0.02), layer("b", 2e5, 1, 0.01)}); })
            .find("layer 1") != std::string::npos);
  CHECK_THROWS_AS(TissueDomain({}), InvalidProperty);
  CHECK_THROWS_AS(
      TissueDomain({OgdenLayer{"h", 2e5, 1, 0, 0.04, {{-0.1, 0.0}, {0.1, 0.0}}}}),
      InvalidProperty);
  OgdenLayer thin = layer("t", 2e5, 1, 0.0);
  thin.thickness = 0.0;
  CHECK_THROWS_AS(TissueDomain({thin}), InvalidProperty);
  // Crossing boundaries within their extents.
  const OgdenLayer tilted{"x", 2e5, 1, 0, 0.04, {{-0.01, -0.1}, {0.03, 0.1}}};
  CHECK_THROWS_AS(TissueDomain({layer("a", 2e5, 1, 0.01), tilted}), InvalidProperty);
}

}  // TEST_SUITE
