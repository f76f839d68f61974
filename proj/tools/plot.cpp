#include "plot.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <sstream>

namespace needle::cli {

namespace {

constexpr double kMm = 1e3;
constexpr std::array<const char*, 4> kBandColours{"#f6d5d5", "#e9b3b3", "#f3c9b8", "#dca1a1"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::string render_svg(const sim::SimState& state, const sim::Model& model) {
  // Screen y grows downwards, so world y is negated on output.
  const auto sx = [](double x) { return num(x * kMm); };
  const auto sy = [](double y) { return num(-y * kMm); };

  double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
  for (const Eigen::Vector2d& p : state.polyline) {
    xmin = std::min(xmin, p.x());
    xmax = std::max(xmax, p.x());
    ymin = std::min(ymin, p.y());
    ymax = std::max(ymax, p.y());
  }
  const auto& layers = model.domain.layers();
  for (const tissue::OgdenLayer& l : layers) xmax = std::max(xmax, std::max(l.entry.from.x(), l.entry.to.x()) + 0.005);
  xmin -= 0.005;
  xmax += 0.005;
  const double half = std::max(0.015, 0.5 * (ymax - ymin) + 0.01);
  const double ymid = 0.5 * (ymax + ymin);
  ymin = ymid - half;
  ymax = ymid + half;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"" << sx(xmin) << ' ' << sy(ymax) << ' '
      << num((xmax - xmin) * kMm) << ' ' << num((ymax - ymin) * kMm) << "\" width=\""
      << num((xmax - xmin) * kMm * 6) << "\" height=\"" << num((ymax - ymin) * kMm * 6) << "\">\n";
  svg << "<rect x=\"" << sx(xmin) << "\" y=\"" << sy(ymax) << "\" width=\"" << num((xmax - xmin) * kMm)
      << "\" height=\"" << num((ymax - ymin) * kMm) << "\" fill=\"white\"/>\n";

  const Eigen::Vector2d dir = model.domain.insertion_direction();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const tissue::Boundary& a = layers[i].entry;
    const tissue::Boundary b = i + 1 < layers.size()
                                   ? layers[i + 1].entry
                                   : tissue::Boundary{a.from + dir * (xmax - xmin), a.to + dir * (xmax - xmin)};
    svg << "<polygon fill=\"" << kBandColours[i % kBandColours.size()] << "\" points=\"" << sx(a.from.x()) << ','
        << sy(a.from.y()) << ' ' << sx(a.to.x()) << ',' << sy(a.to.y()) << ' ' << sx(b.to.x()) << ','
        << sy(b.to.y()) << ' ' << sx(b.from.x()) << ',' << sy(b.from.y()) << "\"><title>" << layers[i].id
        << "</title></polygon>\n";
  }

  svg << "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"0.3\" points=\"";
  for (std::size_t i = 0; i < state.polyline.size(); ++i) {
    svg << (i ? " " : "") << sx(state.polyline[i].x()) << ',' << sy(state.polyline[i].y());
  }
  svg << "\"/>\n";

  if (state.in_contact()) {
    constexpr double arm = 0.0004;
    for (const sim::ConstraintPoint& c : state.constraints) {
      const Eigen::Vector2d p = sim::constraint_world(state, c);
      svg << "<path stroke=\"blue\" stroke-width=\"0.12\" d=\"M" << sx(p.x() - arm) << ' ' << sy(p.y() - arm) << " L"
          << sx(p.x() + arm) << ' ' << sy(p.y() + arm) << " M" << sx(p.x() - arm) << ' ' << sy(p.y() + arm) << " L"
          << sx(p.x() + arm) << ' ' << sy(p.y() - arm) << "\"/>\n";
    }
  }
  const Eigen::Vector2d tip = state.tip();
  svg << "<circle fill=\"red\" r=\"0.6\" cx=\"" << sx(tip.x()) << "\" cy=\"" << sy(tip.y()) << "\"/>\n";
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace needle::cli
