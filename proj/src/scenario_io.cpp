#include "needle/scenario_io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "needle/error.hpp"

namespace needle::io {

namespace {

using json = nlohmann::ordered_json;

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string shortest(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

// Shortest round-trip text without an exponent.
std::string plain(double v) {
  std::array<char, 400> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::fixed);
  return std::string(buf.data(), res.ptr);
}

struct UnitEntry {
  std::string_view symbol;
  Dimension dim;
  double scale;
};

constexpr std::array<UnitEntry, 11> kUnits{{
    {"m", Dimension::length, 1.0},
    {"cm", Dimension::length, 1e-2},
    {"mm", Dimension::length, 1e-3},
    {"um", Dimension::length, 1e-6},
    {"Pa", Dimension::pressure, 1.0},
    {"kPa", Dimension::pressure, 1e3},
    {"MPa", Dimension::pressure, 1e6},
    {"GPa", Dimension::pressure, 1e9},
    {"rad", Dimension::angle, 1.0},
    {"mrad", Dimension::angle, 1e-3},
    {"deg", Dimension::angle, M_PI / 180.0},
}};

const char* dimension_name(Dimension d) {
  switch (d) {
    case Dimension::length: return "length";
    case Dimension::pressure: return "pressure";
    case Dimension::angle: return "angle";
  }
  return "?";
}

const char* si_symbol(Dimension d) {
  switch (d) {
    case Dimension::length: return "m";
    case Dimension::pressure: return "Pa";
    case Dimension::angle: return "rad";
  }
  return "?";
}

}  // namespace

double parse_quantity(std::string_view text, Dimension dim, const std::string& field) {
  const std::string_view t = trim(text);
  double value = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), value);
  if (res.ec != std::errc{}) {
    throw LoadError(field, "expected '<number> <unit>', got '" + std::string(text) + "'");
  }
  const std::string_view unit = trim(t.substr(static_cast<std::size_t>(res.ptr - t.data())));
  if (unit.empty()) {
    throw LoadError(field, std::string("missing unit on '") + std::string(t) + "' (expected a " +
                               dimension_name(dim) + " such as '" + shortest(value) + " " +
                               (dim == Dimension::length ? "mm" : si_symbol(dim)) + "')");
  }
  if (!std::isfinite(value)) throw LoadError(field, "value is not finite");
  for (const UnitEntry& u : kUnits) {
    if (u.symbol != unit) continue;
    if (u.dim != dim) {
      throw LoadError(field, "unit '" + std::string(unit) + "' is not a " + dimension_name(dim));
    }
    return value * u.scale;
  }
  throw LoadError(field, "unknown unit '" + std::string(unit) + "'");
}

std::string format_quantity(double value, Dimension dim) {
  return shortest(value) + " " + si_symbol(dim);
}

// ---- presets ------------------------------------------------------------------------

const std::vector<ParameterRow>& parameter_table() {
  static const std::vector<ParameterRow> rows = [] {
    const std::vector<LayerParameters> phantom{{2e5, 1}, {3.3e7, -1}, {2e5, 1}, {3.3e7, -1}};
    const std::vector<LayerParameters> tuned{{2.2e5, 1}, {3.2e7, -1}, {2.2e5, 1}, {3.2e7, -1}};
    return std::vector<ParameterRow>{
        {"ph2_t4", "Ph2 T4", phantom, 0.085},
        {"ph1_t5", "Ph1 T5", {{2e5, 1}, {3.3e7, -1}, {2e6, 1}, {3.3e7, -1}}, 0.03},
        {"ph2_t5", "Ph2 T5", phantom, 0.085},
        {"ph3_t5", "Ph3 T5", phantom, 0.03},
        {"ch_t5", "Ch T5", {{1e3, 1}}, 0.085},
        {"ph2_t6_st1", "Ph2 T6 St1", tuned, 0.085},
        {"ph2_t6_st2", "Ph2 T6 St2", {{5e4, 1}, {1e7, -1}, {5e4, 1}, {1e7, -1}}, 0.085},
        {"ph2_t6_st3", "Ph2 T6 St3", {{2.2e5, 0.85}, {3.2e7, -0.98}, {2.2e5, 0.85}, {3.2e7, -0.98}},
         0.085},
        {"ph2_t6_st4", "Ph2 T6 St4", tuned, 0.085},
        {"ch_t6_st5", "Ch T6 St5", {{4e3, 0.2}}, 0.085},
    };
  }();
  return rows;
}

std::string parameter_table_csv() {
  std::string out = "row,mu1,alpha1,mu2,alpha2,mu3,alpha3,mu4,alpha4,b_mm\n";
  for (const ParameterRow& r : parameter_table()) {
    out += r.label;
    for (std::size_t i = 0; i < 4; ++i) {
      if (i < r.layers.size()) {
        out += "," + plain(r.layers[i].mu) + "," + plain(r.layers[i].alpha);
      } else {
        out += ",n/a,n/a";
      }
    }
    out += "," + plain(r.bevel_mm) + "\n";
  }
  return out;
}

namespace {

struct Alias {
  std::string_view name;
  std::string_view row;
};
constexpr std::array<Alias, 4> kAliases{{
    {"ph1", "ph1_t5"}, {"ph2", "ph2_t4"}, {"ph3", "ph3_t5"}, {"chicken", "ch_t5"}}};

// Phantom band layout along the insertion axis: entry planes at 0, 20, 25 and 40 mm.
constexpr std::array<double, 4> kPhantomEntries{0.0, 0.020, 0.025, 0.040};
constexpr double kBoundaryHalfSpan = 0.100;

sim::Pose2 default_pose(const sim::NeedleSpec& needle) {
  // Tip 5 mm short of the entry plane, pointing along +x.
  return sim::Pose2{Eigen::Vector2d(-needle.length - 0.005, 0.0), 0.0};
}

Scenario from_row(const ParameterRow& row, std::string name) {
  std::vector<tissue::OgdenLayer> layers;
  for (std::size_t i = 0; i < row.layers.size(); ++i) {
    layers.push_back(tissue::OgdenLayer{"layer" + std::to_string(i + 1), row.layers[i].mu,
                                        row.layers[i].alpha, 0.0, 0.040,
                                        tissue::Boundary::vertical(kPhantomEntries[i], kBoundaryHalfSpan)});
  }
  sim::NeedleSpec needle;
  sim::Model model{needle, tissue::TissueDomain(std::move(layers)),
                   sim::BevelSpec{row.bevel_mm * 1e-3, 1}, sim::SolverSettings{},
                   default_pose(needle)};
  return Scenario{std::move(name), std::move(model), {}};
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const Alias& a : kAliases) out.emplace_back(a.name);
  for (const ParameterRow& r : parameter_table()) out.push_back(r.key);
  return out;
}

Scenario preset(std::string_view name) {
  std::string_view key = name;
  for (const Alias& a : kAliases) {
    if (a.name == name) key = a.row;
  }
  for (const ParameterRow& r : parameter_table()) {
    if (r.key == key) return from_row(r, std::string(name));
  }
  throw LoadError("preset", "unknown preset '" + std::string(name) + "'");
}

// ---- TOML reading -------------------------------------------------------------------

namespace {

std::string join(const std::string& path, std::string_view key) {
  return path.empty() ? std::string(key) : path + "." + std::string(key);
}

std::string index_path(const std::string& path, std::size_t i) {
  return path + "[" + std::to_string(i) + "]";
}

void check_keys(const toml::table& t, const std::string& path,
                std::initializer_list<std::string_view> allowed) {
  for (const auto& [k, v] : t) {
    (void)v;
    if (std::find(allowed.begin(), allowed.end(), k.str()) == allowed.end()) {
      throw LoadError(join(path, k.str()), "unknown key");
    }
  }
}

const toml::table* sub_table(const toml::table& t, std::string_view key, const std::string& path) {
  const toml::node* n = t.get(key);
  if (!n) return nullptr;
  if (!n->is_table()) throw LoadError(join(path, key), "expected a table");
  return n->as_table();
}

double quantity_node(const toml::node& n, Dimension dim, const std::string& field) {
  if (const auto* s = n.as_string()) return parse_quantity(s->get(), dim, field);
  if (n.is_number()) {
    throw LoadError(field, std::string("missing unit (write the ") + dimension_name(dim) +
                               " as a string such as \"1 " +
                               (dim == Dimension::length ? "mm" : si_symbol(dim)) + "\")");
  }
  throw LoadError(field, "expected a quantity string");
}

std::optional<double> quantity(const toml::table& t, std::string_view key, Dimension dim,
                               const std::string& path) {
  const toml::node* n = t.get(key);
  if (!n) return std::nullopt;
  return quantity_node(*n, dim, join(path, key));
}

std::optional<double> number(const toml::table& t, std::string_view key, const std::string& path) {
  const toml::node* n = t.get(key);
  if (!n) return std::nullopt;
  if (auto v = n->value<double>(); v && n->is_number()) return *v;
  throw LoadError(join(path, key), "expected a plain number");
}

std::optional<std::int64_t> integer(const toml::table& t, std::string_view key,
                                    const std::string& path) {
  const toml::node* n = t.get(key);
  if (!n) return std::nullopt;
  if (const auto* i = n->as_integer()) return i->get();
  throw LoadError(join(path, key), "expected an integer");
}

std::optional<std::string> text(const toml::table& t, std::string_view key, const std::string& path) {
  const toml::node* n = t.get(key);
  if (!n) return std::nullopt;
  if (const auto* s = n->as_string()) return s->get();
  throw LoadError(join(path, key), "expected a string");
}

Eigen::Vector2d point(const toml::node& n, const std::string& field) {
  const toml::array* a = n.as_array();
  if (!a || a->size() != 2) throw LoadError(field, "expected a two-element array of lengths");
  return {quantity_node(*a->get(0), Dimension::length, field + "[0]"),
          quantity_node(*a->get(1), Dimension::length, field + "[1]")};
}

tissue::OgdenLayer read_layer(const toml::table& t, const std::string& path, std::size_t index) {
  check_keys(t, path, {"id", "mu", "alpha", "gamma", "thickness", "entry_x", "entry"});
  tissue::OgdenLayer l;
  l.id = text(t, "id", path).value_or("layer" + std::to_string(index + 1));
  const auto mu = quantity(t, "mu", Dimension::pressure, path);
  if (!mu) throw LoadError(join(path, "mu"), "required");
  l.mu = *mu;
  l.alpha = number(t, "alpha", path).value_or(1.0);
  l.gamma = number(t, "gamma", path).value_or(0.0);
  l.thickness = quantity(t, "thickness", Dimension::length, path).value_or(0.040);
  const toml::node* entry = t.get("entry");
  const auto entry_x = quantity(t, "entry_x", Dimension::length, path);
  if (entry && entry_x) throw LoadError(path, "give either entry or entry_x, not both");
  if (entry) {
    const toml::array* a = entry->as_array();
    if (!a || a->size() != 2) throw LoadError(join(path, "entry"), "expected two points");
    l.entry = {point(*a->get(0), join(path, "entry") + "[0]"),
               point(*a->get(1), join(path, "entry") + "[1]")};
  } else if (entry_x) {
    l.entry = tissue::Boundary::vertical(*entry_x, kBoundaryHalfSpan);
  } else {
    throw LoadError(join(path, "entry_x"), "required (or give entry)");
  }
  if (!(l.mu > 0.0)) throw LoadError(join(path, "mu"), "must be positive");
  if (!(l.gamma >= 0.0 && l.gamma < 1.0)) throw LoadError(join(path, "gamma"), "must lie in [0, 1)");
  if (!(l.thickness > 0.0)) throw LoadError(join(path, "thickness"), "must be positive");
  return l;
}

sim::VInput optional_pair(const toml::table& t, const std::string& path, sim::VTarget target,
                          std::string_view first, Dimension first_dim, std::string_view second,
                          Dimension second_dim) {
  sim::VInput v;
  v.target = target;
  v.deflection = quantity(t, first, first_dim, path);
  v.slope = quantity(t, second, second_dim, path);
  return v;
}

ScriptStep read_step(const toml::table& t, const std::string& path, std::int64_t* repeat) {
  check_keys(t, path, {"advance", "retract", "base", "template", "nodes", "repeat"});
  ScriptStep step;
  if (const toml::table* base = sub_table(t, "base", path)) {
    const std::string bp = join(path, "base");
    check_keys(*base, bp, {"deflection", "slope"});
    sim::VInput v = optional_pair(*base, bp, sim::BaseTarget{}, "deflection", Dimension::length,
                                  "slope", Dimension::angle);
    if (!v.deflection && !v.slope) throw LoadError(bp, "needs deflection and/or slope");
    step.emplace_back(v);
  }
  if (const toml::node* tmpl = t.get("template")) {
    const std::string tp = join(path, "template");
    if (const auto* s = tmpl->as_string()) {
      if (s->get() != "release") throw LoadError(tp, "expected a table or \"release\"");
      step.emplace_back(sim::VInput{sim::TemplateTarget{}, std::nullopt, std::nullopt});
    } else if (const auto* tt = tmpl->as_table()) {
      check_keys(*tt, tp, {"x", "y"});
      const auto x = quantity(*tt, "x", Dimension::length, tp);
      const auto y = quantity(*tt, "y", Dimension::length, tp);
      if (!x || !y) throw LoadError(tp, "needs x and y");
      step.emplace_back(sim::VInput{sim::TemplateTarget{*x}, *y, std::nullopt});
    } else {
      throw LoadError(tp, "expected a table or \"release\"");
    }
  }
  if (const toml::node* nodes = t.get("nodes")) {
    const std::string np = join(path, "nodes");
    const toml::array* a = nodes->as_array();
    if (!a) throw LoadError(np, "expected an array of tables");
    for (std::size_t i = 0; i < a->size(); ++i) {
      const std::string ip = index_path(np, i);
      const toml::table* nt = a->get(i)->as_table();
      if (!nt) throw LoadError(ip, "expected a table");
      check_keys(*nt, ip, {"index", "deflection", "slope"});
      const auto index = integer(*nt, "index", ip);
      if (!index || *index < 0) throw LoadError(join(ip, "index"), "required non-negative integer");
      step.emplace_back(optional_pair(*nt, ip, sim::NodeTarget{static_cast<std::size_t>(*index)},
                                      "deflection", Dimension::length, "slope", Dimension::angle));
    }
  }
  const auto adv = quantity(t, "advance", Dimension::length, path);
  const auto ret = quantity(t, "retract", Dimension::length, path);
  if (adv && ret) throw LoadError(path, "give either advance or retract, not both");
  if (adv) step.emplace_back(sim::HInput{*adv});
  if (ret) step.emplace_back(sim::HInput{-*ret});
  if (step.empty()) throw LoadError(path, "empty script step");

  *repeat = integer(t, "repeat", path).value_or(1);
  if (*repeat < 1) throw LoadError(join(path, "repeat"), "must be at least 1");
  return step;
}

Script read_script(const toml::table& root) {
  Script script;
  const toml::node* n = root.get("script");
  if (!n) return script;
  const toml::array* a = n->as_array();
  if (!a) throw LoadError("script", "expected an array of tables ([[script]])");
  for (std::size_t i = 0; i < a->size(); ++i) {
    const std::string path = index_path("script", i);
    const toml::table* t = a->get(i)->as_table();
    if (!t) throw LoadError(path, "expected a table");
    std::int64_t repeat = 1;
    const ScriptStep step = read_step(*t, path, &repeat);
    for (std::int64_t r = 0; r < repeat; ++r) script.push_back(step);
  }
  return script;
}

toml::table parse_toml(std::string_view text, const std::string& source) {
  try {
    return toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.description() << " (line " << e.source().begin.line << ")";
    throw LoadError(source, msg.str());
  }
}

Scenario build_scenario(const toml::table& root, const std::string& source) {
  check_keys(root, "", {"name", "preset", "needle", "solver", "pose", "layers", "script"});

  std::optional<Scenario> base;
  if (const auto p = text(root, "preset", "")) base = preset(*p);

  sim::NeedleSpec needle = base ? base->model.needle : sim::NeedleSpec{};
  sim::BevelSpec bevel = base ? base->model.bevel : sim::BevelSpec{};
  sim::SolverSettings solver = base ? base->model.solver : sim::SolverSettings{};

  if (const toml::table* t = sub_table(root, "needle", "")) {
    check_keys(*t, "needle", {"youngs_modulus", "outer_diameter", "inner_diameter", "length",
                              "element_size", "bevel"});
    needle.youngs_modulus =
        quantity(*t, "youngs_modulus", Dimension::pressure, "needle").value_or(needle.youngs_modulus);
    needle.outer_diameter =
        quantity(*t, "outer_diameter", Dimension::length, "needle").value_or(needle.outer_diameter);
    needle.inner_diameter =
        quantity(*t, "inner_diameter", Dimension::length, "needle").value_or(needle.inner_diameter);
    needle.length = quantity(*t, "length", Dimension::length, "needle").value_or(needle.length);
    needle.element_length =
        quantity(*t, "element_size", Dimension::length, "needle").value_or(needle.element_length);
    if (const toml::table* b = sub_table(*t, "bevel", "needle")) {
      check_keys(*b, "needle.bevel", {"offset", "direction"});
      bevel.offset = quantity(*b, "offset", Dimension::length, "needle.bevel").value_or(bevel.offset);
      bevel.direction =
          static_cast<int>(integer(*b, "direction", "needle.bevel").value_or(bevel.direction));
    }
  }
  if (!(needle.element_length > 0.0)) throw LoadError("needle.element_size", "must be positive");
  if (!(needle.length > 0.0)) throw LoadError("needle.length", "must be positive");
  try {
    needle.validate();
  } catch (const InvalidProperty& e) {
    throw LoadError("needle", e.what());
  }
  if (!(bevel.offset >= 0.0)) throw LoadError("needle.bevel.offset", "must be non-negative");
  if (bevel.direction != 1 && bevel.direction != -1) {
    throw LoadError("needle.bevel.direction", "must be 1 or -1");
  }

  if (const toml::table* t = sub_table(root, "solver", "")) {
    check_keys(*t, "solver", {"relaxation", "tolerance", "max_iterations", "force_mode",
                              "constraint_spacing"});
    solver.relaxation = number(*t, "relaxation", "solver").value_or(solver.relaxation);
    solver.tolerance = quantity(*t, "tolerance", Dimension::length, "solver").value_or(solver.tolerance);
    solver.max_iterations =
        static_cast<int>(integer(*t, "max_iterations", "solver").value_or(solver.max_iterations));
    solver.constraint_spacing = quantity(*t, "constraint_spacing", Dimension::length, "solver")
                                    .value_or(solver.constraint_spacing);
    if (const auto mode = text(*t, "force_mode", "solver")) {
      if (*mode == "approximate") {
        solver.force_mode = tissue::ForceMode::approximate;
      } else if (*mode == "full") {
        solver.force_mode = tissue::ForceMode::full;
      } else {
        throw LoadError("solver.force_mode", "expected \"approximate\" or \"full\"");
      }
    }
  }

  sim::Pose2 pose = base ? base->model.initial_pose : default_pose(needle);
  if (const toml::table* t = sub_table(root, "pose", "")) {
    check_keys(*t, "pose", {"base", "angle"});
    if (const toml::node* b = t->get("base")) pose.position = point(*b, "pose.base");
    pose.angle = quantity(*t, "angle", Dimension::angle, "pose").value_or(pose.angle);
  }

  std::vector<tissue::OgdenLayer> layers;
  if (const toml::node* n = root.get("layers")) {
    const toml::array* a = n->as_array();
    if (!a || a->empty()) throw LoadError("layers", "expected a non-empty array of tables ([[layers]])");
    for (std::size_t i = 0; i < a->size(); ++i) {
      const toml::table* t = a->get(i)->as_table();
      if (!t) throw LoadError(index_path("layers", i), "expected a table");
      layers.push_back(read_layer(*t, index_path("layers", i), i));
    }
  } else if (base) {
    layers = base->model.domain.layers();
  } else {
    throw LoadError("layers", "required unless a preset is given");
  }

  std::optional<tissue::TissueDomain> domain;
  try {
    domain.emplace(std::move(layers));
  } catch (const InvalidProperty& e) {
    throw LoadError("layers", e.what());
  }

  sim::Model model{needle, std::move(*domain), bevel, solver, pose};
  try {
    sim::validate(model);
  } catch (const InvalidProperty& e) {
    throw LoadError("solver", e.what());
  }

  std::string name = text(root, "name", "").value_or(base ? base->name : source);
  return Scenario{std::move(name), std::move(model), read_script(root)};
}

std::string read_file(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string(), std::string("cannot open ") + what);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Scenario parse_scenario(std::string_view toml_text, const std::string& source) {
  return build_scenario(parse_toml(toml_text, source), source);
}

Scenario load_scenario(const std::filesystem::path& path) {
  Scenario s = parse_scenario(read_file(path, "scenario file"), path.string());
  if (s.name == path.string()) s.name = path.stem().string();
  return s;
}

Script load_script(const std::filesystem::path& path) {
  const toml::table root = parse_toml(read_file(path, "script file"), path.string());
  check_keys(root, "", {"script"});
  return read_script(root);
}

// ---- TOML writing -------------------------------------------------------------------

namespace {

toml::array point_array(const Eigen::Vector2d& p) {
  return toml::array{format_quantity(p.x(), Dimension::length),
                     format_quantity(p.y(), Dimension::length)};
}

toml::table step_table(const ScriptStep& step) {
  toml::table t;
  toml::array nodes;
  bool has_base = false, has_template = false, has_h = false;
  for (const sim::ControlInput& in : step) {
    if (const auto* h = std::get_if<sim::HInput>(&in)) {
      if (has_h) throw Error("script step with two H-inputs cannot be written");
      has_h = true;
      t.insert("advance", format_quantity(h->advance, Dimension::length));
      continue;
    }
    const auto& v = std::get<sim::VInput>(in);
    toml::table vt;
    if (std::holds_alternative<sim::BaseTarget>(v.target)) {
      if (has_base) throw Error("script step with two base inputs cannot be written");
      has_base = true;
      if (v.deflection) vt.insert("deflection", format_quantity(*v.deflection, Dimension::length));
      if (v.slope) vt.insert("slope", format_quantity(*v.slope, Dimension::angle));
      t.insert("base", std::move(vt));
    } else if (const auto* tt = std::get_if<sim::TemplateTarget>(&v.target)) {
      if (has_template) throw Error("script step with two template inputs cannot be written");
      has_template = true;
      if (!v.deflection && !v.slope) {
        t.insert("template", "release");
      } else {
        vt.insert("x", format_quantity(tt->abscissa, Dimension::length));
        vt.insert("y", format_quantity(v.deflection.value_or(0.0), Dimension::length));
        t.insert("template", std::move(vt));
      }
    } else {
      vt.insert("index", static_cast<std::int64_t>(std::get<sim::NodeTarget>(v.target).index));
      if (v.deflection) vt.insert("deflection", format_quantity(*v.deflection, Dimension::length));
      if (v.slope) vt.insert("slope", format_quantity(*v.slope, Dimension::angle));
      nodes.push_back(std::move(vt));
    }
  }
  if (!nodes.empty()) t.insert("nodes", std::move(nodes));
  return t;
}

}  // namespace

std::string dump_scenario(const Scenario& scenario) {
  const sim::Model& m = scenario.model;
  toml::table root;
  root.insert("name", scenario.name);

  toml::table needle{{"youngs_modulus", format_quantity(m.needle.youngs_modulus, Dimension::pressure)},
                     {"outer_diameter", format_quantity(m.needle.outer_diameter, Dimension::length)},
                     {"inner_diameter", format_quantity(m.needle.inner_diameter, Dimension::length)},
                     {"length", format_quantity(m.needle.length, Dimension::length)},
                     {"element_size", format_quantity(m.needle.element_length, Dimension::length)}};
  needle.insert("bevel", toml::table{{"offset", format_quantity(m.bevel.offset, Dimension::length)},
                                     {"direction", m.bevel.direction}});
  root.insert("needle", std::move(needle));

  root.insert("solver",
              toml::table{{"relaxation", m.solver.relaxation},
                          {"tolerance", format_quantity(m.solver.tolerance, Dimension::length)},
                          {"max_iterations", m.solver.max_iterations},
                          {"force_mode", m.solver.force_mode == tissue::ForceMode::full ? "full"
                                                                                       : "approximate"},
                          {"constraint_spacing",
                           format_quantity(m.solver.constraint_spacing, Dimension::length)}});

  root.insert("pose", toml::table{{"base", point_array(m.initial_pose.position)},
                                  {"angle", format_quantity(m.initial_pose.angle, Dimension::angle)}});

  toml::array layers;
  for (const tissue::OgdenLayer& l : m.domain.layers()) {
    layers.push_back(toml::table{
        {"id", l.id},
        {"mu", format_quantity(l.mu, Dimension::pressure)},
        {"alpha", l.alpha},
        {"gamma", l.gamma},
        {"thickness", format_quantity(l.thickness, Dimension::length)},
        {"entry", toml::array{point_array(l.entry.from), point_array(l.entry.to)}}});
  }
  root.insert("layers", std::move(layers));

  toml::array script;
  for (std::size_t i = 0; i < scenario.script.size();) {
    std::size_t j = i + 1;
    while (j < scenario.script.size() && scenario.script[j] == scenario.script[i]) ++j;
    toml::table t = step_table(scenario.script[i]);
    if (j - i > 1) t.insert("repeat", static_cast<std::int64_t>(j - i));
    script.push_back(std::move(t));
    i = j;
  }
  if (!script.empty()) root.insert("script", std::move(script));

  std::ostringstream out;
  out << toml::toml_formatter(root, toml::toml_formatter::default_flags &
                                        ~toml::format_flags::allow_literal_strings)
      << "\n";
  return out.str();
}

void save_scenario(const Scenario& scenario, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << dump_scenario(scenario);
  if (!out) throw Error("write failed: " + path.string());
}

// ---- ground truth -------------------------------------------------------------------

double GroundTruth::length() const {
  double s = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) s += (points[i] - points[i - 1]).norm();
  return s;
}

void validate_polyline(const std::vector<Eigen::Vector2d>& points, const std::string& source) {
  if (points.size() < 2) {
    throw IngestionError(source + ": need at least 2 points, got " + std::to_string(points.size()));
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite()) {
      throw IngestionError(source + ": point " + std::to_string(i) + " is not finite");
    }
    if (i > 0 && !((points[i] - points[i - 1]).norm() > 0.0)) {
      throw IngestionError(source + ": zero-length segment before point " + std::to_string(i));
    }
  }
}

GroundTruth parse_ground_truth(std::string_view csv, const std::string& source) {
  std::istringstream in{std::string(csv)};
  std::string line;
  std::size_t line_no = 0;
  std::optional<double> scale;
  GroundTruth gt{{}, source};
  bool header_seen = false;

  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view l = trim(line);
    if (l.empty() || l.front() == '#') continue;
    const std::string where = source + ":" + std::to_string(line_no);
    if (!scale) {
      if (l == "unit=mm") {
        scale = 1e-3;
      } else if (l == "unit=m") {
        scale = 1.0;
      } else {
        throw IngestionError(where + ": first line must be unit=mm or unit=m");
      }
      continue;
    }
    if (!header_seen && gt.points.empty() && l == "x,y") {
      header_seen = true;
      continue;
    }
    const auto comma = l.find(',');
    if (comma == std::string_view::npos) throw IngestionError(where + ": expected x,y");
    const auto parse = [&](std::string_view s) {
      s = trim(s);
      double v = 0.0;
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        throw IngestionError(where + ": cannot parse '" + std::string(s) + "'");
      }
      return v;
    };
    gt.points.emplace_back(parse(l.substr(0, comma)) * *scale, parse(l.substr(comma + 1)) * *scale);
  }
  if (!scale) throw IngestionError(source + ": missing unit= header line");
  validate_polyline(gt.points, source);
  return gt;
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_ground_truth(ss.str(), path.string());
}

// ---- traces --------------------------------------------------------------------------

namespace {

json vec(const Eigen::Vector2d& p) { return json::array({p.x(), p.y()}); }

Eigen::Vector2d vec(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

json input_json(const sim::ControlInput& in) {
  if (const auto* h = std::get_if<sim::HInput>(&in)) return json{{"h", h->advance}};
  const auto& v = std::get<sim::VInput>(in);
  json j;
  if (std::holds_alternative<sim::BaseTarget>(v.target)) {
    j["target"] = "base";
  } else if (const auto* t = std::get_if<sim::TemplateTarget>(&v.target)) {
    j["target"] = "template";
    j["abscissa"] = t->abscissa;
  } else {
    j["target"] = "node";
    j["index"] = std::get<sim::NodeTarget>(v.target).index;
  }
  if (v.deflection) j["deflection"] = *v.deflection;
  if (v.slope) j["slope"] = *v.slope;
  return j;
}

sim::ControlInput input_from(const json& j) {
  if (j.contains("h")) return sim::HInput{j.at("h").get<double>()};
  sim::VInput v;
  const std::string target = j.at("target").get<std::string>();
  if (target == "base") {
    v.target = sim::BaseTarget{};
  } else if (target == "template") {
    v.target = sim::TemplateTarget{j.at("abscissa").get<double>()};
  } else if (target == "node") {
    v.target = sim::NodeTarget{j.at("index").get<std::size_t>()};
  } else {
    throw LoadError("inputs", "unknown target '" + target + "'");
  }
  if (j.contains("deflection")) v.deflection = j.at("deflection").get<double>();
  if (j.contains("slope")) v.slope = j.at("slope").get<double>();
  return v;
}

}  // namespace

TraceStep record_step(const sim::SimState& state, const ScriptStep& inputs) {
  TraceStep t;
  t.step = state.step;
  t.in_contact = state.in_contact();
  t.depth = state.depth;
  t.polyline = state.polyline;
  t.constraints = state.constraints;
  for (const sim::ConstraintPoint& c : state.constraints) {
    t.constraints_world.push_back(sim::constraint_world(state, c));
  }
  t.report = state.report;
  t.inputs = inputs;
  return t;
}

std::string trace_line(const TraceStep& s) {
  json j;
  j["step"] = s.step;
  j["in_contact"] = s.in_contact;
  j["depth"] = s.depth;
  json poly = json::array();
  for (const auto& p : s.polyline) poly.push_back(vec(p));
  j["polyline"] = std::move(poly);
  json cons = json::array();
  for (const auto& c : s.constraints) {
    cons.push_back(json{{"station", c.station},
                        {"ordinate", c.ordinate},
                        {"layer", c.layer},
                        {"creation_depth", c.creation_depth}});
  }
  j["constraints"] = std::move(cons);
  json cw = json::array();
  for (const auto& p : s.constraints_world) cw.push_back(vec(p));
  j["constraints_world"] = std::move(cw);
  j["report"] = json{{"iterations", s.report.iterations},
                     {"residual", s.report.residual},
                     {"clamp_count", s.report.clamp_count},
                     {"converged", s.report.converged}};
  json in = json::array();
  for (const auto& i : s.inputs) in.push_back(input_json(i));
  j["inputs"] = std::move(in);
  return j.dump();
}

TraceStep parse_trace_line(std::string_view line) {
  try {
    const json j = json::parse(line);
    TraceStep s;
    s.step = j.at("step").get<std::uint64_t>();
    s.in_contact = j.at("in_contact").get<bool>();
    s.depth = j.at("depth").get<double>();
    for (const auto& p : j.at("polyline")) s.polyline.push_back(vec(p));
    for (const auto& c : j.at("constraints")) {
      s.constraints.push_back(sim::ConstraintPoint{
          c.at("station").get<double>(), c.at("ordinate").get<double>(),
          c.at("layer").get<std::size_t>(), c.at("creation_depth").get<double>()});
    }
    for (const auto& p : j.at("constraints_world")) s.constraints_world.push_back(vec(p));
    const json& r = j.at("report");
    s.report = sim::ConvergenceReport{r.at("iterations").get<int>(), r.at("residual").get<double>(),
                                      r.at("clamp_count").get<int>(), r.at("converged").get<bool>()};
    for (const auto& i : j.at("inputs")) s.inputs.push_back(input_from(i));
    return s;
  } catch (const json::exception& e) {
    throw LoadError("trace", e.what());
  }
}

void write_trace(const SimTrace& trace, std::ostream& out) {
  for (const TraceStep& s : trace) out << trace_line(s) << '\n';
}

SimTrace read_trace(std::istream& in) {
  SimTrace trace;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    trace.push_back(parse_trace_line(line));
  }
  return trace;
}

void save_trace(const SimTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_trace(trace, out);
  out.flush();
  if (!out) throw Error("write failed: " + path.string());
}

SimTrace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string(), "cannot open trace");
  return read_trace(in);
}

SimTrace run_script(const sim::Model& model, const Script& script) {
  sim::SimState state = sim::initial_state(model);
  SimTrace trace;
  trace.reserve(script.size());
  for (const ScriptStep& step : script) {
    sim::step(state, step, model);
    trace.push_back(record_step(state, step));
  }
  return trace;
}

}  // namespace needle::io
