#include "manifest.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include <toml.hpp>

#include "needle/error.hpp"

namespace needle::cli {

namespace {

void check_keys(const toml::table& t, const std::string& path, std::initializer_list<std::string_view> allowed) {
  for (const auto& [k, v] : t) {
    (void)v;
    if (std::find(allowed.begin(), allowed.end(), k.str()) == allowed.end()) {
      throw LoadError(path.empty() ? std::string(k.str()) : path + "." + std::string(k.str()), "unknown key");
    }
  }
}

std::optional<std::string> text(const toml::table& t, std::string_view key, const std::string& field) {
  const toml::node* n = t.get(key);
  if (!n) return std::nullopt;
  if (const auto* s = n->as_string()) return s->get();
  throw LoadError(field, "expected a string");
}

double quantity(const toml::node& n, io::Dimension dim, const std::string& field) {
  if (const auto* s = n.as_string()) return io::parse_quantity(s->get(), dim, field);
  throw LoadError(field, "expected a quantity string with a unit");
}

double plain(const toml::node& n, const std::string& field) {
  if (auto v = n.value<double>(); v && n.is_number()) return *v;
  throw LoadError(field, "expected a plain number");
}

/// [low, high] pair of quantities (or plain numbers when `dim` is empty).
std::pair<double, double> range(const toml::table& t, std::string_view key, std::optional<io::Dimension> dim,
                                std::pair<double, double> fallback) {
  const std::string field = "bounds." + std::string(key);
  const toml::node* n = t.get(key);
  if (!n) return fallback;
  const toml::array* a = n->as_array();
  if (!a || a->size() != 2) throw LoadError(field, "expected [low, high]");
  const auto read = [&](std::size_t i) {
    const std::string f = field + "[" + std::to_string(i) + "]";
    return dim ? quantity(*a->get(i), *dim, f) : plain(*a->get(i), f);
  };
  return {read(0), read(1)};
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string(), "cannot open manifest");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<metrics::FitCase> Manifest::fit_cases() const {
  std::vector<metrics::FitCase> out;
  for (const ManifestCase& c : cases) out.push_back({c.scenario.model, c.scenario.script, c.truth.points});
  return out;
}

metrics::FitParameters Manifest::seed_or_default() const {
  if (seed) return *seed;
  if (cases.empty()) throw PreconditionError("manifest lists no cases");
  metrics::FitParameters p;
  const sim::Model& m = cases.front().scenario.model;
  for (const tissue::OgdenLayer& l : m.domain.layers()) p.layers.push_back({l.mu, l.alpha});
  p.bevel = m.bevel.offset;
  return p;
}

Manifest parse_manifest(std::string_view toml_text, const std::filesystem::path& base_dir, const std::string& source) {
  toml::table root;
  try {
    root = toml::parse(toml_text, source);
  } catch (const toml::parse_error& e) {
    throw LoadError(source, std::string(e.description()) + " (line " + std::to_string(e.source().begin.line) + ")");
  }
  check_keys(root, "", {"cases", "seed", "bounds", "options"});

  Manifest m;
  const auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };

  if (const toml::node* n = root.get("cases")) {
    const toml::array* cases = n->as_array();
    if (!cases) throw LoadError("cases", "expected an array of tables ([[cases]])");
    for (std::size_t i = 0; i < cases->size(); ++i) {
      const std::string path = "cases[" + std::to_string(i) + "]";
      const toml::table* t = cases->get(i)->as_table();
      if (!t) throw LoadError(path, "expected a table");
      check_keys(*t, path, {"label", "scenario", "preset", "script", "ground_truth"});

      const auto scenario_file = text(*t, "scenario", path + ".scenario");
      const auto preset_name = text(*t, "preset", path + ".preset");
      if (scenario_file.has_value() == preset_name.has_value()) {
        throw LoadError(path, "give exactly one of scenario or preset");
      }
      io::Scenario scenario = scenario_file ? io::load_scenario(resolve(*scenario_file)) : io::preset(*preset_name);
      if (const auto script = text(*t, "script", path + ".script")) {
        if (!scenario.script.empty()) throw LoadError(path + ".script", "scenario already embeds a script");
        scenario.script = io::load_script(resolve(*script));
      }
      const auto truth = text(*t, "ground_truth", path + ".ground_truth");
      if (!truth) throw LoadError(path + ".ground_truth", "required");
      ManifestCase c{text(*t, "label", path + ".label").value_or(std::filesystem::path(*truth).stem().string()),
                     std::move(scenario), io::load_ground_truth(resolve(*truth))};
      m.cases.push_back(std::move(c));
    }
  }
  if (m.cases.empty()) throw LoadError("cases", "manifest lists no cases");

  if (const toml::node* n = root.get("seed")) {
    const toml::table* t = n->as_table();
    if (!t) throw LoadError("seed", "expected a table");
    check_keys(*t, "seed", {"layers", "bevel"});
    metrics::FitParameters p = m.seed_or_default();
    if (const toml::node* b = t->get("bevel")) p.bevel = quantity(*b, io::Dimension::length, "seed.bevel");
    if (const toml::node* l = t->get("layers")) {
      const toml::array* layers = l->as_array();
      if (!layers) throw LoadError("seed.layers", "expected an array of tables");
      p.layers.clear();
      for (std::size_t i = 0; i < layers->size(); ++i) {
        const std::string path = "seed.layers[" + std::to_string(i) + "]";
        const toml::table* lt = layers->get(i)->as_table();
        if (!lt) throw LoadError(path, "expected a table");
        check_keys(*lt, path, {"mu", "alpha"});
        const toml::node* mu = lt->get("mu");
        const toml::node* alpha = lt->get("alpha");
        if (!mu || !alpha) throw LoadError(path, "needs mu and alpha");
        p.layers.push_back({quantity(*mu, io::Dimension::pressure, path + ".mu"), plain(*alpha, path + ".alpha")});
      }
    }
    m.seed = p;
  }

  if (const toml::node* n = root.get("bounds")) {
    const toml::table* t = n->as_table();
    if (!t) throw LoadError("bounds", "expected a table");
    check_keys(*t, "bounds", {"mu", "alpha", "bevel"});
    metrics::FitBounds& b = m.bounds;
    std::tie(b.mu_min, b.mu_max) = range(*t, "mu", io::Dimension::pressure, {b.mu_min, b.mu_max});
    std::tie(b.alpha_min, b.alpha_max) = range(*t, "alpha", std::nullopt, {b.alpha_min, b.alpha_max});
    std::tie(b.bevel_min, b.bevel_max) = range(*t, "bevel", io::Dimension::length, {b.bevel_min, b.bevel_max});
  }

  if (const toml::node* n = root.get("options")) {
    const toml::table* t = n->as_table();
    if (!t) throw LoadError("options", "expected a table");
    check_keys(*t, "options", {"restarts", "max_evaluations", "f_tolerance", "x_tolerance"});
    const auto integer = [&](std::string_view key, int& target) {
      if (const toml::node* v = t->get(key)) {
        const auto* i = v->as_integer();
        if (!i || i->get() < 1) throw LoadError("options." + std::string(key), "expected a positive integer");
        target = static_cast<int>(i->get());
      }
    };
    integer("restarts", m.options.restarts);
    integer("max_evaluations", m.options.max_evaluations);
    if (const toml::node* v = t->get("f_tolerance")) {
      m.options.f_tolerance = quantity(*v, io::Dimension::length, "options.f_tolerance");
    }
    if (const toml::node* v = t->get("x_tolerance")) m.options.x_tolerance = plain(*v, "options.x_tolerance");
  }
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file(path), path.parent_path(), path.string());
}

}  // namespace needle::cli
