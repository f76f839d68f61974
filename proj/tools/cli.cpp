#include "cli.hpp"

#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "manifest.hpp"
#include "needle/error.hpp"
#include "needle/metrics_tuning.hpp"
#include "plot.hpp"

namespace needle::cli {

namespace fs = std::filesystem;

io::Scenario open_scenario(const std::string& ref) {
  std::error_code ec;
  if (fs::is_regular_file(ref, ec)) return io::load_scenario(ref);
  if (ref.ends_with(".toml")) throw LoadError(ref, "cannot open scenario file");
  return io::preset(ref);
}

namespace {

struct RunOptions {
  std::string scenario;
  std::optional<std::string> script;
  std::optional<std::string> out;
  std::optional<std::string> plot;
  std::optional<std::string> shape;
};

struct EvalOptions {
  std::optional<std::string> scenario;
  std::optional<std::string> script;
  std::optional<std::string> trace;
  std::optional<std::string> gt;
  std::optional<std::string> manifest;
  std::optional<std::string> out;
  std::optional<std::string> label;
  std::optional<std::size_t> points;
};

struct TuneOptions {
  std::string manifest;
  std::string out;
  bool quiet = false;
};

struct ServeOptions {
  std::optional<std::string> bind;
  std::string trace_dir = "traces";
  int heartbeat_ms = 5000;
};

std::string shortest(double v) {
  std::array<char, 32> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << content;
  if (!f) throw Error("write failed: " + path);
}

/// Scenario with exactly one script source resolved.
io::Scenario scenario_with_script(const std::string& ref, const std::optional<std::string>& script) {
  io::Scenario s = open_scenario(ref);
  if (script) {
    if (!s.script.empty()) {
      throw LoadError("script", "the scenario already embeds a script; give exactly one script source");
    }
    s.script = io::load_script(*script);
  }
  return s;
}

int do_run(const RunOptions& o, std::ostream& out, std::ostream& err) {
  const io::Scenario s = scenario_with_script(o.scenario, o.script);

  sim::SimState state = sim::initial_state(s.model);
  io::SimTrace trace;
  std::size_t non_converged = 0;
  std::optional<std::string> failure;
  for (std::size_t i = 0; i < s.script.size(); ++i) {
    try {
      sim::step(state, s.script[i], s.model);
    } catch (const Error& e) {
      failure = "step " + std::to_string(i + 1) + ": " + e.what();
      break;
    }
    if (!state.report.converged) {
      ++non_converged;
      err << "warning: step " << state.step << " did not converge (residual " << state.report.residual * 1e3
          << " mm after " << state.report.iterations << " iterations)\n";
    }
    trace.push_back(io::record_step(state, s.script[i]));
  }

  if (o.out) {
    io::save_trace(trace, *o.out);
  } else {
    io::write_trace(trace, out);
  }
  if (o.plot) write_file(*o.plot, render_svg(state, s.model));
  if (o.shape && !failure) {
    std::ostringstream csv;
    csv << "unit=m\nx,y\n";
    for (const Eigen::Vector2d& p : metrics::inserted_part(state.polyline, s.model.domain)) {
      csv << shortest(p.x()) << ',' << shortest(p.y()) << '\n';
    }
    write_file(*o.shape, csv.str());
  }

  if (failure) {
    err << "error: " << *failure << "\n";
    return kFailure;
  }
  if (non_converged > 0) {
    err << non_converged << " of " << trace.size() << " steps did not converge\n";
    return kNotConverged;
  }
  return kOk;
}

void emit_report(const std::vector<std::pair<std::string, metrics::Summary>>& rows,
                 const std::optional<std::string>& path, std::ostream& out) {
  if (!path) {
    metrics::write_report_csv(out, rows);
    return;
  }
  std::ostringstream csv;
  metrics::write_report_csv(csv, rows);
  write_file(*path, csv.str());
}

int do_eval(const EvalOptions& o, std::ostream& out) {
  if (o.manifest) {
    if (o.scenario || o.gt || o.trace || o.script) {
      throw LoadError("manifest", "--manifest cannot be combined with --scenario, --script, --trace or --gt");
    }
    const Manifest m = load_manifest(*o.manifest);
    std::vector<std::pair<std::string, metrics::Summary>> rows;
    std::vector<metrics::ErrorReport> all;
    for (const ManifestCase& c : m.cases) {
      const metrics::Polyline shape = metrics::simulate_shape(c.scenario.model, c.scenario.script);
      all.push_back(metrics::evaluate(shape, c.truth.points, o.points));
      rows.emplace_back(c.label, metrics::summarize({all.back()}));
    }
    rows.emplace_back("all", metrics::summarize(all));
    emit_report(rows, o.out, out);
    return kOk;
  }

  if (!o.scenario || !o.gt) throw LoadError("eval", "needs --scenario and --gt (or --manifest)");
  const io::GroundTruth truth = io::load_ground_truth(*o.gt);
  metrics::Polyline shape;
  if (o.trace) {
    const io::Scenario s = open_scenario(*o.scenario);
    const io::SimTrace trace = io::load_trace(*o.trace);
    if (trace.empty()) throw PreconditionError("trace " + *o.trace + " has no steps");
    shape = metrics::inserted_part(trace.back().polyline, s.model.domain);
  } else {
    const io::Scenario s = scenario_with_script(*o.scenario, o.script);
    shape = metrics::simulate_shape(s.model, s.script);
  }
  const metrics::ErrorReport r = metrics::evaluate(shape, truth.points, o.points);
  const std::string label = o.label.value_or(fs::path(*o.gt).stem().string());
  emit_report({{label, metrics::summarize({r})}}, o.out, out);
  return kOk;
}

int do_tune(const TuneOptions& o, std::ostream& out, std::ostream& err) {
  Manifest m = load_manifest(o.manifest);
  if (!o.quiet) m.options.log = [&err](const std::string& line) { err << line << "\n"; };
  const metrics::FitResult r = metrics::fit_parameters(m.fit_cases(), m.seed_or_default(), m.bounds, m.options);

  io::Scenario fitted = m.cases.front().scenario;
  fitted.model = metrics::with_parameters(fitted.model, r.parameters);
  fitted.name += "_fitted";
  std::ostringstream text;
  text << "# mean in-plane error " << shortest(r.objective * 1e3) << " mm over " << m.cases.size()
       << " case(s); " << r.evaluations << " evaluations, " << (r.converged ? "converged" : "budget exhausted")
       << "\n";
  text << io::dump_scenario(fitted);
  write_file(o.out, text.str());

  out << "objective_mm," << shortest(r.objective * 1e3) << "\n";
  for (std::size_t i = 0; i < r.parameters.layers.size(); ++i) {
    out << "layer" << i + 1 << ",mu=" << shortest(r.parameters.layers[i].mu)
        << ",alpha=" << shortest(r.parameters.layers[i].alpha) << "\n";
  }
  out << "bevel_mm," << shortest(r.parameters.bevel * 1e3) << "\n";
  return kOk;
}

int do_serve(const ServeOptions& o, std::ostream& err, const Hooks& hooks) {
  const service::BindAddress bind = o.bind ? service::parse_bind(*o.bind) : service::bind_from_env();
  service::SessionManager sessions;
  service::Server server(sessions, bind, service::ServerOptions{std::chrono::milliseconds(o.heartbeat_ms)});
  server.stop_on_signals();
  err << "listening on " << bind.host << ':' << server.port() << std::endl;
  if (hooks.on_serving) hooks.on_serving(server, sessions);
  server.run();

  const std::size_t open = sessions.ids().size();
  sessions.flush_traces(o.trace_dir);
  sessions.close_all();
  err << "shut down; wrote " << open << " trace(s) to " << o.trace_dir << std::endl;
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const Hooks& hooks) {
  CLI::App app{"Bevel-tip needle insertion simulator"};
  app.name("needle_sim");
  app.require_subcommand(1);

  RunOptions run_o;
  auto* run_cmd = app.add_subcommand("run", "Execute a scripted insertion and write its trace");
  run_cmd->add_option("--scenario", run_o.scenario, "Scenario TOML file or preset name")->required();
  run_cmd->add_option("--script", run_o.script, "Script TOML file (when the scenario has none)");
  run_cmd->add_option("--out", run_o.out, "Trace output (NDJSON); stdout when omitted");
  run_cmd->add_option("--plot", run_o.plot, "Write an SVG of the final state");
  run_cmd->add_option("--shape", run_o.shape, "Write the final inserted shape as a ground-truth CSV");

  EvalOptions eval_o;
  auto* eval_cmd = app.add_subcommand("eval", "Compare simulated and reference needle shapes");
  eval_cmd->add_option("--scenario", eval_o.scenario, "Scenario TOML file or preset name");
  eval_cmd->add_option("--script", eval_o.script, "Script TOML file for a live run");
  eval_cmd->add_option("--trace", eval_o.trace, "Use the final step of this trace instead of a live run");
  eval_cmd->add_option("--gt", eval_o.gt, "Ground-truth CSV");
  eval_cmd->add_option("--manifest", eval_o.manifest, "Evaluate every case of a dataset manifest");
  eval_cmd->add_option("--out", eval_o.out, "Report CSV; stdout when omitted");
  eval_cmd->add_option("--label", eval_o.label, "Row label (defaults to the ground-truth file name)");
  eval_cmd->add_option("--points", eval_o.points, "Correspondence points (defaults to the ground-truth count)")
      ->check(CLI::Range(2, 1000000));

  TuneOptions tune_o;
  auto* tune_cmd = app.add_subcommand("tune", "Fit tissue parameters to a dataset manifest");
  tune_cmd->add_option("--manifest", tune_o.manifest, "Dataset manifest TOML")->required();
  tune_cmd->add_option("--out", tune_o.out, "Fitted scenario TOML")->required();
  tune_cmd->add_flag("--quiet", tune_o.quiet, "No progress log");

  ServeOptions serve_o;
  auto* serve_cmd = app.add_subcommand("serve", "Run the interactive session service");
  serve_cmd->add_option("--bind", serve_o.bind, "host:port (default NEEDLE_SIM_BIND or 127.0.0.1:7070)");
  serve_cmd->add_option("--trace-dir", serve_o.trace_dir, "Where session traces are written on shutdown");
  serve_cmd->add_option("--heartbeat-ms", serve_o.heartbeat_ms, "Idle heartbeat period")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kFailure;
  }

  try {
    if (*run_cmd) return do_run(run_o, out, err);
    if (*eval_cmd) return do_eval(eval_o, out);
    if (*tune_cmd) return do_tune(tune_o, out, err);
    if (*serve_cmd) return do_serve(serve_o, err, hooks);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}

}  // namespace needle::cli
