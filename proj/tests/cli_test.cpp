#include <csignal>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <boost/asio/io_context.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>

#include "doctest.h"

#include "cli.hpp"
#include "needle/metrics_tuning.hpp"

using namespace needle;
namespace fs = std::filesystem;

namespace {

const fs::path kScenarios = NEEDLE_SCENARIOS;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args, const cli::Hooks& hooks = {}) {
  args.insert(args.begin(), "needle_sim");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err, hooks);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

/// Fresh scratch directory per test case.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("needle_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& f) const { return (dir / f).string(); }
};

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream l(line);
    std::string cell;
    while (std::getline(l, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

const char* kShortStraight = R"(
name = "short"
[needle]
length = "100 mm"
[pose]
base = ["-101 mm", "0 mm"]
[[layers]]
mu = "200 kPa"
alpha = 1
entry_x = "0 mm"
[[script]]
advance = "1 mm"
repeat = 11
)";

}  // namespace

TEST_CASE("usage and argument errors") {
  CHECK(invoke({"--help"}).code == 0);
  CHECK(invoke({}).code == cli::kFailure);
  CHECK(invoke({"fly"}).code == cli::kFailure);
  CHECK(invoke({"run"}).code == cli::kFailure);  // --scenario is required
}

TEST_CASE("run: exit codes, traces and plots") {
  Scratch tmp("run");

  SUBCASE("a scenario without a script gives an empty trace") {
    const Result r = invoke({"run", "--scenario", "ph2"});
    CHECK(r.code == cli::kOk);
    CHECK(r.out.empty());
  }
  SUBCASE("a symmetric tip stays on the axis") {
    const Result r = invoke({"run", "--scenario", (kScenarios / "straight_b0.toml").string(), "--out", tmp / "t.ndjson"});
    REQUIRE(r.code == cli::kOk);
    const io::SimTrace trace = io::load_trace(tmp / "t.ndjson");
    REQUIRE(trace.size() == 40);
    double worst = 0.0;
    for (const io::TraceStep& s : trace)
      for (const Eigen::Vector2d& p : s.polyline) worst = std::max(worst, std::abs(p.y()));
    CHECK(worst == 0.0);
  }
  SUBCASE("a starved solver exits with 2 and still writes the trace") {
    const Result r = invoke({"run", "--scenario", (kScenarios / "starved_solver.toml").string(), "--out", tmp / "t.ndjson"});
    CHECK(r.code == cli::kNotConverged);
    CHECK(r.err.find("did not converge") != std::string::npos);
    CHECK(io::load_trace(tmp / "t.ndjson").size() == 20);
  }
  SUBCASE("load errors exit with 1") {
    Result r = invoke({"run", "--scenario", tmp / "missing.toml"});
    CHECK(r.code == cli::kFailure);
    CHECK(r.err.find("missing.toml") != std::string::npos);
    r = invoke({"run", "--scenario", "no_such_preset"});
    CHECK(r.code == cli::kFailure);
    spit(tmp / "bad.toml", "[[layers]]\nmu = 5\nentry_x = \"0 mm\"\n");
    r = invoke({"run", "--scenario", tmp / "bad.toml"});
    CHECK(r.code == cli::kFailure);
    CHECK(r.err.find("layers[0].mu") != std::string::npos);
  }
  SUBCASE("exactly one script source") {
    const Result r = invoke({"run", "--scenario", (kScenarios / "ph2_insertion.toml").string(), "--script",
                          (kScenarios / "scripts" / "advance_30mm.toml").string()});
    CHECK(r.code == cli::kFailure);
    CHECK(r.err.find("exactly one script source") != std::string::npos);
    CHECK(invoke({"run", "--scenario", "ph1", "--script", (kScenarios / "scripts" / "advance_30mm.toml").string(),
               "--out", tmp / "t.ndjson"})
              .code == cli::kOk);
  }
  SUBCASE("two runs give byte-identical traces") {
    const std::string scenario = (kScenarios / "steering.toml").string();
    REQUIRE(invoke({"run", "--scenario", scenario, "--out", tmp / "a.ndjson"}).code == cli::kOk);
    REQUIRE(invoke({"run", "--scenario", scenario, "--out", tmp / "b.ndjson"}).code == cli::kOk);
    CHECK(slurp(tmp / "a.ndjson") == slurp(tmp / "b.ndjson"));
    CHECK(slurp(tmp / "a.ndjson").size() > 1000);
  }
  SUBCASE("plot output") {
    REQUIRE(invoke({"run", "--scenario", (kScenarios / "steering.toml").string(), "--out", tmp / "t.ndjson", "--plot",
                 tmp / "p.svg"})
                .code == cli::kOk);
    const std::string svg = slurp(tmp / "p.svg");
    CHECK(svg.starts_with("<svg"));
    CHECK(svg.find("<polyline") != std::string::npos);
    CHECK(svg.find("fill=\"red\"") != std::string::npos);
    CHECK(svg.find("stroke=\"blue\"") != std::string::npos);
  }
}

TEST_CASE("eval: reports against reference shapes") {
  Scratch tmp("eval");
  spit(tmp / "short.toml", kShortStraight);
  REQUIRE(invoke({"run", "--scenario", tmp / "short.toml", "--out", tmp / "t.ndjson", "--shape", tmp / "self.csv"}).code ==
          cli::kOk);

  SUBCASE("a shape against itself is all zero") {
    const Result r = invoke({"eval", "--scenario", tmp / "short.toml", "--gt", tmp / "self.csv"});
    REQUIRE(r.code == cli::kOk);
    const auto rows = csv_rows(r.out);
    REQUIRE(rows.size() == 2);
    CHECK(rows[1][0] == "self");
    for (std::size_t c = 2; c < 9; ++c) CHECK(rows[1][c] == "0");
    CHECK(rows[1][9] == "undefined");  // a straight reference has no deflection
  }
  SUBCASE("a parallel reference 1 mm away gives 1 mm everywhere") {
    spit(tmp / "offset.csv", "unit=mm\nx,y\n0,1\n2.5,1\n5,1\n7.5,1\n10,1\n");
    const Result r = invoke({"eval", "--scenario", tmp / "short.toml", "--gt", tmp / "offset.csv"});
    REQUIRE(r.code == cli::kOk);
    const auto rows = csv_rows(r.out);
    for (int c : {2, 3, 4, 7, 8}) CHECK(std::stod(rows[1][c]) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::stod(rows[1][5]) == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("report columns equal the summary computed directly") {
    spit(tmp / "bent.csv", "unit=mm\n0,0\n3,0.2\n6,0.5\n10,1.2\n");
    const Result r = invoke({"eval", "--scenario", tmp / "short.toml", "--gt", tmp / "bent.csv", "--label", "bent"});
    REQUIRE(r.code == cli::kOk);
    const io::Scenario s = io::parse_scenario(kShortStraight);
    const auto report = metrics::evaluate(metrics::simulate_shape(s.model, s.script),
                                          io::load_ground_truth(tmp / "bent.csv").points);
    std::ostringstream expected;
    metrics::write_report_csv(expected, {{"bent", metrics::summarize({report})}});
    CHECK(r.out == expected.str());
    CHECK(csv_rows(r.out)[1][9] != "undefined");
  }
  SUBCASE("a recorded trace and a live run evaluate identically") {
    const Result live = invoke({"eval", "--scenario", tmp / "short.toml", "--gt", tmp / "self.csv", "--points", "7"});
    const Result recorded = invoke({"eval", "--scenario", tmp / "short.toml", "--trace", tmp / "t.ndjson", "--gt",
                                 tmp / "self.csv", "--points", "7"});
    CHECK(live.code == cli::kOk);
    CHECK(live.out == recorded.out);
  }
  SUBCASE("input errors") {
    CHECK(invoke({"eval", "--scenario", tmp / "short.toml"}).code == cli::kFailure);
    spit(tmp / "one.csv", "unit=mm\n0,0\n");
    CHECK(invoke({"eval", "--scenario", tmp / "short.toml", "--gt", tmp / "one.csv"}).code == cli::kFailure);
    spit(tmp / "empty.ndjson", "");
    CHECK(invoke({"eval", "--scenario", tmp / "short.toml", "--trace", tmp / "empty.ndjson", "--gt", tmp / "self.csv"})
              .code == cli::kFailure);
  }
}

TEST_CASE("tune and manifest evaluation") {
  Scratch tmp("tune");
  const std::string bent = std::string(kShortStraight) + "[needle.bevel]\noffset = \"0.2 mm\"\n";
  spit(tmp / "case.toml", bent);
  REQUIRE(invoke({"run", "--scenario", tmp / "case.toml", "--out", tmp / "t.ndjson", "--shape", tmp / "gt.csv"}).code ==
          cli::kOk);

  SUBCASE("empty manifest") {
    spit(tmp / "m.toml", "[options]\nrestarts = 1\n");
    const Result r = invoke({"tune", "--manifest", tmp / "m.toml", "--out", tmp / "fit.toml"});
    CHECK(r.code == cli::kFailure);
    CHECK(r.err.find("no cases") != std::string::npos);
  }
  SUBCASE("seed outside the bounds") {
    spit(tmp / "m.toml", R"(
[[cases]]
scenario = "case.toml"
ground_truth = "gt.csv"
[seed]
bevel = "0.9 mm"
)");
    const Result r = invoke({"tune", "--manifest", tmp / "m.toml", "--out", tmp / "fit.toml"});
    CHECK(r.code == cli::kFailure);
    CHECK(r.err.find("bounds") != std::string::npos);
  }
  SUBCASE("unknown manifest keys are named") {
    spit(tmp / "m.toml", "[[cases]]\nscenario = \"case.toml\"\nground_truth = \"gt.csv\"\nweight = 2\n");
    const Result r = invoke({"tune", "--manifest", tmp / "m.toml", "--out", tmp / "fit.toml"});
    CHECK(r.code == cli::kFailure);
    CHECK(r.err.find("cases[0].weight") != std::string::npos);
  }
  SUBCASE("synthetic recovery writes a reusable scenario") {
    spit(tmp / "m.toml", R"(
[[cases]]
label = "only"
scenario = "case.toml"
ground_truth = "gt.csv"
[seed]
bevel = "0.3 mm"
layers = [ { mu = "300 kPa", alpha = 1.5 } ]
[options]
restarts = 1
max_evaluations = 150
)");
    const Result r = invoke({"tune", "--quiet", "--manifest", tmp / "m.toml", "--out", tmp / "fit.toml"});
    REQUIRE(r.code == cli::kOk);
    const auto rows = csv_rows(r.out);
    CHECK(std::stod(rows[0][1]) < 0.05);  // mm
    const io::Scenario fitted = io::load_scenario(tmp / "fit.toml");
    const io::GroundTruth truth = io::load_ground_truth(tmp / "gt.csv");
    const auto report = metrics::evaluate(metrics::simulate_shape(fitted.model, fitted.script), truth.points);
    CHECK(report.mean_ipe < 0.05e-3);

    const Result table = invoke({"eval", "--manifest", tmp / "m.toml"});
    REQUIRE(table.code == cli::kOk);
    const auto t = csv_rows(table.out);
    REQUIRE(t.size() == 3);
    CHECK(t[1][0] == "only");
    CHECK(t[2][0] == "all");
  }
}

namespace {

unsigned http_status(unsigned short port, boost::beast::http::verb verb, const std::string& target,
                     const std::string& body, std::string* response_body = nullptr) {
  namespace beast = boost::beast;
  namespace http = beast::http;
  boost::asio::io_context ioc;
  beast::tcp_stream stream(ioc);
  stream.connect({boost::asio::ip::make_address("127.0.0.1"), port});
  http::request<http::string_body> req{verb, target, 11};
  req.set(http::field::host, "127.0.0.1");
  req.body() = body;
  req.prepare_payload();
  http::write(stream, req);
  beast::flat_buffer buffer;
  http::response<http::string_body> res;
  http::read(stream, buffer, res);
  if (response_body) *response_body = res.body();
  return res.result_int();
}

}  // namespace

TEST_CASE("serve: busy port and clean shutdown") {
  Scratch tmp("serve");

  service::SessionManager other;
  service::Server occupant(other, {"127.0.0.1", 0});
  const Result busy = invoke({"serve", "--bind", "127.0.0.1:" + std::to_string(occupant.port())});
  CHECK(busy.code == cli::kFailure);
  CHECK(busy.err.find("cannot bind") != std::string::npos);

  std::thread client;
  cli::Hooks hooks;
  hooks.on_serving = [&](service::Server& server, service::SessionManager& sessions) {
    const unsigned short port = server.port();
    client = std::thread([port, &sessions] {
      std::string body;
      const unsigned created = http_status(port, boost::beast::http::verb::post, "/sessions", R"({"preset":"ph2"})", &body);
      if (created == 201) {
        const auto session = sessions.find(service::Json::parse(body).at("id"));
        for (int i = 1; i <= 3; ++i) {
          session->submit_sync({{"seq", i}, {"cmd", "advance"}, {"payload", {{"dh", 1.0}}}});
        }
      }
      std::raise(SIGINT);
    });
  };
  const Result r = invoke({"serve", "--bind", "127.0.0.1:0", "--trace-dir", tmp / "traces"}, hooks);
  client.join();
  CHECK(r.code == cli::kOk);
  CHECK(r.err.find("listening on 127.0.0.1:") != std::string::npos);
  CHECK(io::load_trace(tmp / "traces/s1.ndjson").size() == 3);
}
