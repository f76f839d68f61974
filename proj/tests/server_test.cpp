#include <cstdlib>
#include <sstream>
#include <thread>

#include <boost/asio/connect.hpp>
#include <boost/asio/io_context.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "doctest.h"

#include "needle/server.hpp"

using namespace needle;
using namespace needle::service;
namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace {

/// Server running on an ephemeral loopback port for the lifetime of the fixture.
struct LiveServer {
  SessionManager sessions;
  Server server{sessions, BindAddress{"127.0.0.1", 0}, ServerOptions{std::chrono::milliseconds(100)}};
  std::thread thread{[this] { server.run(); }};

  ~LiveServer() {
    server.stop();
    thread.join();
    sessions.close_all();
  }
};

struct HttpResult {
  unsigned status;
  std::string body;
};

HttpResult request(unsigned short port, http::verb verb, const std::string& target, const std::string& body = "") {
  asio::io_context ioc;
  beast::tcp_stream stream(ioc);
  stream.connect(tcp::endpoint(asio::ip::make_address("127.0.0.1"), port));
  http::request<http::string_body> req{verb, target, 11};
  req.set(http::field::host, "127.0.0.1");
  req.body() = body;
  req.prepare_payload();
  http::write(stream, req);
  beast::flat_buffer buffer;
  http::response<http::string_body> res;
  http::read(stream, buffer, res);
  beast::error_code ec;
  stream.socket().shutdown(tcp::socket::shutdown_both, ec);
  return {res.result_int(), res.body()};
}

struct WsClient {
  asio::io_context ioc;
  websocket::stream<tcp::socket> ws{ioc};

  WsClient(unsigned short port, const std::string& target) {
    ws.next_layer().connect(tcp::endpoint(asio::ip::make_address("127.0.0.1"), port));
    ws.handshake("127.0.0.1", target);
  }

  void send(const Json& j) { ws.write(asio::buffer(j.dump())); }

  Json receive() {
    beast::flat_buffer buffer;
    ws.read(buffer);
    return Json::parse(beast::buffers_to_string(buffer.data()));
  }

  /// Next message that is not a heartbeat.
  Json receive_content() {
    for (;;) {
      Json j = receive();
      if (!j.contains("heartbeat")) return j;
    }
  }
};

}  // namespace

TEST_CASE("bind addresses") {
  CHECK(parse_bind("0.0.0.0:8080").host == "0.0.0.0");
  CHECK(parse_bind("0.0.0.0:8080").port == 8080);
  CHECK(parse_bind("localhost:0").port == 0);
  CHECK_THROWS_AS(parse_bind("7070"), LoadError);
  CHECK_THROWS_AS(parse_bind("host:"), LoadError);
  CHECK_THROWS_AS(parse_bind("host:99999"), LoadError);
  CHECK_THROWS_AS(parse_bind("host:12ab"), LoadError);

  ::unsetenv("NEEDLE_SIM_BIND");
  CHECK(bind_from_env().host == "127.0.0.1");
  CHECK(bind_from_env().port == 7070);
  ::setenv("NEEDLE_SIM_BIND", "127.0.0.2:9000", 1);
  CHECK(bind_from_env().host == "127.0.0.2");
  CHECK(bind_from_env().port == 9000);
  ::unsetenv("NEEDLE_SIM_BIND");
}

TEST_CASE("a busy port is reported as a bind error") {
  SessionManager sessions;
  Server first(sessions, {"127.0.0.1", 0});
  CHECK_THROWS_AS(Server(sessions, {"127.0.0.1", first.port()}), BindError);
  CHECK_THROWS_AS(Server(sessions, {"256.1.1.1", 0}), BindError);
}

TEST_CASE("HTTP endpoints") {
  LiveServer live;
  const unsigned short port = live.server.port();

  const HttpResult scenarios = request(port, http::verb::get, "/scenarios");
  CHECK(scenarios.status == 200);
  const Json names = Json::parse(scenarios.body).at("scenarios");
  CHECK(std::find(names.begin(), names.end(), "ph2") != names.end());

  const HttpResult created = request(port, http::verb::post, "/sessions", R"({"preset":"ph2"})");
  REQUIRE(created.status == 201);
  const Json body = Json::parse(created.body);
  const std::string id = body.at("id");
  CHECK(body.at("step") == 0);
  CHECK(body.at("snapshot").at("layers").size() == 4);

  CHECK(request(port, http::verb::post, "/sessions", R"({"preset":"zzz"})").status == 400);
  CHECK(request(port, http::verb::post, "/sessions", "{not json").status == 400);
  CHECK(request(port, http::verb::get, "/nowhere").status == 404);
  CHECK(request(port, http::verb::get, "/sessions/zz/trace").status == 404);

  const auto session = live.sessions.find(id);
  REQUIRE(session);
  REQUIRE(session->submit_sync({{"seq", 1}, {"cmd", "advance"}, {"payload", {{"dh", 2.0}}}}).accepted);
  REQUIRE(session->submit_sync({{"seq", 2}, {"cmd", "advance"}, {"payload", {{"dh", 2.0}}}}).accepted);
  const HttpResult trace = request(port, http::verb::get, "/sessions/" + id + "/trace");
  CHECK(trace.status == 200);
  std::istringstream in(trace.body);
  CHECK(io::read_trace(in) == session->trace());

  CHECK(request(port, http::verb::delete_, "/sessions/" + id).status == 200);
  CHECK(request(port, http::verb::delete_, "/sessions/" + id).status == 404);
}

TEST_CASE("WebSocket session stream") {
  LiveServer live;
  const unsigned short port = live.server.port();
  const std::string id = live.sessions.create({{"preset", "ph2"}})->id();

  WsClient client(port, "/session/" + id);
  const Json hello = client.receive_content();
  CHECK(hello.at("step") == 0);
  CHECK(hello.at("snapshot").at("layers").size() == 4);

  for (int i = 1; i <= 3; ++i) client.send({{"seq", i}, {"cmd", "advance"}, {"payload", {{"dh", 1.0}}}});
  for (int i = 1; i <= 3; ++i) {
    const Json m = client.receive_content();
    CHECK(m.at("step") == i);
    CHECK(m.at("snapshot").at("echo").at("seq") == i);
  }

  client.send({{"seq", 9}, {"cmd", "advance"}, {"payload", {{"dh", 1.0}}}});
  Json err = client.receive_content();
  CHECK(err.at("error").at("code") == "sequence");
  CHECK(err.at("error").at("expected_seq") == 4);

  client.ws.write(asio::buffer(std::string("not json")));
  err = client.receive_content();
  CHECK(err.at("error").at("code") == "malformed");

  client.send({{"seq", 4}, {"cmd", "get_state"}});
  const Json same = client.receive_content();
  CHECK(same.at("step") == 3);

  // Idle connection keeps beating.
  const Json beat = client.receive();
  CHECK(beat.at("heartbeat").at("step") == 3);

  // Closing the session ends the stream with a normal close.
  REQUIRE(live.sessions.close(id));
  beast::error_code ec;
  for (;;) {
    beast::flat_buffer buffer;
    client.ws.read(buffer, ec);
    if (ec) break;
  }
  CHECK(ec == websocket::error::closed);
}

TEST_CASE("WebSocket upgrade for an unknown session is refused") {
  LiveServer live;
  CHECK_THROWS(WsClient(live.server.port(), "/session/nope"));
}
