#include "needle/server.hpp"

#include <cstdlib>
#include <deque>
#include <mutex>
#include <optional>
#include <sstream>
#include <vector>

#include <boost/asio/co_spawn.hpp>
#include <boost/asio/detached.hpp>
#include <boost/asio/io_context.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/asio/redirect_error.hpp>
#include <boost/asio/signal_set.hpp>
#include <boost/asio/steady_timer.hpp>
#include <boost/asio/use_awaitable.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

namespace needle::service {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using boost::system::error_code;

BindAddress parse_bind(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0 || colon + 1 == text.size()) {
    throw LoadError("bind", "expected host:port, got '" + std::string(text) + "'");
  }
  const std::string port_text(text.substr(colon + 1));
  char* end = nullptr;
  const long port = std::strtol(port_text.c_str(), &end, 10);
  if (*end != '\0' || port < 0 || port > 65535) throw LoadError("bind", "bad port '" + port_text + "'");
  return {std::string(text.substr(0, colon)), static_cast<unsigned short>(port)};
}

BindAddress bind_from_env() {
  const char* env = std::getenv("NEEDLE_SIM_BIND");
  return env && *env ? parse_bind(env) : BindAddress{};
}

namespace {

using Request = http::request<http::string_body>;
using Response = http::response<http::string_body>;

std::string target_of(const Request& req) { return std::string(req.target().data(), req.target().size()); }

std::vector<std::string> split_path(std::string_view target) {
  target = target.substr(0, target.find('?'));
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= target.size()) {
    const std::size_t slash = target.find('/', start);
    const std::size_t stop = slash == std::string_view::npos ? target.size() : slash;
    if (stop > start) parts.emplace_back(target.substr(start, stop - start));
    if (slash == std::string_view::npos) break;
    start = slash + 1;
  }
  return parts;
}

Response reply(const Request& req, http::status status, std::string body,
               const char* type = "application/json") {
  Response res{status, req.version()};
  res.set(http::field::content_type, type);
  res.set(http::field::access_control_allow_origin, "*");
  res.keep_alive(req.keep_alive());
  res.body() = std::move(body);
  res.prepare_payload();
  return res;
}

Response error_reply(const Request& req, http::status status, const std::string& message) {
  return reply(req, status, Json{{"error", message}}.dump());
}

Response route(SessionManager& sessions, const Request& req) {
  const std::vector<std::string> path = split_path(target_of(req));

  if (req.method() == http::verb::options) {
    Response res = reply(req, http::status::no_content, "");
    res.set(http::field::access_control_allow_methods, "GET, POST, DELETE, OPTIONS");
    res.set(http::field::access_control_allow_headers, "Content-Type");
    return res;
  }
  if (path == std::vector<std::string>{"scenarios"} && req.method() == http::verb::get) {
    return reply(req, http::status::ok, Json{{"scenarios", io::preset_names()}}.dump());
  }
  if (path == std::vector<std::string>{"sessions"} && req.method() == http::verb::post) {
    Json request;
    try {
      request = req.body().empty() ? Json::object() : Json::parse(req.body());
    } catch (const Json::exception& e) {
      return error_reply(req, http::status::bad_request, std::string("body is not JSON: ") + e.what());
    }
    try {
      const auto session = sessions.create(request);
      const Message first = session->latest();
      Json body{{"id", session->id()}, {"step", first->at("step")}, {"snapshot", first->at("snapshot")}};
      return reply(req, http::status::created, body.dump());
    } catch (const Error& e) {
      return error_reply(req, http::status::bad_request, e.what());
    }
  }
  if (path.size() == 3 && path[0] == "sessions" && path[2] == "trace" && req.method() == http::verb::get) {
    const auto session = sessions.find(path[1]);
    if (!session) return error_reply(req, http::status::not_found, "no session '" + path[1] + "'");
    std::ostringstream out;
    io::write_trace(session->trace(), out);
    return reply(req, http::status::ok, out.str(), "application/x-ndjson");
  }
  if (path.size() == 2 && path[0] == "sessions" && req.method() == http::verb::delete_) {
    if (!sessions.close(path[1])) return error_reply(req, http::status::not_found, "no session '" + path[1] + "'");
    return reply(req, http::status::ok, Json{{"closed", path[1]}}.dump());
  }
  return error_reply(req, http::status::not_found, "no route for " + target_of(req));
}

/// One WebSocket client attached to a session. Lives on the single io thread except for
/// `replies`, which session workers fill through `notify`.
struct Peer : std::enable_shared_from_this<Peer> {
  Peer(beast::tcp_stream stream, std::shared_ptr<Session> s)
      : ws(std::move(stream)), wake(ws.get_executor()), session(std::move(s)) {}

  websocket::stream<beast::tcp_stream> ws;
  asio::steady_timer wake;
  std::shared_ptr<Session> session;
  std::shared_ptr<Subscription> feed;
  std::mutex mutex;
  std::deque<std::string> replies;
  bool reading = true;

  void post_reply(std::string text) {
    {
      std::lock_guard lock(mutex);
      replies.push_back(std::move(text));
    }
    notify();
  }

  void notify() {
    asio::post(wake.get_executor(), [weak = weak_from_this()] {
      if (auto self = weak.lock()) self->wake.cancel();
    });
  }

  std::optional<std::string> next_outbound() {
    {
      std::lock_guard lock(mutex);
      if (!replies.empty()) {
        std::string text = std::move(replies.front());
        replies.pop_front();
        return text;
      }
    }
    if (auto item = feed->try_pop()) return feed_message(*item, 0).dump();
    return std::nullopt;
  }
};

asio::awaitable<void> write_loop(std::shared_ptr<Peer> peer, std::chrono::milliseconds heartbeat) {
  error_code ec;
  while (peer->reading) {
    while (auto text = peer->next_outbound()) {
      peer->ws.text(true);
      co_await peer->ws.async_write(asio::buffer(*text), asio::redirect_error(asio::use_awaitable, ec));
      if (ec) co_return;
    }
    if (peer->feed->closed()) {
      co_await peer->ws.async_close(websocket::close_code::normal, asio::redirect_error(asio::use_awaitable, ec));
      co_return;
    }
    peer->wake.expires_after(heartbeat);
    co_await peer->wake.async_wait(asio::redirect_error(asio::use_awaitable, ec));
    if (!ec && peer->reading) {
      const std::string beat = Json{{"heartbeat", {{"step", peer->session->latest()->at("step")}}}}.dump();
      peer->ws.text(true);
      co_await peer->ws.async_write(asio::buffer(beat), asio::redirect_error(asio::use_awaitable, ec));
      if (ec) co_return;
    }
  }
}

asio::awaitable<void> run_websocket(beast::tcp_stream stream, Request req, std::shared_ptr<Session> session,
                                    std::chrono::milliseconds heartbeat) {
  auto peer = std::make_shared<Peer>(std::move(stream), std::move(session));
  error_code ec;
  peer->ws.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
  co_await peer->ws.async_accept(req, asio::redirect_error(asio::use_awaitable, ec));
  if (ec) co_return;

  peer->feed = peer->session->subscribe();
  peer->feed->set_notify([weak = std::weak_ptr<Peer>(peer)] {
    if (auto p = weak.lock()) p->notify();
  });
  peer->post_reply(peer->session->latest()->dump());
  asio::co_spawn(peer->ws.get_executor(), write_loop(peer, heartbeat), asio::detached);

  for (;;) {
    beast::flat_buffer buffer;
    co_await peer->ws.async_read(buffer, asio::redirect_error(asio::use_awaitable, ec));
    if (ec) break;
    Json command;
    try {
      command = Json::parse(beast::buffers_to_string(buffer.data()));
    } catch (const Json::exception& e) {
      Ack bad;
      bad.code = "malformed";
      bad.message = std::string("message is not JSON: ") + e.what();
      peer->post_reply(bad.to_json().dump());
      continue;
    }
    peer->session->submit(std::move(command), [weak = std::weak_ptr<Peer>(peer)](const Ack& ack) {
      if (ack.accepted) return;  // the snapshot arrives through the feed
      if (auto p = weak.lock()) p->post_reply(ack.to_json().dump());
    });
  }
  peer->reading = false;
  peer->feed->close();
}

asio::awaitable<void> serve_connection(SessionManager& sessions, tcp::socket socket, std::chrono::milliseconds heartbeat) {
  beast::tcp_stream stream(std::move(socket));
  beast::flat_buffer buffer;
  error_code ec;
  for (;;) {
    Request req;
    stream.expires_after(std::chrono::seconds(60));
    co_await http::async_read(stream, buffer, req, asio::redirect_error(asio::use_awaitable, ec));
    if (ec) break;

    if (websocket::is_upgrade(req)) {
      const std::vector<std::string> path = split_path(target_of(req));
      std::shared_ptr<Session> session;
      if (path.size() == 2 && path[0] == "session") session = sessions.find(path[1]);
      if (session) {
        stream.expires_never();
        co_await run_websocket(std::move(stream), std::move(req), std::move(session), heartbeat);
        co_return;
      }
      Response res = error_reply(req, http::status::not_found, "no session at " + target_of(req));
      res.keep_alive(false);
      co_await http::async_write(stream, res, asio::redirect_error(asio::use_awaitable, ec));
      break;
    }

    Response res = route(sessions, req);
    const bool keep = res.keep_alive();
    co_await http::async_write(stream, res, asio::redirect_error(asio::use_awaitable, ec));
    if (ec || !keep) break;
  }
  stream.socket().shutdown(tcp::socket::shutdown_send, ec);
}

}  // namespace

struct Server::Impl {
  Impl(SessionManager& s, ServerOptions o) : sessions(s), options(o) {}

  SessionManager& sessions;
  ServerOptions options;
  asio::io_context ioc{1};
  tcp::acceptor acceptor{ioc};
  std::optional<asio::signal_set> signals;

  asio::awaitable<void> listen() {
    for (;;) {
      error_code ec;
      tcp::socket socket = co_await acceptor.async_accept(asio::redirect_error(asio::use_awaitable, ec));
      if (ec == asio::error::operation_aborted || !acceptor.is_open()) co_return;
      if (ec) continue;
      asio::co_spawn(ioc, serve_connection(sessions, std::move(socket), options.heartbeat), asio::detached);
    }
  }
};

Server::Server(SessionManager& sessions, const BindAddress& bind, ServerOptions options)
    : impl_(std::make_unique<Impl>(sessions, options)) {
  const std::string where = bind.host + ":" + std::to_string(bind.port);
  error_code ec;
  tcp::endpoint endpoint;
  const auto address = asio::ip::make_address(bind.host, ec);
  if (!ec) {
    endpoint = tcp::endpoint(address, bind.port);
  } else {
    tcp::resolver resolver(impl_->ioc);
    const auto results = resolver.resolve(bind.host, std::to_string(bind.port), ec);
    if (ec || results.empty()) throw BindError("cannot resolve " + where + ": " + ec.message());
    endpoint = results.begin()->endpoint();
  }

  auto& acceptor = impl_->acceptor;
  const auto check = [&](const char* what) {
    if (ec) throw BindError(std::string("cannot ") + what + " " + where + ": " + ec.message());
  };
  acceptor.open(endpoint.protocol(), ec);
  check("open");
  acceptor.set_option(asio::socket_base::reuse_address(true), ec);
  check("configure");
  acceptor.bind(endpoint, ec);
  check("bind");
  acceptor.listen(asio::socket_base::max_listen_connections, ec);
  check("listen on");
}

Server::~Server() = default;

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

void Server::run() {
  asio::co_spawn(impl_->ioc, impl_->listen(), asio::detached);
  impl_->ioc.run();
}

void Server::stop() { impl_->ioc.stop(); }

void Server::stop_on_signals() {
  impl_->signals.emplace(impl_->ioc, SIGINT, SIGTERM);
  impl_->signals->async_wait([this](const error_code& ec, int) {
    if (!ec) stop();
  });
}

}  // namespace needle::service
