#pragma once

// HTTP and WebSocket front end for a SessionManager.
//
//   POST   /sessions             body {"preset": name} | {"scenario": toml}; 201 {"id", "step", "snapshot"}
//   GET    /scenarios            {"scenarios": [preset names]}
//   GET    /sessions/{id}/trace  newline-delimited JSON trace
//   DELETE /sessions/{id}        closes the session
//   WS     /session/{id}         commands in, snapshot feed out

#include <chrono>
#include <memory>
#include <string>
#include <string_view>

#include "needle/error.hpp"
#include "needle/session.hpp"

namespace needle::service {

/// The listening socket could not be opened (address in use, bad address, ...).
class BindError : public Error {
 public:
  using Error::Error;
};

struct BindAddress {
  std::string host = "127.0.0.1";
  unsigned short port = 7070;
};

/// Parses "host:port". Throws LoadError("bind", ...) on malformed text.
BindAddress parse_bind(std::string_view text);

/// NEEDLE_SIM_BIND when set, otherwise 127.0.0.1:7070.
BindAddress bind_from_env();

struct ServerOptions {
  std::chrono::milliseconds heartbeat{5000};
};

class Server {
 public:
  /// Binds and listens immediately; throws BindError when the address is unavailable.
  Server(SessionManager& sessions, const BindAddress& bind, ServerOptions options = {});
  ~Server();

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Actual listening port (useful with port 0).
  unsigned short port() const;

  /// Serves until stop() or, after stop_on_signals(), SIGINT/SIGTERM.
  void run();

  /// Thread-safe; makes run() return.
  void stop();

  void stop_on_signals();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace needle::service
