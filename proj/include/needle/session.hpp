#pragma once

// Interactive sessions over the stepping loop: command intake with sequence
// checking, immutable snapshots in millimetres, and per-subscriber snapshot feeds.
//
// Wire shapes (all lengths in mm, angles in rad):
//   command   {"seq": n, "cmd": name, "payload": {...}}
//   snapshot  {"step": n, "snapshot": {...}}
//   gap       {"gap": {"dropped": n}}
//   heartbeat {"heartbeat": {"step": n}}
// docs/protocol.md lists every command payload and snapshot field.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "needle/error.hpp"
#include "needle/scenario_io.hpp"
#include "needle/sim_core.hpp"

namespace needle::service {

using Json = nlohmann::ordered_json;
using Message = std::shared_ptr<const Json>;

/// Snapshot body for the current state. `echo` is the last state-changing command (or null).
Json make_snapshot(const sim::SimState& state, const sim::Model& model, const Json& echo);

/// Hex FNV-1a 64 of the snapshot with its "echo" and "hash" members left out.
std::string state_hash(const Json& snapshot);

// ---- feed --------------------------------------------------------------------------

struct FeedItem {
  enum class Kind { snapshot, gap, heartbeat };
  Kind kind = Kind::snapshot;
  Message message;            // snapshot items only
  std::uint64_t dropped = 0;  // gap items only
};

/// Bounded single-consumer queue. The producer never waits: once `capacity` items are
/// queued the oldest is discarded and the next pop reports a gap of the discarded count.
class Subscription {
 public:
  explicit Subscription(std::size_t capacity);

  /// Called after every push and on close; may run on any thread.
  void set_notify(std::function<void()> notify);

  std::optional<FeedItem> try_pop();

  /// Waits up to `heartbeat`; returns a heartbeat item on timeout and nullopt once the
  /// feed is closed and drained.
  std::optional<FeedItem> wait_pop(std::chrono::milliseconds heartbeat);

  bool closed() const;
  void close();
  void push(Message message);

 private:
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable ready_;
  std::deque<Message> queue_;
  std::uint64_t dropped_ = 0;
  bool closed_ = false;
  std::function<void()> notify_;
};

class Feed {
 public:
  explicit Feed(std::size_t capacity = 64) : capacity_(capacity) {}

  std::shared_ptr<Subscription> subscribe();
  void publish(const Message& message);
  void close();

 private:
  std::size_t capacity_;
  std::mutex mutex_;
  std::vector<std::weak_ptr<Subscription>> subscribers_;
  bool closed_ = false;
};

/// Wire message for a feed item. `step` fills the heartbeat.
Json feed_message(const FeedItem& item, std::uint64_t step);

// ---- sessions ----------------------------------------------------------------------

struct Ack {
  bool accepted = false;
  std::optional<std::uint64_t> seq;
  std::string code;     // "sequence", "malformed" or "step" when rejected
  std::string message;  // diagnostic when rejected
  std::uint64_t expected_seq = 1;
  Message snapshot;     // resulting {"step", "snapshot"} message when accepted

  Json to_json() const;
};

/// Scenario named by an open request or a load_scenario payload:
/// {"preset": name} or {"scenario": "<toml text>"}. Throws LoadError.
io::Scenario resolve_scenario(const Json& request);

/// One simulation owned by a private worker thread. Commands queue in arrival order
/// and the worker is the only code that touches the state.
class Session {
 public:
  static constexpr std::size_t kFeedCapacity = 64;

  /// Throws LoadError for an unknown or malformed scenario.
  Session(std::string id, Json open_request);
  ~Session();

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const std::string& id() const noexcept { return id_; }
  const Json& open_request() const noexcept { return open_request_; }

  void submit(Json command, std::function<void(const Ack&)> done);
  std::future<Ack> submit(Json command);
  Ack submit_sync(Json command) { return submit(std::move(command)).get(); }

  /// Last emitted {"step", "snapshot"} message.
  Message latest() const;

  /// Feed of every message emitted from now on.
  std::shared_ptr<Subscription> subscribe() { return feed_.subscribe(); }

  /// Steps recorded since the session opened or last loaded or reset.
  io::SimTrace trace() const;

  /// Accepted commands in application order.
  std::vector<Json> command_log() const;

  /// Stops the worker after the queued commands and ends every feed.
  void close();

 private:
  struct Pending {
    Json command;
    std::function<void(const Ack&)> done;
  };

  Ack execute(const Json& command);
  void emit(Json echo);
  void run();

  std::string id_;
  Json open_request_;
  io::Scenario scenario_;
  sim::Model model_;
  sim::SimState state_;
  std::uint64_t last_seq_ = 0;

  mutable std::mutex data_mutex_;  // guards latest_, trace_ and log_ for readers
  Message latest_;
  io::SimTrace trace_;
  std::vector<Json> log_;

  Feed feed_{kFeedCapacity};

  std::mutex queue_mutex_;
  std::condition_variable queue_ready_;
  std::deque<Pending> queue_;
  bool stopping_ = false;
  std::thread worker_;
};

/// Final message of a fresh session opened with `open_request` after every command of `log`.
Message replay(const Json& open_request, const std::vector<Json>& log);

class SessionManager {
 public:
  /// Throws LoadError for an unknown scenario.
  std::shared_ptr<Session> create(const Json& open_request);
  std::shared_ptr<Session> find(const std::string& id) const;
  bool close(const std::string& id);
  std::vector<std::string> ids() const;

  /// Writes `<id>.ndjson` for every open session into `dir` (created if needed).
  void flush_traces(const std::filesystem::path& dir) const;
  void close_all();

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 1;
};

}  // namespace needle::service
