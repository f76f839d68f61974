#include "needle/session.hpp"

#include <cstdio>
#include <initializer_list>
#include <stdexcept>
#include <string_view>
#include <utility>

namespace needle::service {

namespace {

constexpr double kMm = 1e-3;

Json point_mm(const Eigen::Vector2d& p) { return Json::array({p.x() / kMm, p.y() / kMm}); }

/// Malformed command; the message names the offending field.
class Malformed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void allow_only(const Json& object, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!object.is_object()) throw Malformed(where + " must be an object");
  for (const auto& item : object.items()) {
    bool known = false;
    for (std::string_view k : keys) known = known || item.key() == k;
    if (!known) throw Malformed(where + ": unknown field '" + item.key() + "'");
  }
}

double number(const Json& payload, const char* key) {
  const auto it = payload.find(key);
  if (it == payload.end() || !it->is_number()) {
    throw Malformed(std::string("payload.") + key + " must be a number");
  }
  return it->get<double>();
}

std::optional<double> optional_number(const Json& payload, const char* key) {
  if (!payload.contains(key)) return std::nullopt;
  return number(payload, key);
}

double positive_step(const Json& payload) {
  allow_only(payload, {"dh"}, "payload");
  const double dh = number(payload, "dh");
  if (!(dh > 0.0)) throw Malformed("payload.dh must be positive");
  return dh * kMm;
}

sim::VInput parse_v_input(const Json& payload) {
  allow_only(payload, {"target", "deflection", "slope", "abscissa", "index", "release"}, "payload");
  const auto target = payload.find("target");
  if (target == payload.end() || !target->is_string()) {
    throw Malformed("payload.target must be \"base\", \"template\" or \"node\"");
  }
  const std::string kind = target->get<std::string>();
  const bool release = payload.value("release", false);

  sim::VInput in;
  if (!release) {
    if (auto d = optional_number(payload, "deflection")) in.deflection = *d * kMm;
    in.slope = optional_number(payload, "slope");
  } else if (payload.contains("deflection") || payload.contains("slope")) {
    throw Malformed("payload.release cannot be combined with values");
  }

  if (kind == "base") {
    if (release || payload.contains("abscissa") || payload.contains("index")) {
      throw Malformed("payload: the base takes only deflection and slope");
    }
    if (!in.deflection && !in.slope) throw Malformed("payload: base input needs deflection or slope");
    in.target = sim::BaseTarget{};
  } else if (kind == "template") {
    if (payload.contains("index") || payload.contains("slope")) {
      throw Malformed("payload: the template takes abscissa and deflection (its slope is held at zero)");
    }
    if (!release && !in.deflection) throw Malformed("payload.deflection is required unless releasing");
    in.target = sim::TemplateTarget{optional_number(payload, "abscissa").value_or(0.0) * kMm};
  } else if (kind == "node") {
    const auto index = payload.find("index");
    if (index == payload.end() || !index->is_number_integer() || index->get<std::int64_t>() < 0) {
      throw Malformed("payload.index must be a non-negative integer");
    }
    if (payload.contains("abscissa")) throw Malformed("payload.abscissa applies to the template only");
    if (!release && !in.deflection && !in.slope) {
      throw Malformed("payload: node input needs deflection, slope or release");
    }
    in.target = sim::NodeTarget{index->get<std::size_t>()};
  } else {
    throw Malformed("payload.target must be \"base\", \"template\" or \"node\"");
  }
  return in;
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

Json make_snapshot(const sim::SimState& state, const sim::Model& model, const Json& echo) {
  Json s;
  s["step"] = state.step;
  s["in_contact"] = state.in_contact();
  s["depth"] = state.depth / kMm;

  const sim::Pose2 tip = state.tip_pose();
  s["tip"] = {{"x", tip.position.x() / kMm}, {"y", tip.position.y() / kMm}, {"heading", tip.angle}};

  Json polyline = Json::array();
  for (const Eigen::Vector2d& p : state.polyline) polyline.push_back(point_mm(p));
  s["polyline"] = std::move(polyline);

  Json constraints = Json::array();
  if (state.in_contact()) {
    for (const sim::ConstraintPoint& c : state.constraints) {
      constraints.push_back(point_mm(sim::constraint_world(state, c)));
    }
  }
  s["constraints"] = std::move(constraints);

  Json layers = Json::array();
  for (const tissue::OgdenLayer& l : model.domain.layers()) {
    layers.push_back({{"id", l.id},
                      {"mu", l.mu},
                      {"alpha", l.alpha},
                      {"gamma", l.gamma},
                      {"thickness", l.thickness / kMm},
                      {"from", point_mm(l.entry.from)},
                      {"to", point_mm(l.entry.to)}});
  }
  s["layers"] = std::move(layers);
  s["bevel"] = {{"offset", model.bevel.offset / kMm}, {"direction", model.bevel.direction}};
  s["report"] = {{"iterations", state.report.iterations},
                 {"residual", state.report.residual / kMm},
                 {"clamp_count", state.report.clamp_count},
                 {"converged", state.report.converged}};
  s["echo"] = echo;
  s["hash"] = state_hash(s);
  return s;
}

std::string state_hash(const Json& snapshot) {
  Json body = snapshot;
  body.erase("echo");
  body.erase("hash");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(body.dump())));
  return buf;
}

// ---- feed ------------------------------------------------------------------------------

Subscription::Subscription(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw PreconditionError("feed capacity must be positive");
}

void Subscription::set_notify(std::function<void()> notify) {
  std::lock_guard lock(mutex_);
  notify_ = std::move(notify);
}

void Subscription::push(Message message) {
  std::function<void()> notify;
  {
    std::lock_guard lock(mutex_);
    if (closed_) return;
    queue_.push_back(std::move(message));
    if (queue_.size() > capacity_) {
      queue_.pop_front();
      ++dropped_;
    }
    notify = notify_;
  }
  ready_.notify_one();
  if (notify) notify();
}

std::optional<FeedItem> Subscription::try_pop() {
  std::lock_guard lock(mutex_);
  if (dropped_ > 0) {
    FeedItem gap{FeedItem::Kind::gap, nullptr, dropped_};
    dropped_ = 0;
    return gap;
  }
  if (queue_.empty()) return std::nullopt;
  FeedItem item{FeedItem::Kind::snapshot, std::move(queue_.front()), 0};
  queue_.pop_front();
  return item;
}

std::optional<FeedItem> Subscription::wait_pop(std::chrono::milliseconds heartbeat) {
  {
    std::unique_lock lock(mutex_);
    const bool woke = ready_.wait_for(lock, heartbeat, [&] { return closed_ || dropped_ > 0 || !queue_.empty(); });
    if (!woke) return FeedItem{FeedItem::Kind::heartbeat, nullptr, 0};
    if (closed_ && dropped_ == 0 && queue_.empty()) return std::nullopt;
  }
  return try_pop();
}

bool Subscription::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

void Subscription::close() {
  std::function<void()> notify;
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
    notify = notify_;
  }
  ready_.notify_all();
  if (notify) notify();
}

std::shared_ptr<Subscription> Feed::subscribe() {
  auto sub = std::make_shared<Subscription>(capacity_);
  std::lock_guard lock(mutex_);
  if (closed_) {
    sub->close();
  } else {
    subscribers_.push_back(sub);
  }
  return sub;
}

void Feed::publish(const Message& message) {
  std::vector<std::shared_ptr<Subscription>> live;
  {
    std::lock_guard lock(mutex_);
    std::erase_if(subscribers_, [](const std::weak_ptr<Subscription>& w) { return w.expired(); });
    for (const auto& w : subscribers_) {
      if (auto s = w.lock()) live.push_back(std::move(s));
    }
  }
  for (const auto& s : live) s->push(message);
}

void Feed::close() {
  std::vector<std::weak_ptr<Subscription>> subs;
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
    subs.swap(subscribers_);
  }
  for (const auto& w : subs) {
    if (auto s = w.lock()) s->close();
  }
}

Json feed_message(const FeedItem& item, std::uint64_t step) {
  switch (item.kind) {
    case FeedItem::Kind::snapshot: return *item.message;
    case FeedItem::Kind::gap: return {{"gap", {{"dropped", item.dropped}}}};
    case FeedItem::Kind::heartbeat: break;
  }
  return {{"heartbeat", {{"step", step}}}};
}

// ---- sessions ------------------------------------------------------------------------

Json Ack::to_json() const {
  Json j;
  j["seq"] = seq ? Json(*seq) : Json(nullptr);
  if (accepted) {
    j["accepted"] = true;
    j["step"] = snapshot ? snapshot->at("step") : Json(nullptr);
  } else {
    j["error"] = {{"code", code}, {"message", message}, {"expected_seq", expected_seq}};
  }
  return j;
}

io::Scenario resolve_scenario(const Json& request) {
  if (!request.is_object()) throw LoadError("scenario", "request must be a JSON object");
  for (const auto& item : request.items()) {
    if (item.key() != "preset" && item.key() != "scenario") {
      throw LoadError(item.key(), "unknown field");
    }
  }
  const bool has_preset = request.contains("preset");
  if (has_preset == request.contains("scenario")) {
    throw LoadError("scenario", "give exactly one of \"preset\" or \"scenario\"");
  }
  if (has_preset) {
    if (!request["preset"].is_string()) throw LoadError("preset", "must be a string");
    return io::preset(request["preset"].get<std::string>());
  }
  if (!request["scenario"].is_string()) throw LoadError("scenario", "must be TOML text");
  return io::parse_scenario(request["scenario"].get<std::string>(), "<inline>");
}

Session::Session(std::string id, Json open_request)
    : id_(std::move(id)),
      open_request_(std::move(open_request)),
      scenario_(resolve_scenario(open_request_)),
      model_(scenario_.model),
      state_(sim::initial_state(model_)) {
  emit(nullptr);
  worker_ = std::thread([this] { run(); });
}

Session::~Session() { close(); }

void Session::emit(Json echo) {
  Json snapshot = make_snapshot(state_, model_, echo);
  const std::uint64_t step = state_.step;
  auto message = std::make_shared<const Json>(Json{{"step", step}, {"snapshot", std::move(snapshot)}});
  {
    std::lock_guard lock(data_mutex_);
    latest_ = message;
  }
  feed_.publish(message);
}

Ack Session::execute(const Json& command) {
  Ack ack;
  ack.expected_seq = last_seq_ + 1;
  const auto reject = [&](std::string code, std::string message) {
    ack.code = std::move(code);
    ack.message = std::move(message);
    return ack;
  };

  if (!command.is_object()) return reject("malformed", "command must be a JSON object");
  const auto seq = command.find("seq");
  if (seq == command.end() || !seq->is_number_integer() || seq->get<std::int64_t>() < 0) {
    return reject("malformed", "seq must be a non-negative integer");
  }
  ack.seq = seq->get<std::uint64_t>();
  if (*ack.seq != ack.expected_seq) {
    return reject("sequence", "expected seq " + std::to_string(ack.expected_seq) + ", got " +
                                  std::to_string(*ack.seq));
  }

  std::string name;
  Json payload = Json::object();
  std::optional<io::Scenario> loaded;
  sim::Model model = model_;
  sim::SimState state = state_;
  io::ScriptStep stepped;
  bool did_step = false;
  bool restart_trace = false;

  try {
    allow_only(command, {"seq", "cmd", "payload"}, "command");
    const auto cmd = command.find("cmd");
    if (cmd == command.end() || !cmd->is_string()) throw Malformed("cmd must be a string");
    name = cmd->get<std::string>();
    if (command.contains("payload")) payload = command["payload"];

    if (name == "load_scenario") {
      loaded = resolve_scenario(payload);
      model = loaded->model;
      state = sim::initial_state(model);
      restart_trace = true;
    } else if (name == "set_v_input") {
      stepped = {parse_v_input(payload)};
      did_step = true;
    } else if (name == "advance") {
      stepped = {sim::HInput{positive_step(payload)}};
      did_step = true;
    } else if (name == "retract") {
      stepped = {sim::HInput{-positive_step(payload)}};
      did_step = true;
    } else if (name == "reset") {
      allow_only(payload, {}, "payload");
      model = scenario_.model;
      state = sim::initial_state(model);
      restart_trace = true;
    } else if (name == "get_state") {
      allow_only(payload, {}, "payload");
    } else if (name == "set_bevel") {
      allow_only(payload, {"offset", "direction"}, "payload");
      const double offset = number(payload, "offset");
      const auto dir = payload.find("direction");
      if (dir == payload.end() || !dir->is_number_integer() || (*dir != 1 && *dir != -1)) {
        throw Malformed("payload.direction must be 1 or -1");
      }
      if (!(offset >= 0.0)) throw Malformed("payload.offset must be non-negative");
      model.bevel = sim::BevelSpec{offset * kMm, dir->get<int>()};
      sim::validate(model);
    } else {
      throw Malformed("unknown cmd '" + name + "'");
    }
    if (did_step) sim::step(state, stepped, model);
  } catch (const Malformed& e) {
    return reject("malformed", e.what());
  } catch (const LoadError& e) {
    return reject("malformed", e.what());
  } catch (const InvalidProperty& e) {
    return reject("malformed", e.what());
  } catch (const Error& e) {
    return reject("step", e.what());
  } catch (const Json::exception& e) {
    return reject("malformed", e.what());
  }

  last_seq_ = *ack.seq;
  Json echo = {{"seq", *ack.seq}, {"cmd", name}, {"payload", payload}};
  {
    std::lock_guard lock(data_mutex_);
    log_.push_back(echo);
  }

  if (name == "get_state") {
    Message same = latest();
    feed_.publish(same);
    ack.snapshot = std::move(same);
    ack.accepted = true;
    return ack;
  }

  if (loaded) scenario_ = std::move(*loaded);
  model_ = std::move(model);
  state_ = std::move(state);
  {
    std::lock_guard lock(data_mutex_);
    if (restart_trace) trace_.clear();
    if (did_step) trace_.push_back(io::record_step(state_, stepped));
  }
  emit(std::move(echo));
  ack.snapshot = latest();
  ack.accepted = true;
  return ack;
}

void Session::run() {
  for (;;) {
    Pending next;
    {
      std::unique_lock lock(queue_mutex_);
      queue_ready_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      next = std::move(queue_.front());
      queue_.pop_front();
    }
    const Ack ack = execute(next.command);
    if (next.done) {
      try {
        next.done(ack);
      } catch (...) {
        // A failing completion handler belongs to its caller; the session keeps running.
      }
    }
  }
}

void Session::submit(Json command, std::function<void(const Ack&)> done) {
  {
    std::lock_guard lock(queue_mutex_);
    if (!stopping_) {
      queue_.push_back({std::move(command), std::move(done)});
      queue_ready_.notify_one();
      return;
    }
  }
  Ack closed;
  closed.code = "closed";
  closed.message = "session " + id_ + " is closed";
  if (done) done(closed);
}

std::future<Ack> Session::submit(Json command) {
  auto promise = std::make_shared<std::promise<Ack>>();
  std::future<Ack> result = promise->get_future();
  submit(std::move(command), [promise](const Ack& ack) { promise->set_value(ack); });
  return result;
}

Message Session::latest() const {
  std::lock_guard lock(data_mutex_);
  return latest_;
}

io::SimTrace Session::trace() const {
  std::lock_guard lock(data_mutex_);
  return trace_;
}

std::vector<Json> Session::command_log() const {
  std::lock_guard lock(data_mutex_);
  return log_;
}

void Session::close() {
  {
    std::lock_guard lock(queue_mutex_);
    stopping_ = true;
  }
  queue_ready_.notify_all();
  if (worker_.joinable() && worker_.get_id() != std::this_thread::get_id()) worker_.join();
  feed_.close();
}

Message replay(const Json& open_request, const std::vector<Json>& log) {
  Session fresh("replay", open_request);
  for (const Json& command : log) {
    const Ack ack = fresh.submit_sync(command);
    if (!ack.accepted) throw PreconditionError("replay rejected seq: " + ack.message);
  }
  return fresh.latest();
}

std::shared_ptr<Session> SessionManager::create(const Json& open_request) {
  std::string id;
  {
    std::lock_guard lock(mutex_);
    id = "s" + std::to_string(next_id_++);
  }
  auto session = std::make_shared<Session>(id, open_request);
  std::lock_guard lock(mutex_);
  sessions_.emplace(id, session);
  return session;
}

std::shared_ptr<Session> SessionManager::find(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

bool SessionManager::close(const std::string& id) {
  std::shared_ptr<Session> session;
  {
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) return false;
    session = std::move(it->second);
    sessions_.erase(it);
  }
  session->close();
  return true;
}

std::vector<std::string> SessionManager::ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [id, s] : sessions_) out.push_back(id);
  return out;
}

void SessionManager::flush_traces(const std::filesystem::path& dir) const {
  std::vector<std::shared_ptr<Session>> open;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [id, s] : sessions_) open.push_back(s);
  }
  std::filesystem::create_directories(dir);
  for (const auto& s : open) io::save_trace(s->trace(), dir / (s->id() + ".ndjson"));
}

void SessionManager::close_all() {
  std::map<std::string, std::shared_ptr<Session>> all;
  {
    std::lock_guard lock(mutex_);
    all.swap(sessions_);
  }
  for (auto& [id, s] : all) s->close();
}

}  // namespace needle::service
