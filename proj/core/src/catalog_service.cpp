#include "gftp/catalog.hpp"
#include "gftp/errors.hpp"

namespace gftp::catalog {

namespace {

// Requests carry whole collections, so lines may be large.
constexpr std::size_t kMaxRequestBytes = std::size_t{256} << 20;

json error_reply(Errc code, const std::string& detail) {
  return {{"ok", false}, {"error", std::string(errc_name(code))}, {"detail", detail}};
}

}  // namespace

// ---- client ----

RemoteHandle::RemoteHandle(wire::DataEndpoint server, net::Millis timeout)
    : server_(std::move(server)), timeout_(timeout) {}

json RemoteHandle::call(const std::string& op, const json& args) {
  std::lock_guard lock(mu_);
  json reply;
  try {
    if (!socket_) {
      socket_ = std::make_unique<net::Socket>(net::Socket::connect(server_, timeout_));
      socket_->set_nodelay();
      reader_ = std::make_unique<net::BufferedReader>(*socket_, timeout_);
    }
    const json request = {{"op", op}, {"args", args}};
    socket_->write_all(request.dump() + "\n");
    auto line = reader_->read_line(kMaxRequestBytes);
    if (!line) fail(Errc::CatalogUnavailable, "catalog closed the connection");
    reply = json::parse(*line);
  } catch (const Error& e) {
    reader_.reset();
    socket_.reset();
    fail(Errc::CatalogUnavailable, server_.to_string() + ": " + e.what());
  } catch (const json::exception& e) {
    reader_.reset();
    socket_.reset();
    fail(Errc::CatalogUnavailable, server_.to_string() + ": bad reply: " + e.what());
  }
  if (!reply.value("ok", false)) {
    fail(errc_from_name(reply.value("error", std::string{})), reply.value("detail", std::string{}));
  }
  return reply.value("result", json{});
}

// ---- server ----

Service::Service(Store& store, std::string host, std::uint16_t port)
    : store_(store), host_(std::move(host)), port_(port) {}

Service::~Service() { stop(); }

void Service::start() {
  net::ignore_sigpipe();
  listener_ = net::Listener::bind(host_, port_);
  port_ = listener_.endpoint().port;
  acceptor_ = std::jthread([this] { accept_loop(); });
}

void Service::stop() {
  if (stopping_.exchange(true)) return;
  listener_.shutdown();
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::unique_ptr<Conn>> conns;
  {
    std::lock_guard lock(conn_mu_);
    conns.swap(conns_);
  }
  for (auto& c : conns) c->socket.shutdown();
  conns.clear();  // joins
  listener_.close();
}

void Service::accept_loop() {
  while (!stopping_) {
    auto sock = listener_.accept(net::Millis{500});
    {
      std::lock_guard lock(conn_mu_);
      std::erase_if(conns_, [](const auto& c) { return c->done.load(); });
    }
    if (!sock) continue;
    auto conn = std::make_unique<Conn>();
    conn->socket = std::move(*sock);
    conn->socket.set_nodelay();
    auto* raw = conn.get();
    std::lock_guard lock(conn_mu_);
    if (stopping_) return;
    conns_.push_back(std::move(conn));
    raw->thread = std::jthread([this, raw] { serve(raw); });
  }
}

void Service::serve(Conn* conn) {
  const auto conn_id = next_conn_.fetch_add(1);
  net::BufferedReader reader(conn->socket);
  try {
    while (!stopping_) {
      auto line = reader.read_line(kMaxRequestBytes);
      if (!line) break;
      json reply;
      try {
        reply = handle(json::parse(*line), conn_id);
      } catch (const json::exception& e) {
        reply = error_reply(Errc::BadRequest, e.what());
      }
      conn->socket.write_all(reply.dump() + "\n");
    }
  } catch (const Error&) {
    // Connection dropped or sent an oversize line.
  }
  release_locks(conn_id);
  conn->done = true;
}

json Service::handle(const json& request, std::uint64_t conn_id) {
  try {
    if (!request.is_object()) fail(Errc::BadRequest, "request must be an object");
    const auto op = request.value("op", std::string{});
    if (op == "lock" || op == "unlock") {
      const auto name = request.at("args").at("name").get<std::string>();
      std::lock_guard lock(lock_mu_);
      auto it = locks_.find(name);
      if (op == "lock") {
        if (it != locks_.end() && it->second != conn_id) fail(Errc::Busy, name + " is locked");
        locks_[name] = conn_id;
      } else if (it != locks_.end() && it->second == conn_id) {
        locks_.erase(it);
      }
      return {{"ok", true}, {"result", nullptr}};
    }
    return {{"ok", true}, {"result", store_.execute(request)}};
  } catch (const Error& e) {
    return error_reply(e.code(), e.detail());
  } catch (const json::exception& e) {
    return error_reply(Errc::BadRequest, e.what());
  } catch (const std::exception& e) {
    return error_reply(Errc::IoError, e.what());
  }
}

void Service::release_locks(std::uint64_t conn_id) {
  std::lock_guard lock(lock_mu_);
  std::erase_if(locks_, [&](const auto& kv) { return kv.second == conn_id; });
}

}  // namespace gftp::catalog
