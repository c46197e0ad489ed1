#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdlib>
#include <fstream>

#include "gftp/crypto.hpp"
#include "gftp/errors.hpp"
#include "gftp/server.hpp"

namespace gftp::server {

namespace {

std::uint16_t to_port(const std::string& s, const char* what) {
  const auto v = wire::parse_u64(s);
  if (!v || *v > 65535) fail(Errc::InvalidSpec, std::string("bad ") + what + ": " + s);
  return static_cast<std::uint16_t>(*v);
}

bool to_bool(const std::string& s) { return s == "1" || s == "true" || s == "yes" || s == "on"; }

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

ServerConfig load_config(const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(Errc::InvalidSpec, e.what());
  }
  ServerConfig c;
  const auto base = std::filesystem::path(path).parent_path();
  auto relative = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() || base.empty() ? fp : base / fp;
  };
  for (const auto& [key, node] : tree) {
    const auto value = trim(node.get_value<std::string>());
    if (key == "bind_host") {
      c.bind_host = value;
    } else if (key == "port") {
      c.port = to_port(value, "port");
    } else if (key == "data_host") {
      c.data_host = value;
    } else if (key == "data_ports") {
      const auto dash = value.find('-');
      if (dash == std::string::npos) fail(Errc::InvalidSpec, "data_ports wants low-high");
      c.data_port_low = to_port(value.substr(0, dash), "data_ports");
      c.data_port_high = to_port(value.substr(dash + 1), "data_ports");
    } else if (key == "root") {
      c.root = relative(value);
    } else if (key == "secrets") {
      c.secrets_file = relative(value).string();
    } else if (key == "marker_bytes") {
      c.marker_bytes = wire::parse_u64(value).value_or(c.marker_bytes);
    } else if (key == "marker_interval_ms") {
      c.marker_interval = Millis(wire::parse_u64(value).value_or(c.marker_interval.count()));
    } else if (key == "sync_markers") {
      c.sync_markers = to_bool(value);
    } else if (key == "max_sessions") {
      c.max_sessions = wire::parse_u64(value).value_or(c.max_sessions);
    } else if (key == "max_block") {
      const auto v = wire::parse_u64(value);
      if (!v || *v < wire::kMinBlockSize || *v > wire::kMaxBlockSize) fail(Errc::InvalidSpec, "bad max_block");
      c.max_block = *v;
    } else if (key == "channel_ttl_ms") {
      c.channel_ttl = Millis(wire::parse_u64(value).value_or(c.channel_ttl.count()));
    } else if (key == "stripe_nodes") {
      for (auto item : wire::split(value, ',')) {
        const auto t = trim(std::string(item));
        if (!t.empty()) c.stripe_nodes.push_back(wire::parse_endpoint(t));
      }
    } else if (key == "stripe_user") {
      c.stripe_user = value;
    } else if (key == "stripe_secret") {
      c.stripe_secret_hex = value;
    } else {
      fail(Errc::InvalidSpec, "unknown config key " + key);
    }
  }
  if (c.data_port_low > c.data_port_high) fail(Errc::InvalidSpec, "data port range is empty");
  return c;
}

void apply_environment(ServerConfig& config) {
  if (const char* p = std::getenv("GFTP_PORT"); p && *p) config.port = to_port(p, "GFTP_PORT");
  if (const char* r = std::getenv("GFTP_ROOT"); r && *r) config.root = r;
}

SecretStore SecretStore::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoError, "cannot read secrets file " + path);
  SecretStore store;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto colon = line.rfind(':');
    if (colon == std::string::npos || colon == 0) fail(Errc::InvalidSpec, "bad secrets line: " + line);
    bool ok = false;
    auto secret = crypto::from_hex(line.substr(colon + 1), &ok);
    if (!ok || secret.empty()) fail(Errc::InvalidSpec, "bad secret for " + line.substr(0, colon));
    store.add(line.substr(0, colon), std::move(secret));
  }
  return store;
}

void SecretStore::add(const std::string& name, std::vector<std::byte> secret) { secrets_[name] = std::move(secret); }

std::optional<std::vector<std::byte>> SecretStore::find(const std::string& name) const {
  const auto it = secrets_.find(name);
  if (it == secrets_.end()) return std::nullopt;
  return it->second;
}

Server::Server(ServerConfig config)
    : Server(config, config.secrets_file.empty() ? SecretStore{} : SecretStore::load(config.secrets_file)) {}

Server::Server(ServerConfig config, SecretStore secrets) {
  ctx_.config = std::move(config);
  ctx_.secrets = std::move(secrets);
  net::ignore_sigpipe();
}

Server::~Server() { stop(); }

void Server::start() {
  listener_ = net::Listener::bind(ctx_.config.bind_host, ctx_.config.port);
  ctx_.config.port = listener_.endpoint().port;
  stopping_ = false;
  acceptor_ = std::jthread([this] { accept_loop(); });
}

void Server::stop() {
  stopping_ = true;
  listener_.shutdown();
  if (acceptor_.joinable()) acceptor_.join();
  std::list<std::unique_ptr<Connection>> conns;
  {
    std::lock_guard lock(conn_mu_);
    for (auto& c : connections_) c->socket.shutdown();
    conns.swap(connections_);
  }
  for (auto& c : conns) {
    if (c->thread.joinable()) c->thread.join();
  }
  listener_.close();
}

void Server::run() {
  start();
  while (!stopping_) std::this_thread::sleep_for(Millis{200});
}

std::uint16_t Server::port() const { return ctx_.config.port; }

wire::DataEndpoint Server::endpoint() const { return {ctx_.config.data_host, ctx_.config.port}; }

void Server::reap() {
  std::list<std::unique_ptr<Connection>> dead;
  {
    std::lock_guard lock(conn_mu_);
    for (auto it = connections_.begin(); it != connections_.end();) {
      if ((*it)->done) {
        dead.push_back(std::move(*it));
        it = connections_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (auto& c : dead) {
    if (c->thread.joinable()) c->thread.join();
  }
}

void Server::accept_loop() {
  while (!stopping_) {
    auto s = listener_.accept(Millis{200});
    reap();
    if (!s) continue;
    std::size_t live = 0;
    {
      std::lock_guard lock(conn_mu_);
      live = connections_.size();
    }
    if (live >= ctx_.config.max_sessions) {
      try {
        s->write_all(wire::render_reply(wire::Reply(421, "Too many sessions, try again later")));
      } catch (const std::exception&) {
      }
      continue;
    }
    s->set_nodelay();
    auto conn = std::make_unique<Connection>();
    conn->socket = std::move(*s);
    auto* raw = conn.get();
    std::lock_guard lock(conn_mu_);
    connections_.push_back(std::move(conn));
    raw->thread = std::jthread([this, raw] {
      try {
        serve(raw);
      } catch (const std::exception&) {
      }
      raw->socket.shutdown();
      raw->done = true;
    });
  }
}

void Server::serve(Connection* conn) {
  ++ctx_.stats.sessions;
  std::mutex write_mu;
  bool broken = false;
  auto send = [&](const wire::Reply& r) {
    std::lock_guard lock(write_mu);
    if (broken) return;
    try {
      conn->socket.write_all(wire::render_reply(r));
    } catch (const std::exception&) {
      broken = true;
      conn->socket.shutdown();
    }
  };
  Session session(ctx_, send);
  send(wire::Reply(220, "gftpd ready"));
  net::BufferedReader reader(conn->socket);
  while (!stopping_) {
    std::optional<std::string> line;
    try {
      line = reader.read_line();
    } catch (const Error& e) {
      if (e.code() != Errc::MalformedLine) break;
      send(wire::Reply(500, "Line too long"));
      break;
    }
    if (!line) break;
    if (!session.handle_line(*line)) break;
  }
  session.close();
}

}  // namespace gftp::server
