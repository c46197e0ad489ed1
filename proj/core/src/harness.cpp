#include "gftp/harness.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "gftp/client.hpp"
#include "gftp/crypto.hpp"
#include "gftp/errors.hpp"
#include "gftp/server.hpp"

namespace gftp::harness {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kRelayChunk = 64 * 1024;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// A scratch directory removed on scope exit unless the caller supplied one.
class Workdir {
 public:
  explicit Workdir(const std::string& given) {
    if (!given.empty()) {
      path_ = given;
      fs::create_directories(path_);
      return;
    }
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("gftp-harness-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
    owned_ = true;
  }
  ~Workdir() {
    std::error_code ec;
    if (owned_) fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  bool owned_ = false;
};

void write_random_file(const fs::path& path, std::uint64_t size, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  std::mt19937_64 rng(seed);
  std::vector<std::uint64_t> buf(1 << 17);
  while (size > 0) {
    for (auto& w : buf) w = rng();
    const auto n = std::min<std::uint64_t>(size, buf.size() * sizeof(std::uint64_t));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(n));
    size -= n;
  }
  if (!out) fail(Errc::IoError, "write " + path.string());
}

// A server on an ephemeral port with one random account.
struct LocalServer {
  LocalServer(const fs::path& root, std::uint64_t marker_bytes) : secret(crypto::random_bytes(32)) {
    server::ServerConfig cfg;
    cfg.bind_host = "127.0.0.1";
    cfg.port = 0;
    cfg.root = root;
    cfg.data_port_low = 20000;
    cfg.data_port_high = 40000;
    cfg.sync_markers = false;
    cfg.marker_bytes = marker_bytes;
    server::SecretStore secrets;
    secrets.add("harness", secret);
    srv = std::make_unique<server::Server>(cfg, std::move(secrets));
    srv->start();
  }
  client::GridUrl url(const std::string& path) const { return {"127.0.0.1", srv->port(), path}; }
  client::Credentials credentials() const {
    client::Credentials c;
    c.add_default("harness", secret);
    return c;
  }

  std::vector<std::byte> secret;
  std::unique_ptr<server::Server> srv;
};

}  // namespace

// ---- profile ----

void ImpairmentProfile::validate() const {
  if (per_stream_rate < 0 || aggregate_rate < 0) fail(Errc::InvalidSpec, "rate caps must be positive");
  if (accept_delay.count() < 0) fail(Errc::InvalidSpec, "accept_delay must not be negative");
}

ImpairmentProfile ImpairmentProfile::from_json(const json& j) {
  ImpairmentProfile p;
  try {
    p.per_stream_rate = j.value("per_stream_rate", 0.0);
    p.aggregate_rate = j.value("aggregate_rate", 0.0);
    p.accept_delay = Millis{j.value("accept_delay_ms", std::int64_t{0})};
    p.socket_buffer = j.value("socket_buffer", std::size_t{0});
    for (const auto& d : j.value("disconnects", json::array())) {
      DisconnectRule r;
      if (d.contains("connection") && !d["connection"].is_null()) r.connection = d["connection"].get<std::size_t>();
      r.at_bytes = d.at("at_bytes").get<std::uint64_t>();
      p.disconnects.push_back(r);
    }
    p.sever_all_at = j.value("sever_all_at", std::vector<std::uint64_t>{});
  } catch (const json::exception& e) {
    fail(Errc::InvalidSpec, std::string("profile: ") + e.what());
  }
  std::sort(p.sever_all_at.begin(), p.sever_all_at.end());
  p.validate();
  return p;
}

json ImpairmentProfile::to_json() const {
  json d = json::array();
  for (const auto& r : disconnects) {
    d.push_back({{"connection", r.connection ? json(*r.connection) : json(nullptr)}, {"at_bytes", r.at_bytes}});
  }
  return {{"per_stream_rate", per_stream_rate},
          {"aggregate_rate", aggregate_rate},
          {"accept_delay_ms", accept_delay.count()},
          {"socket_buffer", socket_buffer},
          {"disconnects", d},
          {"sever_all_at", sever_all_at}};
}

// ---- token bucket ----

TokenBucket::TokenBucket(double rate, std::uint64_t burst)
    : rate_(rate), burst_(static_cast<double>(burst)), tokens_(static_cast<double>(burst)), last_(Clock::now()) {}

void TokenBucket::acquire(std::uint64_t bytes) {
  if (rate_ <= 0) return;
  Clock::duration wait{};
  {
    std::lock_guard lock(mu_);
    const auto now = Clock::now();
    tokens_ = std::min(burst_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
    last_ = now;
    // Go into debt and sleep it off, so concurrent callers queue fairly.
    tokens_ -= static_cast<double>(bytes);
    if (tokens_ < 0) {
      wait = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(-tokens_ / rate_));
    }
  }
  if (wait.count() > 0) std::this_thread::sleep_for(wait);
}

// ---- counters ----

std::uint64_t ProxyReport::total_in() const {
  std::uint64_t n = 0;
  for (const auto& c : connections) n += c.forward_in + c.backward_in;
  return n;
}

std::uint64_t ProxyReport::total_out() const {
  std::uint64_t n = 0;
  for (const auto& c : connections) n += c.relayed();
  return n;
}

json ProxyReport::to_json() const {
  json conns = json::array();
  for (const auto& c : connections) {
    conns.push_back({{"id", c.id},
                     {"upstream", c.upstream},
                     {"forward_in", c.forward_in},
                     {"forward_out", c.forward_out},
                     {"backward_in", c.backward_in},
                     {"backward_out", c.backward_out},
                     {"residue", c.residue()},
                     {"severed", c.severed}});
  }
  return {{"accepted", accepted},
          {"upstream_failures", upstream_failures},
          {"severed", severed},
          {"total_in", total_in()},
          {"total_out", total_out()},
          {"connections", conns}};
}

// ---- proxy group ----

struct ProxyGroup::Link {
  Link(std::uint64_t id, std::string upstream, double rate) : id(id), upstream(std::move(upstream)), bucket(rate) {}

  void sever() {
    std::lock_guard lock(mu);
    if (closed) return;
    severed = true;
    client.shutdown();
    server.shutdown();
  }
  // Tears down without counting as a scheduled cut.
  void shutdown() {
    std::lock_guard lock(mu);
    if (closed) return;
    client.shutdown();
    server.shutdown();
  }
  void close() {
    std::lock_guard lock(mu);
    closed = true;
  }
  std::uint64_t relayed() const { return forward_out.load() + backward_out.load(); }

  const std::uint64_t id;
  const std::string upstream;
  std::optional<std::uint64_t> cut_at;
  TokenBucket bucket;
  net::Socket client;
  net::Socket server;
  std::atomic<std::uint64_t> forward_in{0}, forward_out{0}, backward_in{0}, backward_out{0};
  std::atomic<bool> severed{false};
  std::mutex mu;
  bool closed = false;
};

ProxyGroup::ProxyGroup(ImpairmentProfile profile)
    : profile_(std::move(profile)), aggregate_(profile_.aggregate_rate) {
  profile_.validate();
  std::sort(profile_.sever_all_at.begin(), profile_.sever_all_at.end());
}

ProxyGroup::~ProxyGroup() = default;

std::shared_ptr<ProxyGroup::Link> ProxyGroup::open_link(const std::string& upstream) {
  const auto id = accepted_.fetch_add(1);
  auto link = std::make_shared<Link>(id, upstream, profile_.per_stream_rate);
  for (const auto& r : profile_.disconnects) {
    if (r.connection && *r.connection != id) continue;
    link->cut_at = link->cut_at ? std::min(*link->cut_at, r.at_bytes) : r.at_bytes;
  }
  std::lock_guard lock(mu_);
  links_.push_back(link);
  return link;
}

std::optional<std::uint64_t> ProxyGroup::limit_for(const Link& link, std::uint64_t want) const {
  if (!link.cut_at) return want;
  const auto done = link.relayed();
  if (done >= *link.cut_at) return std::nullopt;
  return std::min(want, *link.cut_at - done);
}

void ProxyGroup::relayed(std::uint64_t bytes) {
  const auto total = total_.fetch_add(bytes) + bytes;
  bool cut = false;
  {
    std::lock_guard lock(mu_);
    while (next_threshold_ < profile_.sever_all_at.size() && total >= profile_.sever_all_at[next_threshold_]) {
      ++next_threshold_;
      cut = true;
    }
  }
  if (cut) sever_all();
}

void ProxyGroup::sever_all() {
  std::vector<std::shared_ptr<Link>> live;
  {
    std::lock_guard lock(mu_);
    live = links_;
  }
  for (auto& l : live) {
    if (!l->severed) {
      l->sever();
      if (l->severed) severed_.fetch_add(1);
    }
  }
}

std::uint64_t ProxyGroup::sever_events() const {
  std::lock_guard lock(mu_);
  return next_threshold_;
}

ProxyReport ProxyGroup::report() const {
  ProxyReport r;
  std::lock_guard lock(mu_);
  for (const auto& l : links_) {
    ConnectionCounters c;
    c.id = l->id;
    c.upstream = l->upstream;
    c.forward_in = l->forward_in;
    c.forward_out = l->forward_out;
    c.backward_in = l->backward_in;
    c.backward_out = l->backward_out;
    c.severed = l->severed;
    r.connections.push_back(c);
  }
  r.accepted = accepted_;
  r.upstream_failures = upstream_failures_;
  r.severed = severed_;
  return r;
}

// ---- proxy ----

struct Proxy::Relay {
  net::Socket accepted;
  std::jthread thread;
  std::atomic<bool> done{false};
  std::shared_ptr<ProxyGroup::Link> link;
};

Proxy::Proxy(wire::DataEndpoint upstream, ImpairmentProfile profile, std::string listen_host,
             std::uint16_t listen_port)
    : Proxy(std::move(upstream), std::make_shared<ProxyGroup>(std::move(profile)), std::move(listen_host),
            listen_port) {}

Proxy::Proxy(wire::DataEndpoint upstream, std::shared_ptr<ProxyGroup> group, std::string listen_host,
             std::uint16_t listen_port)
    : upstream_(std::move(upstream)),
      group_(std::move(group)),
      listen_host_(std::move(listen_host)),
      listen_port_(listen_port) {}

Proxy::~Proxy() { stop(); }

void Proxy::start() {
  net::ignore_sigpipe();
  listener_ = net::Listener::bind(listen_host_, listen_port_, group_->profile().socket_buffer);
  acceptor_ = std::jthread([this] { accept_loop(); });
}

void Proxy::stop() {
  if (stopping_.exchange(true)) return;
  listener_.shutdown();
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::unique_ptr<Relay>> relays;
  {
    std::lock_guard lock(relays_mu_);
    relays.swap(relays_);
  }
  for (auto& r : relays) {
    r->accepted.shutdown();
    if (r->link) r->link->shutdown();
  }
  relays.clear();
  listener_.close();
}

wire::DataEndpoint Proxy::endpoint() const { return listener_.endpoint(); }

void Proxy::accept_loop() {
  while (!stopping_) {
    auto sock = listener_.accept(Millis{250});
    {
      std::lock_guard lock(relays_mu_);
      std::erase_if(relays_, [](const auto& r) { return r->done.load(); });
    }
    if (!sock) continue;
    auto entry = std::make_unique<Relay>();
    entry->accepted = std::move(*sock);
    auto* raw = entry.get();
    std::lock_guard lock(relays_mu_);
    if (stopping_) return;
    relays_.push_back(std::move(entry));
    raw->thread = std::jthread([this, raw] { relay(raw); });
  }
}

void Proxy::relay(Relay* r) {
  const auto& profile = group_->profile();
  if (profile.accept_delay.count() > 0) std::this_thread::sleep_for(profile.accept_delay);
  net::Socket upstream;
  try {
    upstream = net::Socket::connect(upstream_, Millis{5000}, profile.socket_buffer);
  } catch (const Error&) {
    group_->upstream_failures_.fetch_add(1);
    r->accepted.close();
    r->done = true;
    return;
  }
  auto link = group_->open_link(upstream_.to_string());
  link->client = std::move(r->accepted);
  link->server = std::move(upstream);
  if (profile.socket_buffer) link->client.set_buffer_size(profile.socket_buffer);
  {
    std::lock_guard lock(relays_mu_);
    r->link = link;
  }
  if (stopping_) link->shutdown();

  auto pump = [this, &link](net::Socket& from, net::Socket& to, std::atomic<std::uint64_t>& in,
                            std::atomic<std::uint64_t>& out) {
    std::vector<std::byte> buf(kRelayChunk);
    try {
      while (true) {
        const auto allowed = group_->limit_for(*link, buf.size());
        if (!allowed) {
          link->sever();
          return;
        }
        const auto n = from.read_some(std::span(buf.data(), static_cast<std::size_t>(*allowed)));
        if (n == 0) {
          to.shutdown_write();
          return;
        }
        in.fetch_add(n);
        link->bucket.acquire(n);
        group_->aggregate_.acquire(n);
        to.write_all(std::span<const std::byte>(buf.data(), n));
        out.fetch_add(n);
        group_->relayed(n);
      }
    } catch (const Error&) {
      link->shutdown();
    }
  };
  std::jthread back([&] { pump(link->server, link->client, link->backward_in, link->backward_out); });
  pump(link->client, link->server, link->forward_in, link->forward_out);
  back.join();
  link->close();
  link->client.close();
  link->server.close();
  r->done = true;
}

// ---- pool ----

ProxyPool::ProxyPool(ImpairmentProfile profile) : group_(std::make_shared<ProxyGroup>(std::move(profile))) {}

ProxyPool::~ProxyPool() { stop(); }

wire::DataEndpoint ProxyPool::route(const wire::DataEndpoint& upstream) {
  std::lock_guard lock(mu_);
  auto& p = proxies_[upstream];
  if (!p) {
    p = std::make_unique<Proxy>(upstream, group_);
    p->start();
  }
  return p->endpoint();
}

std::function<wire::DataEndpoint(const wire::DataEndpoint&)> ProxyPool::router() {
  return [this](const wire::DataEndpoint& ep) { return route(ep); };
}

void ProxyPool::stop() {
  std::lock_guard lock(mu_);
  for (auto& [ep, p] : proxies_) p->stop();
}

// ---- bench ----

BenchConfig BenchConfig::from_json(const json& j) {
  BenchConfig c;
  try {
    c.parallelism = j.value("parallelism", c.parallelism);
    c.file_size = j.value("file_size", c.file_size);
    c.direction = j.value("direction", c.direction);
    c.block_size = j.value("block_size", c.block_size);
    c.buffer_size = j.value("buffer_size", c.buffer_size);
    c.workdir = j.value("workdir", c.workdir);
  } catch (const json::exception& e) {
    fail(Errc::InvalidSpec, std::string("bench: ") + e.what());
  }
  if (c.direction != "get" && c.direction != "put") fail(Errc::InvalidSpec, "direction must be get or put");
  if (c.parallelism.empty()) fail(Errc::InvalidSpec, "empty parallelism sweep");
  return c;
}

std::string bench_csv_header() { return "parallelism,bytes,seconds,throughput_bytes_per_s,verified,connections"; }

std::string bench_csv_row(const BenchRow& row) {
  std::ostringstream ss;
  ss << row.parallelism << ',' << row.bytes << ',' << row.seconds << ',' << row.throughput << ','
     << (row.verified ? "true" : "false") << ',' << row.connections;
  return ss.str();
}

BenchResult bench_streams(const BenchConfig& config, const ImpairmentProfile& profile,
                          const std::function<void(const BenchRow&)>& on_row) {
  BenchResult result;
  Workdir work(config.workdir);
  const auto root = work.path() / "root";
  fs::create_directories(root);
  const auto source = (config.direction == "get" ? root : work.path()) / "bench.bin";
  write_random_file(source, config.file_size, 42);
  const auto want = crypto::file_sha256(source.string());

  LocalServer srv(root, data::kCheckpointBytes);
  ProxyPool pool(profile);
  client::ClientOptions opts;
  opts.route = pool.router();
  opts.cache_channels = false;
  opts.retries = 0;
  client::Client client(srv.credentials(), opts);

  for (const auto p : config.parallelism) {
    BenchRow row;
    row.parallelism = p;
    row.bytes = config.file_size;
    data::TransferSpec spec;
    spec.parallelism = p;
    spec.block_size = config.block_size;
    spec.buffer_size = config.buffer_size;
    const auto before = pool.report().accepted;
    try {
      const auto t0 = Clock::now();
      fs::path landed;
      if (config.direction == "get") {
        landed = work.path() / "landed.bin";
        fs::remove(landed);
        client.get(srv.url("/bench.bin"), landed.string(), spec);
      } else {
        landed = root / ("put-" + std::to_string(p) + ".bin");
        client.put(source.string(), srv.url("/" + landed.filename().string()), spec);
      }
      row.seconds = seconds_since(t0);
      row.throughput = row.seconds > 0 ? static_cast<double>(row.bytes) / row.seconds : 0;
      row.verified = crypto::file_sha256(landed.string()) == want;
      fs::remove(landed);
    } catch (const Error& e) {
      result.error = "P=" + std::to_string(p) + ": " + e.what();
      break;
    }
    row.connections = pool.report().accepted - before;
    result.rows.push_back(row);
    if (on_row) on_row(row);
    if (!row.verified) {
      result.error = "P=" + std::to_string(p) + ": checksum mismatch";
      break;
    }
  }
  return result;
}

// ---- faults ----

FaultConfig FaultConfig::from_json(const json& j) {
  FaultConfig c;
  try {
    c.file_size = j.value("file_size", c.file_size);
    c.parallelism = j.value("parallelism", c.parallelism);
    c.kills = j.value("kills", c.kills);
    c.block_size = j.value("block_size", c.block_size);
    c.buffer_size = j.value("buffer_size", c.buffer_size);
    c.marker_bytes = j.value("marker_bytes", c.marker_bytes);
    c.workdir = j.value("workdir", c.workdir);
  } catch (const json::exception& e) {
    fail(Errc::InvalidSpec, std::string("faults: ") + e.what());
  }
  for (const auto k : c.kills) {
    if (k <= 0 || k >= 1) fail(Errc::InvalidSpec, "kill points must be fractions in (0, 1)");
  }
  return c;
}

json FaultReport::to_json() const {
  json m = json::array();
  for (const auto& s : markers) m.push_back({{"at", s.at}, {"received", s.received}});
  json j = {{"completed", completed},
            {"checksum_ok", checksum_ok},
            {"file_size", file_size},
            {"payload_sent", payload_sent},
            {"retransmitted", retransmitted},
            {"kills_applied", kills_applied},
            {"attempts", attempts},
            {"seconds", seconds},
            {"markers", m}};
  if (error) j["error"] = *error;
  return j;
}

FaultReport fault_suite(const FaultConfig& config, const ImpairmentProfile& profile) {
  FaultReport report;
  report.file_size = config.file_size;
  Workdir work(config.workdir);
  const auto root = work.path() / "root";
  fs::create_directories(root);
  const auto source = work.path() / "fault.bin";
  write_random_file(source, config.file_size, 7);

  auto impaired = profile;
  for (const auto k : config.kills) {
    impaired.sever_all_at.push_back(static_cast<std::uint64_t>(k * static_cast<double>(config.file_size)));
  }
  LocalServer srv(root, config.marker_bytes);
  ProxyPool pool(impaired);

  std::mutex mu;
  const auto t0 = Clock::now();
  client::ClientOptions opts;
  opts.route = pool.router();
  opts.cache_channels = false;
  opts.retries = static_cast<int>(config.kills.size()) + 3;
  opts.on_progress = [&](const data::TransferProgress& p) {
    std::lock_guard lock(mu);
    report.markers.push_back({seconds_since(t0), p.received.total_bytes()});
  };
  client::Client client(srv.credentials(), opts);

  data::TransferSpec spec;
  spec.direction = data::Direction::Put;
  spec.parallelism = config.parallelism;
  spec.block_size = config.block_size;
  spec.buffer_size = config.buffer_size;
  try {
    const auto job = client.put(source.string(), srv.url("/fault.bin"), spec);
    report.completed = job.state == client::JobState::Complete;
    report.attempts = job.attempts;
    report.payload_sent = job.payload_bytes;
  } catch (const Error& e) {
    report.error = e.what();
    report.payload_sent = client.stats().payload_sent;
  }
  report.seconds = seconds_since(t0);
  report.retransmitted = report.payload_sent > config.file_size ? report.payload_sent - config.file_size : 0;
  report.kills_applied = pool.group().sever_events();
  if (report.completed) {
    report.checksum_ok = crypto::file_sha256(source.string()) == crypto::file_sha256((root / "fault.bin").string());
  }
  return report;
}

}  // namespace gftp::harness
