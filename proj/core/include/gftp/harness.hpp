#pragma once

// Network impairment for desk-scale experiments: a relaying TCP proxy with
// per-connection and aggregate token-bucket caps, accept delays and
// scheduled disconnects, plus the benchmark and fault runners built on it.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gftp/net.hpp"
#include "gftp/wire.hpp"

namespace gftp::harness {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;
using Millis = std::chrono::milliseconds;

// Sever one connection (by accept order within its proxy group, or every
// connection when unset) once it has relayed at_bytes in total.
struct DisconnectRule {
  std::optional<std::size_t> connection;
  std::uint64_t at_bytes = 0;
};

struct ImpairmentProfile {
  double per_stream_rate = 0;  // bytes/s per connection; 0 = uncapped
  double aggregate_rate = 0;   // bytes/s shared by a proxy group; 0 = uncapped
  Millis accept_delay{0};
  std::size_t socket_buffer = 0;  // SO_SNDBUF/SO_RCVBUF on relayed sockets; 0 = default
  std::vector<DisconnectRule> disconnects;
  // Sever every live connection of the group each time the group's relayed
  // total crosses one of these byte counts.
  std::vector<std::uint64_t> sever_all_at;

  // Throws Error(InvalidSpec).
  void validate() const;
  static ImpairmentProfile from_json(const json& j);
  json to_json() const;
};

// Blocking token bucket; rate 0 never blocks.
class TokenBucket {
 public:
  explicit TokenBucket(double rate, std::uint64_t burst = 64 * 1024);
  void acquire(std::uint64_t bytes);
  double rate() const noexcept { return rate_; }

 private:
  std::mutex mu_;
  double rate_;
  double burst_;
  double tokens_;
  Clock::time_point last_;
};

struct ConnectionCounters {
  std::uint64_t id = 0;
  std::string upstream;
  std::uint64_t forward_in = 0;  // read from the accepted side
  std::uint64_t forward_out = 0;  // written to the upstream side
  std::uint64_t backward_in = 0;
  std::uint64_t backward_out = 0;
  bool severed = false;

  std::uint64_t relayed() const noexcept { return forward_out + backward_out; }
  // Bytes read but never delivered because the connection was cut.
  std::uint64_t residue() const noexcept { return forward_in - forward_out + backward_in - backward_out; }
};

struct ProxyReport {
  std::vector<ConnectionCounters> connections;
  std::uint64_t accepted = 0;
  std::uint64_t upstream_failures = 0;
  std::uint64_t severed = 0;

  std::uint64_t total_in() const;
  std::uint64_t total_out() const;
  json to_json() const;
};

class Proxy;

// State shared by all proxies spliced into one experiment: the profile,
// the aggregate cap, the group byte total and the live-connection registry.
class ProxyGroup {
 public:
  explicit ProxyGroup(ImpairmentProfile profile);
  ~ProxyGroup();

  const ImpairmentProfile& profile() const noexcept { return profile_; }
  void sever_all();
  // How many sever_all_at thresholds have fired.
  std::uint64_t sever_events() const;
  ProxyReport report() const;

 private:
  friend class Proxy;
  struct Link;
  std::shared_ptr<Link> open_link(const std::string& upstream);
  void relayed(std::uint64_t bytes);
  std::optional<std::uint64_t> limit_for(const Link& link, std::uint64_t want) const;

  ImpairmentProfile profile_;
  TokenBucket aggregate_;
  std::atomic<std::uint64_t> total_{0};
  std::atomic<std::uint64_t> accepted_{0};
  std::atomic<std::uint64_t> upstream_failures_{0};
  std::atomic<std::uint64_t> severed_{0};
  mutable std::mutex mu_;
  std::size_t next_threshold_ = 0;
  std::vector<std::shared_ptr<Link>> links_;
};

// Listens on one endpoint and relays every accepted connection to upstream.
class Proxy {
 public:
  Proxy(wire::DataEndpoint upstream, ImpairmentProfile profile, std::string listen_host = "127.0.0.1",
        std::uint16_t listen_port = 0);
  Proxy(wire::DataEndpoint upstream, std::shared_ptr<ProxyGroup> group, std::string listen_host = "127.0.0.1",
        std::uint16_t listen_port = 0);
  ~Proxy();
  Proxy(const Proxy&) = delete;
  Proxy& operator=(const Proxy&) = delete;

  // Throws Error(BindFailure).
  void start();
  void stop();
  wire::DataEndpoint endpoint() const;
  ProxyReport report() const { return group_->report(); }
  ProxyGroup& group() noexcept { return *group_; }

 private:
  struct Relay;
  void accept_loop();
  void relay(Relay* r);

  wire::DataEndpoint upstream_;
  std::shared_ptr<ProxyGroup> group_;
  std::string listen_host_;
  std::uint16_t listen_port_;
  net::Listener listener_;
  std::atomic<bool> stopping_{false};
  std::jthread acceptor_;
  std::mutex relays_mu_;
  std::vector<std::unique_ptr<Relay>> relays_;
};

// Lazily splices a proxy in front of every upstream endpoint it is asked
// to route; plug route() into ClientOptions::route.
class ProxyPool {
 public:
  explicit ProxyPool(ImpairmentProfile profile);
  ~ProxyPool();

  wire::DataEndpoint route(const wire::DataEndpoint& upstream);
  std::function<wire::DataEndpoint(const wire::DataEndpoint&)> router();
  ProxyGroup& group() noexcept { return *group_; }
  ProxyReport report() const { return group_->report(); }
  void stop();

 private:
  std::shared_ptr<ProxyGroup> group_;
  std::mutex mu_;
  std::map<wire::DataEndpoint, std::unique_ptr<Proxy>> proxies_;
};

// ---- experiments ----

struct BenchConfig {
  std::vector<std::uint32_t> parallelism{1, 2, 4, 8};
  std::uint64_t file_size = 64ull << 20;
  std::string direction = "get";  // "get" or "put"
  std::size_t block_size = 256 * 1024;
  std::size_t buffer_size = 0;
  std::string workdir;  // empty = a fresh temporary directory

  static BenchConfig from_json(const json& j);
};

struct BenchRow {
  std::uint32_t parallelism = 0;
  std::uint64_t bytes = 0;
  double seconds = 0;
  double throughput = 0;  // bytes/s
  bool verified = false;
  std::uint64_t connections = 0;
};

// One verified transfer per parallelism value through a ProxyPool using the
// profile. A failure stops the sweep; rows so far are kept and the error is
// returned alongside them.
struct BenchResult {
  std::vector<BenchRow> rows;
  std::optional<std::string> error;
};
BenchResult bench_streams(const BenchConfig& config, const ImpairmentProfile& profile,
                          const std::function<void(const BenchRow&)>& on_row = {});
std::string bench_csv_header();
std::string bench_csv_row(const BenchRow& row);

struct FaultConfig {
  std::uint64_t file_size = 64ull << 20;
  std::uint32_t parallelism = 4;
  std::vector<double> kills{0.25, 0.5, 0.75};  // fractions of file_size relayed
  std::size_t block_size = 256 * 1024;
  std::size_t buffer_size = 256 * 1024;
  std::uint64_t marker_bytes = 8ull << 20;
  std::string workdir;

  static FaultConfig from_json(const json& j);
};

struct MarkerSample {
  double at = 0;  // seconds since start
  std::uint64_t received = 0;
};

struct FaultReport {
  bool completed = false;
  bool checksum_ok = false;
  std::uint64_t file_size = 0;
  std::uint64_t payload_sent = 0;
  std::uint64_t retransmitted = 0;
  std::uint64_t kills_applied = 0;
  int attempts = 0;
  double seconds = 0;
  std::vector<MarkerSample> markers;
  std::optional<std::string> error;

  json to_json() const;
};

// Stores a file through a proxy pool that severs every data channel at the
// configured points, letting the client resume from restart markers.
FaultReport fault_suite(const FaultConfig& config, const ImpairmentProfile& profile);

}  // namespace gftp::harness
