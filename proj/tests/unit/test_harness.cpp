#include <doctest.h>

#include "fixtures.hpp"
#include "gftp/errors.hpp"
#include "gftp/harness.hpp"
#include "gftp/net.hpp"

using namespace fixtures;
using namespace gftp::harness;
using gftp::net::Listener;
using gftp::net::Socket;

namespace {

double elapsed(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// Upstream that echoes (or just drains) one connection and counts what it read.
struct Upstream {
  explicit Upstream(bool echo) : listener(Listener::bind("127.0.0.1", 0)) {
    thread = std::jthread([this, echo] {
      auto s = listener.accept(std::chrono::milliseconds(5000));
      if (!s) return;
      std::vector<std::byte> buf(65536);
      try {
        while (auto n = s->read_some(buf)) {
          received += n;
          if (echo) s->write_all(std::span<const std::byte>(buf.data(), n));
        }
      } catch (const gftp::Error&) {
      }
    });
  }
  gftp::wire::DataEndpoint endpoint() const { return listener.endpoint(); }

  Listener listener;
  std::atomic<std::uint64_t> received{0};
  std::jthread thread;
};

}  // namespace

TEST_CASE("token bucket paces to its rate") {
  TokenBucket bucket(4e6, 64 * 1024);
  const auto t0 = Clock::now();
  for (int i = 0; i < 32; ++i) bucket.acquire(64 * 1024);
  const auto s = elapsed(t0);
  CHECK(s >= 0.45);
  CHECK(s <= 0.75);
}

TEST_CASE("proxy relays bytes unchanged and counts both directions") {
  Upstream up(true);
  Proxy proxy(up.endpoint(), ImpairmentProfile{});
  proxy.start();
  auto s = Socket::connect(proxy.endpoint());
  const auto data = random_bytes(1 << 20, 5);
  std::vector<std::byte> back(data.size());
  std::jthread writer([&] {
    s.write_all(data);
    s.shutdown_write();
  });
  std::size_t got = 0;
  while (got < back.size()) {
    const auto n = s.read_some(std::span(back.data() + got, back.size() - got));
    if (n == 0) break;
    got += n;
  }
  writer.join();
  CHECK(back == data);
  s.close();
  proxy.stop();
  const auto r = proxy.report();
  REQUIRE(r.connections.size() == 1);
  CHECK(r.connections[0].forward_out == data.size());
  CHECK(r.connections[0].backward_out == data.size());
  CHECK(r.connections[0].residue() == 0);
  CHECK(!r.connections[0].severed);
}

TEST_CASE("scheduled disconnect cuts after exactly at_bytes") {
  Upstream up(false);
  ImpairmentProfile profile;
  profile.disconnects.push_back({0, 100000});
  Proxy proxy(up.endpoint(), profile);
  proxy.start();
  auto s = Socket::connect(proxy.endpoint());
  const auto data = random_bytes(1 << 20, 6);
  try {
    s.write_all(data);
  } catch (const gftp::Error&) {
  }
  up.thread.join();
  const auto r = proxy.report();
  REQUIRE(r.connections.size() == 1);
  CHECK(r.connections[0].severed);
  CHECK(r.connections[0].forward_out == 100000);
  // Conservation: what left the proxy is what the destination read.
  CHECK(up.received == r.connections[0].forward_out);
  CHECK(r.connections[0].forward_in == r.connections[0].forward_out + r.connections[0].residue());
}

TEST_CASE("per-stream cap bounds relay throughput") {
  Upstream up(false);
  ImpairmentProfile profile;
  profile.per_stream_rate = 5e6;
  Proxy proxy(up.endpoint(), profile);
  proxy.start();
  auto s = Socket::connect(proxy.endpoint());
  const auto data = random_bytes(2500000, 7);
  const auto t0 = Clock::now();
  s.write_all(data);
  s.shutdown_write();
  up.thread.join();
  const auto secs = elapsed(t0);
  CHECK(up.received == data.size());
  CHECK(secs >= 0.45);
  CHECK(secs <= 0.8);
}

TEST_CASE("profile json round-trips and rejects bad values") {
  ImpairmentProfile p;
  p.per_stream_rate = 1e7;
  p.accept_delay = std::chrono::milliseconds(5);
  p.disconnects.push_back({std::nullopt, 10});
  p.disconnects.push_back({3, 20});
  p.sever_all_at = {5, 9};
  const auto back = ImpairmentProfile::from_json(p.to_json());
  CHECK(back.to_json() == p.to_json());
  CHECK_THROWS_AS(ImpairmentProfile::from_json({{"per_stream_rate", -1}}), gftp::Error);
  CHECK_THROWS_AS(ImpairmentProfile::from_json({{"disconnects", {{{"connection", 0}}}}}), gftp::Error);
}

TEST_CASE("bench sweep yields verified rows") {
  BenchConfig cfg;
  cfg.parallelism = {1, 2};
  cfg.file_size = 4 << 20;
  ImpairmentProfile profile;
  profile.per_stream_rate = 20e6;
  const auto res = bench_streams(cfg, profile);
  REQUIRE(!res.error);
  REQUIRE(res.rows.size() == 2);
  for (const auto& r : res.rows) {
    CHECK(r.verified);
    CHECK(r.connections == r.parallelism);
    CHECK(r.throughput <= 1.15 * 20e6 * r.parallelism);
  }
}

TEST_CASE("fault suite resumes a store through three cuts") {
  FaultConfig cfg;
  cfg.file_size = 24 << 20;
  cfg.parallelism = 2;
  cfg.marker_bytes = 1 << 20;
  ImpairmentProfile profile;
  profile.per_stream_rate = 40e6;
  const auto rep = fault_suite(cfg, profile);
  INFO(rep.to_json().dump());
  CHECK(rep.completed);
  CHECK(rep.checksum_ok);
  CHECK(rep.kills_applied == 3);
  CHECK(rep.retransmitted <= 3ull * cfg.parallelism * (8 << 20));

  FaultConfig clean = cfg;
  clean.kills.clear();
  const auto base = fault_suite(clean, profile);
  CHECK(base.completed);
  CHECK(base.retransmitted == 0);
}
