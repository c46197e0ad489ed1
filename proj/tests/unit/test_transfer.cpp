#include <doctest.h>

#include "fixtures.hpp"
#include "gftp/errors.hpp"
#include "gftp/harness.hpp"
#include "wire_gen.hpp"

using namespace fixtures;
using gftp::Errc;
using gftp::client::Client;

TEST_CASE("get and put round-trip a file") {
  TempDir dir;
  const auto secret = test_secret();
  fs::create_directories(dir.path() / "srv");
  TestServer srv(dir.path() / "srv", secret);
  const auto data = random_bytes(3 * 1024 * 1024 + 17, 1);
  write_file((dir.path() / "srv" / "a.bin").string(), data);

  Client client(credentials_for(secret));
  gftp::data::TransferSpec spec;
  spec.parallelism = 4;
  const auto job = client.get(srv.url("/a.bin"), dir / "a.local", spec);
  CHECK(job.state == gftp::client::JobState::Complete);
  CHECK(read_file(dir / "a.local") == data);

  client.put(dir / "a.local", srv.url("/sub/b.bin"), spec);
  CHECK(read_file((dir.path() / "srv" / "sub" / "b.bin").string()) == data);
}

TEST_CASE("partial gets return exactly the requested slice") {
  TempDir dir;
  const auto secret = test_secret();
  TestServer srv(dir.path(), secret);
  const auto data = random_bytes(2 * 1024 * 1024 + 333, 2);
  write_file(dir / "s.bin", data);
  Client client(credentials_for(secret));
  gftp::testing::Rng rng(31);
  for (int i = 0; i < 40; ++i) {
    const auto off = rng.below(data.size() + 1);
    const auto len = rng.below(data.size() - off + 1);
    gftp::data::TransferSpec spec;
    spec.parallelism = static_cast<std::uint32_t>(rng.between(1, 4));
    const auto got = client.partial_get(srv.url("/s.bin"), off, len, spec);
    REQUIRE(got.size() == len);
    CHECK(std::equal(got.begin(), got.end(), data.begin() + static_cast<std::ptrdiff_t>(off)));
  }
  try {
    client.partial_get(srv.url("/s.bin"), data.size() - 10, 11);
    FAIL("range past the end accepted");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::RangeError);
  }
}

TEST_CASE("striped get assembles blocks from every node") {
  TempDir dir;
  const auto secret = test_secret();
  StripedServers grid(dir.path(), secret, 3);
  const auto data = random_bytes(5 * 1024 * 1024 + 5, 3);
  write_file(dir / "big.bin", data);
  Client client(credentials_for(secret));
  gftp::data::TransferSpec spec;
  spec.parallelism = 2;
  spec.stripes = grid.endpoints();
  const auto job = client.get(grid.url("/big.bin"), dir / "out.bin", spec);
  CHECK(job.state == gftp::client::JobState::Complete);
  CHECK(read_file(dir / "out.bin") == data);
  CHECK(client.stats().data_connects == 6);
  std::uint64_t served = 0;
  for (const auto& m : grid.members) {
    const auto sent = m->server->stats().payload_sent.load();
    CHECK(sent > 0);
    served += sent;
  }
  CHECK(served == data.size());
}

TEST_CASE("third-party copy moves no payload through the client") {
  TempDir dir;
  const auto secret = test_secret();
  fs::create_directories(dir.path() / "a");
  fs::create_directories(dir.path() / "b");
  TestServer a(dir.path() / "a", secret);
  TestServer b(dir.path() / "b", secret);
  const auto data = random_bytes(3 * 1024 * 1024 + 1, 4);
  write_file((dir.path() / "a" / "x").string(), data);
  gftp::client::ClientOptions opts;
  opts.verify = true;
  Client client(credentials_for(secret), opts);
  gftp::data::TransferSpec spec;
  spec.parallelism = 3;
  const auto job = client.third_party(a.url("/x"), b.url("/y"), spec);
  CHECK(job.state == gftp::client::JobState::Complete);
  CHECK(read_file((dir.path() / "b" / "y").string()) == data);
  CHECK(client.stats().payload_sent == 0);
  CHECK(client.stats().payload_received == 0);
  CHECK(client.checksum(a.url("/x"), 0, data.size()) == client.checksum(b.url("/y"), 0, data.size()));
  CHECK_THROWS_AS(client.third_party(a.url("/x"), a.url("/x")), gftp::Error);
}

TEST_CASE("authentication and missing files map to their errors") {
  TempDir dir;
  const auto secret = test_secret();
  TestServer srv(dir.path(), secret);
  write_file(dir / "f", random_bytes(10, 1));
  Client wrong(credentials_for(test_secret()));
  try {
    wrong.size(srv.url("/f"));
    FAIL("wrong secret accepted");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::AuthFailed);
  }
  Client client(credentials_for(secret));
  try {
    client.get(srv.url("/nope"), dir / "nope");
    FAIL("missing file fetched");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::RemoteMissing);
  }
  CHECK(client.size(srv.url("/f")) == 10);
}

TEST_CASE("cached data channels cut connection setups for repeated transfers") {
  TempDir dir;
  const auto secret = test_secret();
  TestServer srv(dir.path(), secret);
  const auto data = random_bytes(256 * 1024, 5);
  write_file(dir / "f", data);
  auto run = [&](bool cache) {
    gftp::client::ClientOptions opts;
    opts.cache_channels = cache;
    Client client(credentials_for(secret), opts);
    gftp::data::TransferSpec spec;
    spec.parallelism = 2;
    for (int i = 0; i < 8; ++i) {
      client.get(srv.url("/f"), dir / ("o" + std::to_string(i)), spec);
      CHECK(read_file(dir / ("o" + std::to_string(i))) == data);
    }
    return client.stats().data_connects.load() + client.stats().control_connects.load();
  };
  const auto cold = run(false);
  const auto warm = run(true);
  CHECK(cold == 8 * 2 + 1);
  CHECK(warm <= 2 + 1 + 2);
}

TEST_CASE("an interrupted get resumes from its restart file") {
  TempDir dir;
  const auto secret = test_secret();
  TestServer srv(dir.path(), secret);
  const std::uint64_t size = 12 * 1024 * 1024;
  const auto data = random_bytes(size, 6);
  write_file(dir / "f", data);

  gftp::harness::ImpairmentProfile cut;
  cut.sever_all_at = {size / 2};
  gftp::harness::ProxyPool pool(cut);
  gftp::client::ClientOptions opts;
  opts.route = pool.router();
  opts.retries = 0;
  opts.cache_channels = false;
  opts.checkpoint_bytes = 1024 * 1024;
  gftp::data::TransferSpec spec;
  spec.parallelism = 2;
  spec.block_size = 64 * 1024;
  {
    Client client(credentials_for(secret), opts);
    try {
      client.get(srv.url("/f"), dir / "out", spec);
      FAIL("transfer survived the cut");
    } catch (const gftp::Error& e) {
      CHECK(e.code() == Errc::Interrupted);
    }
  }
  const auto st = gftp::data::load_restart(gftp::data::restart_path_for(dir / "out"));
  REQUIRE(st);
  CHECK(st->received.total_bytes() > 0);
  CHECK(st->received.total_bytes() < size);

  opts.route = {};
  Client client(credentials_for(secret), opts);
  const auto job = client.get(srv.url("/f"), dir / "out", spec, true);
  CHECK(job.state == gftp::client::JobState::Complete);
  CHECK(read_file(dir / "out") == data);
  CHECK(job.payload_bytes == size - st->received.total_bytes());
  CHECK(!fs::exists(gftp::data::restart_path_for(dir / "out")));
}

TEST_CASE("a restart file for another transfer is refused") {
  TempDir dir;
  const auto secret = test_secret();
  TestServer srv(dir.path(), secret);
  write_file(dir / "f", random_bytes(100000, 7));
  gftp::data::RestartState st;
  st.url = "gftp://elsewhere:1/g";
  st.target = {0, 100000};
  st.received = gftp::RangeSet{{0, 50000}};
  st.spec_digest = "not-this-one";
  st.direction = "get";
  st.local_path = dir / "out";
  gftp::data::save_restart(gftp::data::restart_path_for(dir / "out"), st);
  Client client(credentials_for(secret));
  try {
    client.get(srv.url("/f"), dir / "out", {}, true);
    FAIL("stale restart accepted");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::StaleRestart);
  }
}
