#include <doctest.h>

#include "fixtures.hpp"
#include "gftp/catalog.hpp"
#include "gftp/errors.hpp"
#include "gftp/replica.hpp"

using namespace fixtures;
using gftp::Errc;
using namespace gftp::catalog;
using gftp::replica::ReplicaManager;
using gftp::replica::ReplicaOptions;
using gftp::replica::Step;

namespace {

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const gftp::Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::ProtocolError;
}

// Two storage servers registered as locations "full" and "part" of collection "c".
struct Grid {
  Grid() : store(dir.path() / "cat", SyncMode::Never), handle(store), client(credentials_for(secret)) {
    fs::create_directories(dir.path() / "a" / "data");
    fs::create_directories(dir.path() / "b" / "data");
    a = std::make_unique<TestServer>(dir.path() / "a", secret);
    b = std::make_unique<TestServer>(dir.path() / "b", secret);
    handle.call("create_collection", {{"name", "c"}});
    for (auto [name, srv] : {std::pair{"full", a.get()}, std::pair{"part", b.get()}}) {
      handle.call("create_location", {{"collection", "c"},
                                      {"name", name},
                                      {"protocol", "gftp"},
                                      {"host", "127.0.0.1"},
                                      {"port", srv->server->port()},
                                      {"path_prefix", "/data"}});
    }
  }
  std::string at(const char* side, const std::string& name) const {
    return (dir.path() / side / "data" / name).string();
  }

  TempDir dir;
  std::vector<std::byte> secret = test_secret();
  Store store;
  LocalHandle handle;
  gftp::client::Client client;
  std::unique_ptr<TestServer> a, b;
};

}  // namespace

TEST_CASE("register_files is all-or-nothing and idempotent") {
  Grid g;
  for (const auto* n : {"x", "y", "z"}) write_file(g.at("a", n), random_bytes(1000, 1));
  ReplicaManager rm(g.handle, g.client);

  CHECK(code_of([&] { rm.register_files("c", "full", {"x", "missing", "y"}); }) == Errc::MissingOnStorage);
  CHECK(list_collection(g.handle, "c").filenames.empty());

  rm.register_files("c", "full", {"x", "y", "z"});
  const auto before = g.store.copy();
  CHECK(get_location(g.handle, "c", "full").filenames == std::set<std::string>{"x", "y", "z"});
  rm.register_files("c", "full", {"x", "y", "z"});
  CHECK(g.store.copy() == before);
}

TEST_CASE("copy_file moves data before updating the destination") {
  Grid g;
  const auto data = random_bytes(300000, 2);
  write_file(g.at("a", "f"), data);
  ReplicaOptions opts;
  opts.verify_checksum = true;
  ReplicaManager rm(g.handle, g.client, opts);
  rm.register_files("c", "full", {"f"});

  CHECK(code_of([&] { rm.copy_file("c", "f", "part", "full"); }) == Errc::NotAtSource);
  CHECK(code_of([&] { rm.copy_file("c", "f", "full", "nowhere"); }) == Errc::NotFound);

  const auto report = rm.copy_file("c", "f", "full", "part");
  CHECK(report.verified);
  CHECK(report.bytes_moved == data.size());
  CHECK(read_file(g.at("b", "f")) == data);
  CHECK(get_location(g.handle, "c", "part").filenames.count("f"));
  CHECK(url_for(g.handle, "c", "part", "f") ==
        "gftp://127.0.0.1:" + std::to_string(g.b->server->port()) + "/data/f");

  const auto again = rm.copy_file("c", "f", "full", "part");
  CHECK(again.already_present);
  CHECK(again.bytes_moved == 0);
}

TEST_CASE("a crash between copy and catalog update leaves an orphan, not a dangling entry") {
  Grid g;
  write_file(g.at("a", "f"), random_bytes(50000, 3));
  ReplicaManager plain(g.handle, g.client);
  plain.register_files("c", "full", {"f"});

  ReplicaOptions crashy;
  crashy.fault = [](Step s) {
    if (s == Step::Verified) gftp::fail(Errc::InjectedCrash, "after verify");
  };
  ReplicaManager rm(g.handle, g.client, crashy);
  CHECK(code_of([&] { rm.copy_file("c", "f", "full", "part"); }) == Errc::InjectedCrash);
  CHECK(get_location(g.handle, "c", "part").filenames.empty());
  const auto rec = plain.reconcile("c", "part", {"f"});
  CHECK(rec.orphans == std::vector<std::string>{"f"});
  CHECK(rec.dangling.empty());

  plain.copy_file("c", "f", "full", "part");
  CHECK(plain.reconcile("c", "part", {"f"}).orphans.empty());
}

TEST_CASE("publish_file creates entries in order and resumes after a crash") {
  Grid g;
  const auto data = random_bytes(123457, 4);
  write_file(g.dir / "local.bin", data);
  write_file((g.dir.path() / "a" / "outside.bin").string(), data);

  for (auto crash_at : {Step::DataCopied, Step::LogicalFileCreated, Step::CollectionUpdated}) {
    const std::string name = "p" + std::to_string(static_cast<int>(crash_at));
    ReplicaOptions crashy;
    crashy.fault = [&](Step s) {
      if (s == crash_at) gftp::fail(Errc::InjectedCrash, std::string(gftp::replica::step_name(s)));
    };
    ReplicaManager rm(g.handle, g.client, crashy);
    CHECK(code_of([&] { rm.publish_file(g.dir / "local.bin", "c", "part", name); }) == Errc::InjectedCrash);
    CHECK(g.store.copy().subset_invariant_holds());
    CHECK(!get_location(g.handle, "c", "part").filenames.count(name));

    ReplicaManager again(g.handle, g.client);
    again.publish_file(g.dir / "local.bin", "c", "part", name);
    CHECK(get_location(g.handle, "c", "part").filenames.count(name));
    const auto lf = logical_file_from_json(g.handle.call("get_lfile", {{"name", name}}));
    CHECK(lf.size == data.size());
    CHECK(lf.attributes.empty());
    CHECK(read_file(g.at("b", name)) == data);
  }

  ReplicaManager rm(g.handle, g.client);
  const auto from_grid = g.a->url("/outside.bin").to_string();
  rm.publish_file(from_grid, "c", "part", "remote");
  CHECK(read_file(g.at("b", "remote")) == data);
  CHECK(code_of([&] { rm.publish_file(from_grid, "c", "part", "remote"); }) == Errc::PublishConflict);
  CHECK(code_of([&] { rm.publish_file(g.dir / "nope", "c", "part", "n2"); }) == Errc::SourceUnreadable);
  CHECK(code_of([&] { rm.publish_file(g.dir / "local.bin", "c", "part", "n3", 5); }) == Errc::TransferFailed);
}

TEST_CASE("operations on the same name are serialized by catalog locks") {
  TempDir dir;
  Store store(dir.path() / "cat", SyncMode::Never);
  Service svc(store, "127.0.0.1", 0);
  svc.start();
  RemoteHandle first({"127.0.0.1", svc.port()});
  RemoteHandle second({"127.0.0.1", svc.port()});
  first.call("lock", {{"name", "c/f"}});
  gftp::client::Client client(gftp::client::Credentials{});
  ReplicaOptions opts;
  opts.lock_timeout = std::chrono::milliseconds(100);
  ReplicaManager rm(second, client, opts);
  CHECK(code_of([&] { rm.register_files("c", "l", {"f"}); }) == Errc::Busy);
  first.call("unlock", {{"name", "c/f"}});
  CHECK(code_of([&] { rm.register_files("c", "l", {"f"}); }) == Errc::NotFound);
}
