#include <doctest.h>

#include <random>

#include "catalog_model.hpp"
#include "fixtures.hpp"
#include "gftp/catalog.hpp"
#include "gftp/errors.hpp"

using namespace fixtures;
using namespace gftp::catalog;
using gftp::Errc;
using gftp::testing::CatalogModel;
using gftp::testing::CatalogOpGenerator;

namespace {

CatalogModel::Outcome run(Catalog& c, const json& req) {
  try {
    return {std::nullopt, c.apply(req)};
  } catch (const gftp::Error& e) {
    return {e.code(), nullptr};
  }
}

std::string describe(const std::optional<Errc>& e) { return e ? std::string(gftp::errc_name(*e)) : "ok"; }

void copy_prefix(const fs::path& from, const fs::path& to, std::size_t bytes) {
  std::ifstream in(from, std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::ofstream out(to, std::ios::binary | std::ios::trunc);
  out << text.substr(0, std::min(bytes, text.size()));
}

}  // namespace

TEST_CASE("check_name rejects empty, long, CR/LF and bad UTF-8") {
  CHECK_NOTHROW(check_name("a"));
  CHECK_NOTHROW(check_name("caf\xc3\xa9"));
  CHECK_NOTHROW(check_name(std::string(1024, 'x')));
  for (const std::string bad : {std::string(), std::string(1025, 'x'), std::string("a\nb"), std::string("a\rb"),
                                std::string("\xc3"), std::string("\xc0\x80"), std::string("\xed\xa0\x80")}) {
    CHECK_THROWS_AS(check_name(bad), gftp::Error);
  }
}

TEST_CASE("join_url puts one slash at each join") {
  Location l;
  l.protocol = "gftp";
  l.host = "h";
  l.port = 2811;
  for (const auto* prefix : {"data", "/data", "data/", "//data//"}) {
    l.path_prefix = prefix;
    CHECK(join_url(l, "f") == "gftp://h:2811/data/f");
    CHECK(join_url(l, "/f") == "gftp://h:2811/data/f");
  }
  l.path_prefix = "";
  l.port = 0;
  CHECK(join_url(l, "f") == "gftp://h/f");
}

TEST_CASE("catalog matches the reference model on random op sequences") {
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    Catalog cat;
    CatalogModel model;
    CatalogOpGenerator gen(seed);
    for (int i = 0; i < 60; ++i) {
      const auto req = gen.next();
      const auto want = model.apply(req);
      const auto got = run(cat, req);
      INFO("seed " << seed << " step " << i << " " << req.dump());
      REQUIRE(describe(got.error) == describe(want.error));
      REQUIRE(got.result == want.result);
      REQUIRE(cat.subset_invariant_holds());
    }
    REQUIRE(cat.to_json() == model.to_json());
    REQUIRE(Catalog::from_json(cat.to_json()) == cat);
  }
}

TEST_CASE("find_locations agrees with a brute-force filter") {
  std::mt19937_64 rng(7);
  Catalog cat;
  cat.create_collection("c");
  std::vector<std::string> names;
  for (int i = 0; i < 40; ++i) names.push_back("f" + std::to_string(i));
  cat.attr_add({EntryKind::Collection, "", "c"}, "filename", names);
  std::map<std::string, std::set<std::string>> held;
  for (int l = 0; l < 12; ++l) {
    Location loc;
    loc.collection = "c";
    loc.name = "l" + std::to_string(l);
    loc.protocol = "gftp";
    loc.host = "h" + std::to_string(l);
    cat.create_location(loc);
    std::vector<std::string> mine;
    for (const auto& n : names) {
      if (rng() % 3 == 0) mine.push_back(n);
    }
    cat.attr_add({EntryKind::Location, "c", loc.name}, "filename", mine);
    held[loc.name] = {mine.begin(), mine.end()};
  }
  for (int q = 0; q < 500; ++q) {
    std::vector<std::string> query;
    const auto k = rng() % 4;
    for (std::uint64_t i = 0; i < k; ++i) query.push_back("f" + std::to_string(rng() % 44));
    std::vector<std::string> expect;
    for (const auto& [name, files] : held) {
      bool all = true;
      for (const auto& f : query) all = all && files.count(f);
      if (all) expect.push_back(name);
    }
    std::vector<std::string> got;
    for (const auto* l : cat.find_locations("c", query).locations) got.push_back(l->name);
    CHECK(got == expect);
  }
}

TEST_CASE("location filenames must be a subset of the collection") {
  Catalog cat;
  cat.create_collection("c");
  cat.attr_add({EntryKind::Collection, "", "c"}, "filename", {"a", "b"});
  cat.create_location({"c", "l", "gftp", "h", 1, "/p", {}, {}});
  try {
    cat.attr_add({EntryKind::Location, "c", "l"}, "filename", {"a", "zz"});
    FAIL("expected SubsetViolation");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::SubsetViolation);
  }
  CHECK(cat.location("c", "l").filenames.empty());  // all-or-nothing
  cat.attr_add({EntryKind::Location, "c", "l"}, "filename", {"a", "b"});
  cat.attr_delete({EntryKind::Collection, "", "c"}, "filename", {"a"});
  CHECK(cat.location("c", "l").filenames == std::set<std::string>{"b"});
  CHECK(cat.subset_invariant_holds());
}

TEST_CASE("duplicate storage is detected through prefix normalisation") {
  Catalog cat;
  cat.create_collection("c");
  cat.create_location({"c", "l1", "gftp", "h", 1, "/data/", {}, {}});
  try {
    cat.create_location({"c", "l2", "gftp", "h", 1, "data", {}, {}});
    FAIL("expected DuplicateStorage");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::DuplicateStorage);
  }
  CHECK_NOTHROW(cat.create_location({"c", "l2", "gftp", "h", 2, "data", {}, {}}));
}

TEST_CASE("store replays its journal and snapshot") {
  TempDir dir;
  CatalogModel model;
  CatalogOpGenerator gen(99);
  {
    Store store(dir.path() / "cat", SyncMode::Never, 37);
    for (int i = 0; i < 400; ++i) {
      const auto req = gen.next();
      model.apply(req);
      try {
        store.execute(req);
      } catch (const gftp::Error&) {
      }
    }
    CHECK(store.copy().to_json() == model.to_json());
  }
  Store reopened(dir.path() / "cat", SyncMode::Never, 37);
  CHECK(reopened.copy().to_json() == model.to_json());
}

TEST_CASE("a truncated or corrupted journal recovers to a prefix") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 60; ++trial) {
    TempDir dir;
    std::vector<json> states{CatalogModel{}.to_json()};
    CatalogModel model;
    CatalogOpGenerator gen(1000 + trial);
    {
      Store store(dir.path() / "a", SyncMode::Never);
      for (int i = 0; i < 50; ++i) {
        const auto req = gen.next();
        const auto out = model.apply(req);
        try {
          store.execute(req);
        } catch (const gftp::Error&) {
        }
        if (!out.error && CatalogModel::mutation(req["op"])) states.push_back(model.to_json());
      }
    }
    const auto journal = dir.path() / "a" / "journal.log";
    const auto size = fs::file_size(journal);
    fs::create_directories(dir.path() / "b");
    copy_prefix(journal, dir.path() / "b" / "journal.log", rng() % (size + 1));
    if (trial % 3 == 0) {
      // Flip one byte somewhere past the header.
      std::fstream f(dir.path() / "b" / "journal.log", std::ios::in | std::ios::out | std::ios::binary);
      const auto len = fs::file_size(dir.path() / "b" / "journal.log");
      if (len > 20) {
        f.seekp(static_cast<std::streamoff>(18 + rng() % (len - 18)));
        f.put('#');
      }
    }
    Store recovered(dir.path() / "b", SyncMode::Never);
    const auto seq = recovered.sequence();
    REQUIRE(seq < states.size());
    CHECK(recovered.copy().to_json() == states[seq]);
    // The repaired journal accepts new records and replays them.
    recovered.execute({{"op", "create_lfile"}, {"args", {{"name", "after-crash"}}}});
  }
}

TEST_CASE("service serves requests and scopes locks to connections") {
  TempDir dir;
  Store store(dir.path() / "cat", SyncMode::Never);
  Service svc(store, "127.0.0.1", 0);
  svc.start();
  const gftp::wire::DataEndpoint ep{"127.0.0.1", svc.port()};
  RemoteHandle a(ep), b(ep);
  CHECK(a.call("ping", json::object()) == "pong");
  a.call("create_collection", {{"name", "c"}});
  try {
    b.call("create_collection", {{"name", "c"}});
    FAIL("expected Duplicate");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::Duplicate);
  }
  CHECK(list_collection(b, "c").name == "c");

  a.call("lock", {{"name", "c"}});
  CHECK_NOTHROW(a.call("lock", {{"name", "c"}}));
  try {
    b.call("lock", {{"name", "c"}});
    FAIL("expected Busy");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::Busy);
  }
  {
    RemoteHandle c(ep);
    c.call("lock", {{"name", "other"}});
  }
  a.call("unlock", {{"name", "c"}});
  CHECK_NOTHROW(b.call("lock", {{"name", "c"}}));

  // Locks die with their connection.
  bool acquired = false;
  for (int i = 0; i < 50 && !acquired; ++i) {
    try {
      b.call("lock", {{"name", "other"}});
      acquired = true;
    } catch (const gftp::Error& e) {
      REQUIRE(e.code() == Errc::Busy);
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }
  CHECK(acquired);
  svc.stop();
  try {
    a.call("ping", json::object());
    FAIL("expected CatalogUnavailable");
  } catch (const gftp::Error& e) {
    CHECK(e.code() == Errc::CatalogUnavailable);
  }
}
