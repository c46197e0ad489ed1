#include <benchmark/benchmark.h>

#include <cstdio>
#include <random>

#include "gftp/catalog.hpp"

using namespace gftp::catalog;

namespace {

std::vector<std::string> filenames(std::size_t n) {
  std::vector<std::string> out;
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "run-%06zu.nc", i);
    out.push_back(buf);
  }
  return out;
}

Catalog populated(std::size_t files, std::size_t locations) {
  Catalog cat;
  cat.create_collection("c");
  const auto names = filenames(files);
  cat.attr_add({EntryKind::Collection, "", "c"}, std::string(kFilenameAttr), names);
  for (std::size_t l = 0; l < locations; ++l) {
    const auto name = "site" + std::to_string(l);
    cat.create_location({"c", name, "gftp", "host" + std::to_string(l), 2811, "/data", {}, {}});
    cat.attr_add({EntryKind::Location, "c", name}, std::string(kFilenameAttr), names);
  }
  return cat;
}

}  // namespace

static void BM_CreateDeleteCollection(benchmark::State& state) {
  const auto names = filenames(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    Catalog cat;
    cat.create_collection("bulk");
    cat.attr_add({EntryKind::Collection, "", "bulk"}, std::string(kFilenameAttr), names);
    cat.delete_collection("bulk");
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_CreateDeleteCollection)->Arg(1000)->Arg(100000)->Unit(benchmark::kMillisecond);

static void BM_ListCollection(benchmark::State& state) {
  const auto cat = populated(static_cast<std::size_t>(state.range(0)), 0);
  const json req = {{"op", "list_collection"}, {"args", {{"name", "c"}}}};
  for (auto _ : state) benchmark::DoNotOptimize(const_cast<Catalog&>(cat).apply(req).dump());
}
BENCHMARK(BM_ListCollection)->Arg(1000)->Arg(100000)->Unit(benchmark::kMillisecond);

static void BM_FindLocations(benchmark::State& state) {
  const auto cat = populated(10000, static_cast<std::size_t>(state.range(0)));
  const auto names = filenames(10000);
  std::mt19937_64 rng(1);
  std::vector<std::string> query;
  for (int i = 0; i < 50; ++i) query.push_back(names[rng() % names.size()]);
  for (auto _ : state) benchmark::DoNotOptimize(cat.find_locations("c", query));
}
BENCHMARK(BM_FindLocations)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Arg(64);

static void BM_JournaledMutation(benchmark::State& state) {
  const auto dir = std::filesystem::temp_directory_path() / "gftp-bench-journal";
  std::filesystem::remove_all(dir);
  {
    Store store(dir, state.range(0) ? SyncMode::Always : SyncMode::Never);
    store.execute({{"op", "create_collection"}, {"args", {{"name", "c"}}}});
    std::uint64_t i = 0;
    for (auto _ : state) {
      json args = {{"entry", {{"kind", "collection"}, {"name", "c"}}}, {"attr", "filename"}};
      args["values"] = json::array({"f" + std::to_string(i++)});
      store.execute({{"op", "attr_add"}, {"args", args}});
    }
  }
  std::filesystem::remove_all(dir);
}
BENCHMARK(BM_JournaledMutation)->Arg(0)->Arg(1);

BENCHMARK_MAIN();
