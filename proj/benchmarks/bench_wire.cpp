#include <benchmark/benchmark.h>

#include <algorithm>
#include <random>

#include "gftp/range_set.hpp"
#include "gftp/wire.hpp"

using namespace gftp;

static void BM_ParseCommand(benchmark::State& state) {
  const std::string line = "ERET P 1048576 65536 /data/run 0042/output.nc\r\n";
  for (auto _ : state) benchmark::DoNotOptimize(wire::parse_command(line));
}
BENCHMARK(BM_ParseCommand);

static void BM_ParseMultiLineReply(benchmark::State& state) {
  std::vector<std::string> lines;
  for (int i = 0; i < state.range(0); ++i) lines.push_back("127.0.0.1:" + std::to_string(20000 + i));
  const auto text = wire::render_reply(wire::Reply(229, lines));
  for (auto _ : state) benchmark::DoNotOptimize(wire::parse_reply(text));
}
BENCHMARK(BM_ParseMultiLineReply)->Arg(1)->Arg(8)->Arg(64);

static void BM_EncodeDecodeBlock(benchmark::State& state) {
  const std::vector<std::byte> payload(static_cast<std::size_t>(state.range(0)), std::byte{7});
  for (auto _ : state) {
    const auto enc = wire::encode_block({0, payload.size(), 1 << 20}, payload);
    wire::SpanSource src(enc);
    benchmark::DoNotOptimize(wire::decode_block(src, payload.size()));
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_EncodeDecodeBlock)->Arg(4096)->Arg(256 * 1024);

// Out-of-order block arrivals, as a receiver with P streams sees them.
static void BM_RangeSetInsertShuffled(benchmark::State& state) {
  const auto blocks = static_cast<std::uint64_t>(state.range(0));
  std::vector<std::uint64_t> order(blocks);
  for (std::uint64_t i = 0; i < blocks; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), std::mt19937_64(1));
  for (auto _ : state) {
    RangeSet s;
    for (const auto i : order) s.insert({i * 65536, (i + 1) * 65536});
    benchmark::DoNotOptimize(s.total_bytes());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * blocks));
}
BENCHMARK(BM_RangeSetInsertShuffled)->Arg(1024)->Arg(16384);

static void BM_RangeMarkerRoundTrip(benchmark::State& state) {
  RangeSet s;
  for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(state.range(0)); ++i) s.insert({i * 300, i * 300 + 100});
  for (auto _ : state) benchmark::DoNotOptimize(wire::parse_range_marker(wire::render_range_marker(s)));
}
BENCHMARK(BM_RangeMarkerRoundTrip)->Arg(1)->Arg(32)->Arg(512);

BENCHMARK_MAIN();
