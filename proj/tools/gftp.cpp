#include <CLI11.hpp>
#include <condition_variable>
#include <fstream>
#include <iostream>
#include <thread>

#include "common.hpp"
#include "gftp/client.hpp"

namespace {

using gftp::client::GridUrl;

// Writes "seconds,bytes,bytes_per_s" once a second while a transfer runs.
class ThroughputCsv {
 public:
  ThroughputCsv(const std::string& path, std::function<std::uint64_t()> bytes)
      : out_(path, std::ios::trunc), bytes_(std::move(bytes)), start_(std::chrono::steady_clock::now()) {
    if (!out_) gftp::fail(gftp::Errc::IoError, "cannot write " + path);
    out_ << "seconds,bytes,bytes_per_s\n";
    thread_ = std::jthread([this](std::stop_token st) { run(st); });
  }
  ~ThroughputCsv() {
    thread_.request_stop();
    cv_.notify_all();
    thread_.join();
    sample();
  }

 private:
  void run(std::stop_token st) {
    std::mutex m;
    std::unique_lock lock(m);
    while (!st.stop_requested()) {
      cv_.wait_for(lock, std::chrono::seconds(1));
      if (!st.stop_requested()) sample();
    }
  }
  void sample() {
    const auto now = std::chrono::steady_clock::now();
    const auto t = std::chrono::duration<double>(now - start_).count();
    const auto b = bytes_();
    const auto dt = t - last_t_;
    out_ << t << "," << b << "," << (dt > 0 ? static_cast<double>(b - last_b_) / dt : 0.0) << "\n";
    last_t_ = t;
    last_b_ = b;
  }

  std::ofstream out_;
  std::function<std::uint64_t()> bytes_;
  std::chrono::steady_clock::time_point start_;
  double last_t_ = 0;
  std::uint64_t last_b_ = 0;
  std::condition_variable_any cv_;
  std::jthread thread_;
};

struct RangeArg {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

RangeArg parse_range(const std::string& text) {
  const auto colon = text.find(':');
  const auto off = gftp::wire::parse_u64(text.substr(0, colon));
  const auto len = colon == std::string::npos ? std::nullopt : gftp::wire::parse_u64(text.substr(colon + 1));
  if (!off || !len) gftp::fail(gftp::Errc::InvalidSpec, "--range wants offset:length");
  return {*off, *len};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gftp: parallel, striped, restartable file transfer client"};
  app.require_subcommand(1);

  std::uint32_t parallelism = 4;
  std::vector<std::string> stripes;
  std::string range_text;
  std::size_t buffer = 0;
  std::size_t block = gftp::wire::kDefaultBlockSize;
  bool resume = false;
  bool verify = false;
  bool no_cache = false;
  std::string csv;
  std::string credentials_path = tools::default_credentials_path();
  auto common = [&](CLI::App* sub) {
    sub->add_option("-P,--parallel", parallelism, "parallel data channels per server")->check(CLI::Range(1, 64));
    sub->add_option("--stripe", stripes, "stripe node host:port; enables striped transfer");
    sub->add_option("--range", range_text, "partial transfer offset:length");
    sub->add_option("--buffer", buffer, "TCP buffer size in bytes (SBUF)");
    sub->add_option("--block", block, "extended block payload size in bytes");
    sub->add_flag("--resume", resume, "continue from the restart file");
    sub->add_flag("--verify", verify, "compare SHA-256 checksums after the transfer");
    sub->add_flag("--no-cache", no_cache, "do not reuse data channels");
    sub->add_option("--csv", csv, "write per-second throughput samples here");
    sub->add_option("--credentials", credentials_path, "credentials file (host:port user hexsecret lines)");
  };

  std::string a, b;
  auto* get = app.add_subcommand("get", "download a gftp:// url to a local file");
  get->add_option("url", a)->required();
  get->add_option("local", b)->required();
  common(get);
  auto* put = app.add_subcommand("put", "upload a local file to a gftp:// url");
  put->add_option("local", a)->required();
  put->add_option("url", b)->required();
  common(put);
  auto* copy = app.add_subcommand("copy", "third-party transfer between two servers");
  copy->add_option("source", a)->required();
  copy->add_option("destination", b)->required();
  common(copy);
  auto* cat = app.add_subcommand("cat", "write a remote file (or --range slice) to stdout");
  cat->add_option("url", a)->required();
  common(cat);
  CLI11_PARSE(app, argc, argv);

  try {
    auto credentials = gftp::client::Credentials::load(credentials_path);
    std::atomic<std::uint64_t> marked{0};
    gftp::client::ClientOptions opts;
    opts.on_progress = [&marked](const gftp::data::TransferProgress& p) { marked = p.received.total_bytes(); };
    opts.verify = verify;
    opts.cache_channels = !no_cache;
    gftp::client::Client client(std::move(credentials), opts);

    gftp::data::TransferSpec spec;
    spec.parallelism = parallelism;
    spec.buffer_size = buffer;
    spec.block_size = block;
    for (const auto& s : stripes) spec.stripes.push_back(gftp::wire::parse_endpoint(s));
    std::optional<RangeArg> range;
    if (!range_text.empty()) range = parse_range(range_text);

    std::unique_ptr<ThroughputCsv> sampler;
    if (!csv.empty()) {
      sampler = std::make_unique<ThroughputCsv>(csv, [&] {
        const auto& st = client.stats();
        return std::max<std::uint64_t>(st.payload_sent + st.payload_received, marked.load());
      });
    }

    gftp::client::TransferJob job;
    if (*get) {
      if (range) {
        gftp::data::File out(b, gftp::data::File::Mode::WriteTruncate);
        client.partial_get(GridUrl::parse(a), range->offset, range->length, out, spec);
      } else {
        job = client.get(GridUrl::parse(a), b, spec, resume);
      }
    } else if (*put) {
      if (range) gftp::fail(gftp::Errc::InvalidSpec, "--range applies to get and cat");
      job = client.put(a, GridUrl::parse(b), spec, resume);
    } else if (*copy) {
      if (range) gftp::fail(gftp::Errc::InvalidSpec, "--range applies to get and cat");
      job = client.third_party(GridUrl::parse(a), GridUrl::parse(b), spec);
    } else if (*cat) {
      const auto url = GridUrl::parse(a);
      const auto r = range ? *range : RangeArg{0, client.size(url)};
      gftp::data::MemoryBuffer sink;
      client.partial_get(url, r.offset, r.length, sink, spec);
      auto bytes = sink.bytes();
      bytes.resize(r.length);
      std::cout.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      std::cout.flush();
    }
    sampler.reset();
    for (const auto& w : job.warnings) std::cerr << "gftp: " << w << "\n";
  } catch (const gftp::Error& e) {
    return tools::report("gftp", e);
  }
  return 0;
}
