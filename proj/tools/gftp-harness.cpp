#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <thread>

#include "common.hpp"
#include "gftp/harness.hpp"

namespace {

using gftp::harness::json;

// A profile file holds the impairment settings either at the top level or
// under "impairment", plus optional "bench" and "faults" sections.
json load_profile(const std::string& path) {
  std::ifstream in(path);
  if (!in) gftp::fail(gftp::Errc::NotFound, "cannot read profile " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    gftp::fail(gftp::Errc::InvalidSpec, "profile " + path + ": " + e.what());
  }
}

gftp::harness::ImpairmentProfile impairment(const json& j) {
  return gftp::harness::ImpairmentProfile::from_json(j.contains("impairment") ? j["impairment"] : j);
}

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) gftp::fail(gftp::Errc::IoError, "cannot write " + path);
  return out;
}

int run_proxy(const json& j, const std::string& csv, const std::string& listen, const std::string& upstream,
              double duration) {
  const auto sigs = tools::block_stop_signals();
  const auto at = gftp::wire::parse_endpoint(listen);
  gftp::harness::Proxy proxy(gftp::wire::parse_endpoint(upstream), impairment(j), at.host, at.port);
  proxy.start();
  const auto ep = proxy.endpoint();
  std::cout << "gftp-harness proxy listening on " << ep.host << ":" << ep.port << " -> " << upstream << std::endl;
  if (duration > 0) {
    std::this_thread::sleep_for(std::chrono::duration<double>(duration));
  } else {
    tools::wait_for_signal(sigs);
  }
  proxy.stop();
  const auto r = proxy.report();
  auto out = open_csv(csv);
  out << "connection,upstream,forward_in,forward_out,backward_in,backward_out,severed\n";
  for (const auto& c : r.connections) {
    out << c.id << ',' << c.upstream << ',' << c.forward_in << ',' << c.forward_out << ',' << c.backward_in << ','
        << c.backward_out << ',' << (c.severed ? "true" : "false") << "\n";
  }
  std::cout << r.to_json().dump(2) << "\n";
  return 0;
}

int run_bench(const json& j, const std::string& csv) {
  const auto cfg = gftp::harness::BenchConfig::from_json(j.value("bench", json::object()));
  auto out = open_csv(csv);
  out << gftp::harness::bench_csv_header() << "\n";
  const auto res = gftp::harness::bench_streams(cfg, impairment(j), [&](const gftp::harness::BenchRow& row) {
    out << gftp::harness::bench_csv_row(row) << std::endl;
    std::cout << "P=" << row.parallelism << "  " << row.throughput / 1e6 << " MB/s  "
              << (row.verified ? "verified" : "NOT VERIFIED") << std::endl;
  });
  if (res.error) {
    std::cerr << "gftp-harness: " << *res.error << "\n";
    return tools::kInterrupted;
  }
  return 0;
}

int run_faults(const json& j, const std::string& csv) {
  const auto cfg = gftp::harness::FaultConfig::from_json(j.value("faults", json::object()));
  const auto rep = gftp::harness::fault_suite(cfg, impairment(j));
  auto out = open_csv(csv);
  out << "seconds,received_bytes\n";
  for (const auto& m : rep.markers) out << m.at << ',' << m.received << "\n";
  std::cout << rep.to_json().dump(2) << "\n";
  if (!rep.completed) return tools::kInterrupted;
  if (!rep.checksum_ok) return tools::kVerify;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gftp-harness: impairment proxy, stream sweeps and fault injection"};
  app.require_subcommand(1);
  std::string profile_path, csv;
  std::string listen = "127.0.0.1:0";
  std::string upstream;
  double duration = 0;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--profile", profile_path, "JSON profile")->required();
    s->add_option("--csv", csv, "output CSV")->required();
  };
  auto* proxy = app.add_subcommand("proxy", "relay one endpoint under the profile's impairments");
  add_common(proxy);
  proxy->add_option("--listen", listen, "host:port to listen on");
  proxy->add_option("--upstream", upstream, "host:port to relay to")->required();
  proxy->add_option("--duration", duration, "seconds to run; 0 waits for SIGINT/SIGTERM");
  auto* bench = app.add_subcommand("bench", "throughput against parallel stream count");
  add_common(bench);
  auto* faults = app.add_subcommand("faults", "store with scheduled data channel cuts and resume");
  add_common(faults);
  CLI11_PARSE(app, argc, argv);

  try {
    const auto j = load_profile(profile_path);
    if (*proxy) return run_proxy(j, csv, listen, upstream, duration);
    if (*bench) return run_bench(j, csv);
    return run_faults(j, csv);
  } catch (const gftp::Error& e) {
    return tools::report("gftp-harness", e);
  }
}
