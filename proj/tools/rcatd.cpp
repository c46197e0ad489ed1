#include <CLI11.hpp>
#include <iostream>

#include "common.hpp"
#include "gftp/catalog.hpp"

int main(int argc, char** argv) {
  CLI::App app{"rcatd: replica catalog service"};
  std::string dir = "rcat-data";
  std::string host = "127.0.0.1";
  std::uint16_t port = gftp::catalog::kDefaultPort;
  std::string sync = "always";
  std::uint64_t snapshot_every = 100000;
  app.add_option("--dir", dir, "directory holding the journal and snapshot");
  app.add_option("--host", host, "address to listen on");
  app.add_option("--port", port, "port to listen on (0 picks a free one)");
  app.add_option("--sync", sync, "fsync each journal record: always or never")
      ->check(CLI::IsMember({"always", "never"}));
  app.add_option("--snapshot-every", snapshot_every, "mutations between automatic snapshots")
      ->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  try {
    const auto signals = tools::block_stop_signals();
    gftp::catalog::Store store(dir, sync == "always" ? gftp::catalog::SyncMode::Always
                                                     : gftp::catalog::SyncMode::Never,
                               snapshot_every);
    gftp::catalog::Service service(store, host, port);
    service.start();
    std::cout << "rcatd listening on " << host << ":" << service.port() << " (replayed "
              << store.replayed() << " journal records)" << std::endl;
    tools::wait_for_signal(signals);
    service.stop();
    store.snapshot();
  } catch (const gftp::Error& e) {
    return tools::report("rcatd", e);
  }
  return 0;
}
