#include <CLI11.hpp>
#include <iostream>

#include "common.hpp"
#include "gftp/server.hpp"

int main(int argc, char** argv) {
  CLI::App app{"gftpd: parallel, striped, restartable file transfer server"};
  std::string config_path;
  std::optional<std::uint16_t> port;
  std::optional<std::string> root;
  std::vector<std::string> stripe_nodes;
  app.add_option("--config", config_path, "INI-style key=value configuration file")->required();
  app.add_option("--port", port, "control port (0 picks a free one)");
  app.add_option("--root", root, "directory served to clients");
  app.add_option("--stripe-node", stripe_nodes, "host:port of a stripe node this server coordinates");
  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = gftp::server::load_config(config_path);
    gftp::server::apply_environment(cfg);
    if (port) cfg.port = *port;
    if (root) cfg.root = *root;
    for (const auto& n : stripe_nodes) cfg.stripe_nodes.push_back(gftp::wire::parse_endpoint(n));

    const auto signals = tools::block_stop_signals();
    gftp::server::Server server(cfg);
    server.start();
    std::cout << "gftpd listening on " << cfg.bind_host << ":" << server.port() << std::endl;
    const int sig = tools::wait_for_signal(signals);
    std::cout << "gftpd stopping on signal " << sig << std::endl;
    server.stop();
  } catch (const gftp::Error& e) {
    return tools::report("gftpd", e);
  }
  return 0;
}
