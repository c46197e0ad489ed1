#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "gftp/client.hpp"
#include "gftp/crypto.hpp"
#include "gftp/server.hpp"

namespace fixtures {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("gftp-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

inline std::vector<std::byte> random_bytes(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::byte> out(n);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const auto v = rng();
    for (int k = 0; k < 8; ++k) out[i + k] = static_cast<std::byte>(v >> (8 * k));
  }
  for (; i < n; ++i) out[i] = static_cast<std::byte>(rng());
  return out;
}

inline void write_file(const std::string& path, const std::vector<std::byte>& data) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

inline std::vector<std::byte> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

inline std::vector<std::byte> test_secret() { return gftp::crypto::random_bytes(32); }

// A server on an ephemeral control port serving `root`.
struct TestServer {
  explicit TestServer(const fs::path& root, const std::vector<std::byte>& secret,
                      std::function<void(gftp::server::ServerConfig&)> tweak = {}) {
    gftp::server::ServerConfig cfg;
    cfg.bind_host = "127.0.0.1";
    cfg.port = 0;
    cfg.root = root;
    cfg.data_port_low = 20000;
    cfg.data_port_high = 40000;
    cfg.sync_markers = false;
    if (tweak) tweak(cfg);
    gftp::server::SecretStore secrets;
    secrets.add("alice", secret);
    server = std::make_unique<gftp::server::Server>(cfg, std::move(secrets));
    server->start();
  }
  gftp::wire::DataEndpoint endpoint() const { return {"127.0.0.1", server->port()}; }
  gftp::client::GridUrl url(const std::string& path) const { return {"127.0.0.1", server->port(), path}; }

  std::unique_ptr<gftp::server::Server> server;
};

// A coordinator striping over `nodes` servers that all serve `root`.
struct StripedServers {
  StripedServers(const fs::path& root, const std::vector<std::byte>& secret, std::size_t nodes,
                 std::function<void(gftp::server::ServerConfig&)> tweak = {}) {
    std::vector<gftp::wire::DataEndpoint> eps;
    for (std::size_t i = 0; i < nodes; ++i) {
      members.push_back(std::make_unique<TestServer>(root, secret, tweak));
      eps.push_back(members.back()->endpoint());
    }
    coordinator = std::make_unique<TestServer>(root, secret, [&](gftp::server::ServerConfig& c) {
      if (tweak) tweak(c);
      c.stripe_nodes = eps;
      c.stripe_user = "alice";
      c.stripe_secret_hex = gftp::crypto::to_hex(secret);
    });
  }
  gftp::client::GridUrl url(const std::string& path) const { return coordinator->url(path); }
  std::vector<gftp::wire::DataEndpoint> endpoints() const {
    std::vector<gftp::wire::DataEndpoint> out;
    for (const auto& m : members) out.push_back(m->endpoint());
    return out;
  }

  std::vector<std::unique_ptr<TestServer>> members;
  std::unique_ptr<TestServer> coordinator;
};

inline gftp::client::Credentials credentials_for(const std::vector<std::byte>& secret) {
  gftp::client::Credentials c;
  c.add_default("alice", secret);
  return c;
}

}  // namespace fixtures
