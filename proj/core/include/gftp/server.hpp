#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "gftp/control.hpp"
#include "gftp/dataplane.hpp"
#include "gftp/net.hpp"
#include "gftp/wire.hpp"

namespace gftp::server {

using Millis = std::chrono::milliseconds;

struct ServerConfig {
  std::string bind_host = "0.0.0.0";
  std::uint16_t port = wire::kDefaultControlPort;
  std::string data_host = "127.0.0.1";  // address advertised in PASV/SPAS replies
  std::uint16_t data_port_low = 50000;
  std::uint16_t data_port_high = 51000;
  std::filesystem::path root = ".";
  std::string secrets_file;
  std::uint64_t marker_bytes = data::kCheckpointBytes;
  Millis marker_interval = data::kCheckpointInterval;
  bool sync_markers = true;
  std::size_t max_sessions = 64;
  std::size_t max_block = wire::kMaxBlockSize;
  Millis data_idle_grace{1000};
  Millis data_stall_timeout{30000};
  Millis channel_ttl{60000};
  // Stripe coordination: when non-empty this server coordinates these nodes.
  std::vector<wire::DataEndpoint> stripe_nodes;
  std::string stripe_user;
  std::string stripe_secret_hex;
};

// INI-style key=value file; GFTP_PORT / GFTP_ROOT override afterwards.
ServerConfig load_config(const std::string& path);
void apply_environment(ServerConfig& config);

// "name:hex_secret" lines.
class SecretStore {
 public:
  static SecretStore load(const std::string& path);
  void add(const std::string& name, std::vector<std::byte> secret);
  std::optional<std::vector<std::byte>> find(const std::string& name) const;
  std::size_t size() const noexcept { return secrets_.size(); }

 private:
  std::map<std::string, std::vector<std::byte>> secrets_;
};

struct ServerStats {
  std::atomic<std::uint64_t> sessions{0};
  std::atomic<std::uint64_t> data_accepts{0};
  std::atomic<std::uint64_t> data_connects{0};
  std::atomic<std::uint64_t> payload_sent{0};
  std::atomic<std::uint64_t> payload_received{0};
  std::atomic<std::uint64_t> markers_sent{0};
  std::atomic<std::uint64_t> transfers_ok{0};
  std::atomic<std::uint64_t> transfers_failed{0};
};

struct ServerContext {
  ServerConfig config;
  SecretStore secrets;
  ServerStats stats;
};

enum class SessionState { Connected, Authenticating, Authenticated, Transferring };
std::string_view state_name(SessionState state);

class StripeGroup;

// Control-channel state machine for one client. Replies go through the
// ReplyFn, which may be called from the command thread and the transfer
// thread; it must be thread-safe.
class Session {
 public:
  using ReplyFn = std::function<void(const wire::Reply&)>;

  Session(ServerContext& context, ReplyFn reply);
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  // Exactly one final reply per line. Returns false when the connection
  // must close (QUIT, auth exhaustion).
  bool handle_line(std::string_view line);
  bool handle(const wire::Command& cmd);

  SessionState state() const;
  std::string identity() const;
  data::TransferSpec pending_spec() const;
  RangeSet restart_point() const;
  // Blocks until any running transfer has replied.
  void wait_idle();
  // Aborts any running transfer without replying to the client.
  void close();

 private:
  enum class DataMode { None, Passive, Active };

  void reply(int code, std::string text);
  void reply(const wire::Reply& r);

  bool on_user(const wire::Command& cmd);
  bool on_auth(const wire::Command& cmd);
  bool on_adat(const wire::Command& cmd);
  bool on_pasv();
  bool on_port(const wire::Command& cmd);
  bool on_spas();
  bool on_spor(const wire::Command& cmd);
  bool on_rest(const wire::Command& cmd);
  bool on_sbuf(const wire::Command& cmd);
  bool on_opts(const wire::Command& cmd);
  bool on_size(const wire::Command& cmd);
  bool on_cksm(const wire::Command& cmd);
  bool on_retrieve(const wire::Command& cmd);
  bool on_store(const wire::Command& cmd);
  bool on_abor();
  void on_abor_silent();

  std::optional<std::filesystem::path> resolve(const std::string& path) const;
  std::optional<std::vector<std::byte>> effective_token() const;
  data::CacheKey cache_key() const;
  void reset_data_path();
  bool transfer_active() const;
  void join_transfer();
  void set_abort_hook(std::function<void()> hook);

  void run_retrieve(std::filesystem::path file, RangeSet ranges);
  void run_striped_retrieve(std::string path, std::optional<data::PartialRange> partial, RangeSet restart);
  void run_store(std::filesystem::path file, RangeSet restart, std::uint64_t shift, bool truncate);
  std::vector<data::ChannelPtr> open_send_channels(std::size_t want);
  void finish_transfer(bool ok);

  ServerContext& ctx_;
  ReplyFn reply_;

  mutable std::mutex mu_;
  SessionState state_ = SessionState::Connected;
  std::string user_;
  std::string identity_;
  std::vector<std::byte> nonce_;
  std::vector<std::byte> session_key_;
  int auth_failures_ = 0;

  data::TransferSpec spec_;
  bool dcau_disabled_ = false;
  RangeSet restart_;
  std::optional<std::size_t> stripe_index_;
  std::size_t stripe_count_ = 1;

  DataMode mode_ = DataMode::None;
  std::shared_ptr<net::Listener> listener_;
  wire::DataEndpoint data_endpoint_;
  bool striped_ = false;
  data::ChannelCache cache_;
  std::unique_ptr<StripeGroup> stripes_;

  std::atomic<bool> cancel_{false};
  std::function<void()> abort_hook_;
  std::jthread transfer_;
};

// Accepts control connections and runs one Session per connection.
class Server {
 public:
  explicit Server(ServerConfig config);
  Server(ServerConfig config, SecretStore secrets);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds the control port (0 = ephemeral) and starts accepting.
  void start();
  void stop();
  // start() then block until stop() is called from another thread.
  void run();

  std::uint16_t port() const;
  wire::DataEndpoint endpoint() const;  // data_host:port
  const ServerStats& stats() const noexcept { return ctx_.stats; }
  ServerContext& context() noexcept { return ctx_; }

 private:
  struct Connection {
    net::Socket socket;
    std::jthread thread;
    std::atomic<bool> done{false};
  };
  void accept_loop();
  void serve(Connection* conn);
  void reap();

  ServerContext ctx_;
  net::Listener listener_;
  std::atomic<bool> stopping_{false};
  std::jthread acceptor_;
  std::mutex conn_mu_;
  std::list<std::unique_ptr<Connection>> connections_;
};

}  // namespace gftp::server
