#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "gftp/control.hpp"
#include "gftp/crypto.hpp"
#include "gftp/dataplane.hpp"
#include "gftp/wire.hpp"

namespace gftp::client {

using Millis = std::chrono::milliseconds;

// gftp://host:port/path
struct GridUrl {
  std::string host;
  std::uint16_t port = wire::kDefaultControlPort;
  std::string path;  // always starts with '/'

  static GridUrl parse(std::string_view text);  // Throws Error(InvalidSpec)
  std::string to_string() const;
  wire::DataEndpoint endpoint() const { return {host, port}; }
  friend bool operator==(const GridUrl&, const GridUrl&) = default;
};

bool is_grid_url(std::string_view text);

// "host:port name hexsecret" lines; the file must not be readable by
// group or others.
class Credentials {
 public:
  struct Entry {
    std::string user;
    std::vector<std::byte> secret;
  };

  static Credentials load(const std::string& path);
  void add(const wire::DataEndpoint& server, std::string user, std::vector<std::byte> secret);
  // Used for any server without its own entry.
  void add_default(std::string user, std::vector<std::byte> secret);
  // Falls back to a "*" entry when present. Throws Error(AuthFailed).
  const Entry& find(const wire::DataEndpoint& server) const;

 private:
  std::map<std::string, Entry> entries_;
};

enum class JobState { Planned, Running, Interrupted, Complete, Failed };
std::string_view job_state_name(JobState state);

struct TransferJob {
  data::TransferSpec spec;
  std::string source;
  std::string destination;
  data::TransferProgress progress;
  std::string restart_file;
  JobState state = JobState::Planned;
  std::uint64_t payload_bytes = 0;  // moved by this client over data channels, all attempts
  int attempts = 0;
  std::vector<std::string> warnings;
};

struct ClientOptions {
  // Maps an advertised data endpoint to the one actually dialled; the
  // harness uses it to splice in throttling proxies.
  std::function<wire::DataEndpoint(const wire::DataEndpoint&)> route;
  bool cache_channels = true;
  Millis cache_ttl = data::ChannelCache::kDefaultTtl;
  // Automatic resumes after an interrupted attempt.
  int retries = 2;
  bool verify = false;
  // On a stale restart file: retransfer everything (with a warning) instead of failing.
  bool restart_stale = false;
  bool sync_checkpoints = true;
  std::uint64_t checkpoint_bytes = data::kCheckpointBytes;
  Millis checkpoint_interval = data::kCheckpointInterval;
  Millis idle_grace{1000};
  Millis stall_timeout{30000};
  // Serial per job: checkpoints on get, server markers on put and third-party.
  std::function<void(const data::TransferProgress&)> on_progress;
  const std::atomic<bool>* cancel = nullptr;
};

struct ClientStats {
  std::atomic<std::uint64_t> control_connects{0};
  std::atomic<std::uint64_t> data_connects{0};
  std::atomic<std::uint64_t> payload_sent{0};
  std::atomic<std::uint64_t> payload_received{0};
  std::atomic<std::uint64_t> markers{0};
  std::atomic<std::uint64_t> cache_hits{0};
};

class Client {
 public:
  Client(Credentials credentials, ClientOptions options = {});
  ~Client();
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  // Throws Error(AuthFailed / RemoteMissing / Interrupted / VerifyMismatch ...).
  TransferJob get(const GridUrl& url, const std::string& local_path, data::TransferSpec spec = {},
                  bool resume = false);
  TransferJob put(const std::string& local_path, const GridUrl& url, data::TransferSpec spec = {},
                  bool resume = false);
  std::vector<std::byte> partial_get(const GridUrl& url, std::uint64_t offset, std::uint64_t length,
                                     data::TransferSpec spec = {});
  void partial_get(const GridUrl& url, std::uint64_t offset, std::uint64_t length, data::BlockSink& sink,
                   data::TransferSpec spec = {});
  TransferJob third_party(const GridUrl& src, const GridUrl& dst, data::TransferSpec spec = {});
  TransferJob resume(const std::string& restart_file, data::TransferSpec spec = {});

  std::uint64_t size(const GridUrl& url);
  crypto::Digest checksum(const GridUrl& url, std::uint64_t offset, std::uint64_t length);

  const ClientStats& stats() const noexcept { return stats_; }
  std::size_t cached_bundles() const { return cache_.size(); }
  // Drops idle control connections and cached data channels.
  void close_idle();

 private:
  struct Session;
  using SessionPtr = std::unique_ptr<Session>;

  SessionPtr checkout(const wire::DataEndpoint& server);
  void checkin(SessionPtr session);
  void apply_spec(Session& s, const data::TransferSpec& spec);
  std::vector<data::ChannelPtr> data_channels(Session& s, const data::TransferSpec& spec, std::size_t want,
                                              data::CacheKey& key, bool& cached);
  void stash_channels(const data::CacheKey& key, std::vector<data::ChannelPtr> channels);

  void get_once(Session& s, const GridUrl& url, const data::TransferSpec& spec, ByteRange gap, bool whole,
                data::BlockSink& sink, RangeSet& received, std::uint64_t& payload,
                const std::function<void(const RangeSet&)>& on_checkpoint);
  void get_striped(Session& s, const GridUrl& url, const data::TransferSpec& spec, const RangeSet& gaps,
                   ByteRange target, data::BlockSink& sink, RangeSet& received, std::uint64_t& payload,
                   const std::function<void(const RangeSet&)>& on_checkpoint);
  void put_once(Session& s, const GridUrl& url, const data::TransferSpec& spec, ByteRange gap, bool fresh,
                data::BlockSource& source, RangeSet& received, std::uint64_t& payload,
                const std::function<void(const RangeSet&)>& on_marker);
  void verify_remote(Session& s, const GridUrl& url, const std::string& local_path, std::uint64_t size,
                     const data::TransferSpec& spec, TransferJob& job);

  Credentials credentials_;
  ClientOptions options_;
  ClientStats stats_;
  data::ChannelCache cache_;
  std::mutex pool_mu_;
  std::multimap<wire::DataEndpoint, SessionPtr> pool_;
};

// Digest binding a restart file to the transfer it describes.
std::string spec_digest(std::string_view direction, std::string_view remote, std::string_view local,
                        ByteRange target);

}  // namespace gftp::client
