#pragma once

// Transfer mechanics shared by the server and the client: block planning,
// stripe assignment, parallel send with a work-stealing queue, concurrent
// out-of-order reassembly, restart bookkeeping and DCAU preambles.

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "gftp/net.hpp"
#include "gftp/range_set.hpp"
#include "gftp/wire.hpp"

namespace gftp::data {

using Clock = std::chrono::steady_clock;
using Millis = std::chrono::milliseconds;

inline constexpr std::uint64_t kCheckpointBytes = 8ull << 20;
inline constexpr Millis kCheckpointInterval{2000};

enum class Direction { Get, Put, ThirdParty };

struct PartialRange {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct TransferSpec {
  Direction direction = Direction::Get;
  std::uint32_t parallelism = 4;
  std::vector<wire::DataEndpoint> stripes;  // empty = unstriped
  std::optional<PartialRange> partial;
  std::size_t block_size = wire::kDefaultBlockSize;
  std::size_t buffer_size = 0;  // 0 = leave socket defaults alone
  std::optional<std::vector<std::byte>> dcau_token;

  // Throws Error(InvalidSpec).
  void validate() const;
};

struct ThroughputSample {
  Clock::time_point at;
  std::uint64_t bytes = 0;
};

struct TransferProgress {
  RangeSet received;
  ByteRange target;
  // Stores do not know their final size up front: the target then only
  // fixes the start, and completion means "contiguous from target.start".
  bool open_ended = false;
  std::uint64_t eod_seen = 0;
  std::optional<std::uint64_t> eod_expected;
  std::vector<ThroughputSample> throughput_samples;

  bool data_complete() const;
  bool complete() const;
};

// ---- planning ----

// Contiguous blocks of block_size starting at target.start; last may be short.
std::vector<ByteRange> plan_blocks(ByteRange target, std::size_t block_size);
std::vector<ByteRange> plan_blocks(const RangeSet& ranges, std::size_t block_size);

std::size_t assign_stripe(std::uint64_t block_index, std::size_t stripe_count);

// Block k covers file offsets [k*B, (k+1)*B) and belongs to stripe k mod S.
struct StripePlan {
  std::size_t stripe_count = 1;
  std::size_t block_size = wire::kDefaultBlockSize;

  // The blocks of `ranges` owned by `stripe`, split at block boundaries.
  std::vector<ByteRange> blocks_for(std::size_t stripe, const RangeSet& ranges) const;
};

// target \ marker. Throws Error(MarkerOutsideTarget) unless marker ⊆ target.
RangeSet remaining_after(const RangeSet& marker, ByteRange target);

// ---- storage ----

class BlockSource {
 public:
  virtual ~BlockSource() = default;
  virtual void read_at(std::uint64_t offset, std::span<std::byte> out) = 0;
};

class BlockSink {
 public:
  virtual ~BlockSink() = default;
  virtual void write_at(std::uint64_t offset, std::span<const std::byte> data) = 0;
  // Reads back previously written bytes; used for duplicate checks.
  virtual void read_at(std::uint64_t offset, std::span<std::byte> out) = 0;
  virtual void sync() {}
};

// Positional file access (pread/pwrite); no shared cursor, safe for
// concurrent offset-disjoint writers.
class File final : public BlockSource, public BlockSink {
 public:
  enum class Mode { Read, Write, WriteTruncate };
  File(const std::string& path, Mode mode);
  ~File() override;
  File(const File&) = delete;
  File& operator=(const File&) = delete;

  void read_at(std::uint64_t offset, std::span<std::byte> out) override;
  void write_at(std::uint64_t offset, std::span<const std::byte> data) override;
  void sync() override;
  std::uint64_t size() const;
  void truncate(std::uint64_t size);

 private:
  int fd_ = -1;
  std::string path_;
};

class MemoryBuffer final : public BlockSource, public BlockSink {
 public:
  MemoryBuffer() = default;
  explicit MemoryBuffer(std::vector<std::byte> data) : data_(std::move(data)) {}

  void read_at(std::uint64_t offset, std::span<std::byte> out) override;
  void write_at(std::uint64_t offset, std::span<const std::byte> data) override;

  const std::vector<std::byte>& bytes() const noexcept { return data_; }

 private:
  mutable std::mutex mu_;
  std::vector<std::byte> data_;
};

// ---- channels ----

inline constexpr std::size_t kNonceSize = 16;
inline constexpr std::size_t kPreambleSize = kNonceSize + 32;
using Preamble = std::array<std::byte, kPreambleSize>;

// nonce ‖ HMAC-SHA-256(token, nonce)
Preamble make_preamble(std::span<const std::byte> token);
bool verify_preamble(std::span<const std::byte> token, const Preamble& preamble);

class DataChannel {
 public:
  explicit DataChannel(net::Socket socket, std::size_t max_block = wire::kMaxBlockSize);

  void send_block(const wire::BlockHeader& header, std::span<const std::byte> payload);
  // nullopt when the peer closed at a block boundary.
  std::optional<wire::Block> recv_block(Millis timeout = net::kForever);

  void write_preamble(std::span<const std::byte> token);
  // Throws Error(DcauMismatch) on a bad preamble.
  void expect_preamble(std::span<const std::byte> token, Millis timeout);

  void shutdown() const noexcept { socket_.shutdown(); }
  bool peer_closed() const { return socket_.peer_closed(); }
  net::Socket& socket() noexcept { return socket_; }

  std::uint64_t payload_sent() const noexcept { return payload_sent_.load(); }
  std::uint64_t payload_received() const noexcept { return payload_received_.load(); }

 private:
  net::Socket socket_;
  net::BufferedReader reader_;
  std::size_t max_block_;
  std::atomic<std::uint64_t> payload_sent_{0};
  std::atomic<std::uint64_t> payload_received_{0};
};

using ChannelPtr = std::unique_ptr<DataChannel>;

// ---- sending ----

struct SendOptions {
  enum class Eof { Auto, Fixed, None };
  Eof eof = Eof::Auto;
  std::uint64_t eof_count = 0;  // Eof::Fixed only
  bool close_after = false;     // flag the final EOD with CLOSE
  // Bytes of recently sent blocks per channel that are requeued when that
  // channel fails; they may still have been in flight.
  std::uint64_t requeue_window = 16ull << 20;
  std::function<void(std::uint64_t payload_bytes)> on_sent;
  const std::atomic<bool>* cancel = nullptr;
};

struct ChannelReport {
  std::uint64_t bytes = 0;
  std::uint64_t blocks = 0;
  bool failed = false;
  std::string error;
};

struct SendReport {
  std::vector<ChannelReport> channels;
  std::uint64_t eod_sent = 0;
  bool eof_sent = false;

  std::uint64_t payload_bytes() const;
  std::size_t failed_channels() const;
};

// Sends each block exactly once over some channel, then EOD on every
// surviving channel and, per options, one EOF. Blocks of a failed channel
// are requeued to the survivors. Throws Error(AllChannelsFailed) or
// Error(Cancelled).
SendReport send_range(std::span<DataChannel* const> channels, std::vector<ByteRange> blocks,
                      BlockSource& source, const SendOptions& options = {});

// ---- receiving ----

// Applies one decoded block. Not thread-safe; see Receiver.
// Throws Error(OutOfRangeBlock) or Error(DataConflict).
void receive_block(TransferProgress& progress, const wire::BlockHeader& header,
                   std::span<const std::byte> payload, BlockSink& sink);

// Thread-safe wrapper: linearizable progress updates, sink writes outside the lock.
class Receiver {
 public:
  Receiver(TransferProgress initial, BlockSink& sink);

  void on_block(const wire::BlockHeader& header, std::span<const std::byte> payload);
  TransferProgress snapshot() const;
  bool complete() const;
  std::uint64_t payload_bytes() const;
  BlockSink& sink() noexcept { return *sink_; }

 private:
  mutable std::mutex mu_;
  TransferProgress progress_;
  BlockSink* sink_;
  std::uint64_t payload_bytes_ = 0;
  Clock::time_point last_sample_;
};

struct ReceiveOptions {
  Millis idle_grace{1000};      // give up this long after every channel has ended
  Millis stall_timeout{30000};  // give up if no channel ever arrives
  std::uint64_t checkpoint_bytes = kCheckpointBytes;
  Millis checkpoint_interval = kCheckpointInterval;
  // Called from wait() with a snapshot whose bytes were synced to the sink.
  std::function<void(const TransferProgress&)> on_checkpoint;
  const std::atomic<bool>* cancel = nullptr;
};

// Runs one reader thread per channel until each channel sees its EOD.
class ReceiveTransfer {
 public:
  ReceiveTransfer(Receiver& receiver, ReceiveOptions options);
  ~ReceiveTransfer();
  ReceiveTransfer(const ReceiveTransfer&) = delete;
  ReceiveTransfer& operator=(const ReceiveTransfer&) = delete;

  void add_channel(ChannelPtr channel);
  // Blocks until complete (true) or failed/cancelled (false).
  bool wait();
  // Fatal error seen by a reader (DataConflict, OutOfRangeBlock...), if any.
  std::optional<std::string> error() const;
  // Stops readers; safe from any thread.
  void abort();
  // After wait(): channels that ended with a clean EOD and no CLOSE flag.
  std::vector<ChannelPtr> take_reusable();
  std::size_t channel_count() const;

 private:
  struct Slot {
    ChannelPtr channel;
    std::jthread thread;
    bool ended = false;
    bool reusable = false;
  };
  void run_reader(Slot* slot);
  void checkpoint(bool force);

  Receiver& receiver_;
  ReceiveOptions options_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::optional<std::string> error_;
  std::atomic<bool> aborted_{false};
  Clock::time_point last_activity_;
  Clock::time_point last_checkpoint_;
  std::uint64_t checkpoint_mark_ = 0;
  // Last member: reader threads join before anything they touch is destroyed.
  std::vector<std::unique_ptr<Slot>> slots_;
};

// ---- data channel cache ----

struct CacheKey {
  wire::DataEndpoint endpoint;
  std::string identity;
  std::string token;  // hex of the DCAU token, empty when none

  friend auto operator<=>(const CacheKey&, const CacheKey&) = default;
  friend bool operator==(const CacheKey&, const CacheKey&) = default;
};

// Keeps authenticated data channels open between transfers. An entry is a
// bundle of channels used together by one transfer.
class ChannelCache {
 public:
  using ClockFn = std::function<Clock::time_point()>;
  static constexpr Millis kDefaultTtl{30000};

  explicit ChannelCache(Millis ttl = kDefaultTtl, ClockFn clock = &Clock::now);

  // Removes and returns an unexpired bundle for key; expired bundles are closed.
  std::optional<std::vector<ChannelPtr>> checkout(const CacheKey& key);
  void checkin(const CacheKey& key, std::vector<ChannelPtr> channels, std::optional<Millis> ttl = {});
  // Closes every expired bundle; returns how many were dropped.
  std::size_t purge();
  void clear();
  std::size_t size() const;
  Millis ttl() const noexcept { return ttl_; }

 private:
  struct Entry {
    std::vector<ChannelPtr> channels;
    Clock::time_point deadline;
  };
  mutable std::mutex mu_;
  std::multimap<CacheKey, Entry> entries_;
  Millis ttl_;
  ClockFn clock_;
};

// ---- restart file ----

// "<destination>.gftp-restart": {url, target:[start,end], received:[[a,b],...], spec_digest}
struct RestartState {
  std::string url;
  ByteRange target;
  RangeSet received;
  std::string spec_digest;
  std::string direction;  // "get" or "put"
  std::string local_path;
  std::uint64_t remote_size = 0;
};

std::string restart_path_for(const std::string& local_path);
// Atomic: temp file then rename.
void save_restart(const std::string& path, const RestartState& state);
std::optional<RestartState> load_restart(const std::string& path);

}  // namespace gftp::data
