#include "gftp/dataplane.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <deque>

#include "gftp/crypto.hpp"
#include "gftp/errors.hpp"

namespace gftp::data {

namespace {

bool bytes_equal(std::span<const std::byte> a, std::span<const std::byte> b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size()) == 0);
}

ByteRange block_range(const wire::BlockHeader& header) {
  if (header.offset > UINT64_MAX - header.count) fail(Errc::OutOfRangeBlock, "offset overflow");
  return {header.offset, header.offset + header.count};
}

bool in_target(const TransferProgress& p, ByteRange r) {
  if (p.open_ended) return r.start >= p.target.start;
  return r.start >= p.target.start && r.end <= p.target.end;
}

std::string range_text(ByteRange r) {
  return "[" + std::to_string(r.start) + "," + std::to_string(r.end) + ")";
}

// Compares payload against bytes already in the sink wherever the block
// overlaps previously received data.
void check_overlap(const RangeSet& overlap, ByteRange block, std::span<const std::byte> payload,
                   BlockSink& sink) {
  std::vector<std::byte> existing;
  for (const auto& r : overlap.intervals()) {
    existing.resize(r.length());
    sink.read_at(r.start, existing);
    if (!bytes_equal(existing, payload.subspan(r.start - block.start, r.length()))) {
      fail(Errc::DataConflict, "conflicting bytes in " + range_text(r));
    }
  }
}

}  // namespace

// ---- spec / progress ----

void TransferSpec::validate() const {
  if (parallelism < 1) fail(Errc::InvalidSpec, "parallelism must be >= 1");
  if (block_size < wire::kMinBlockSize || block_size > wire::kMaxBlockSize) {
    fail(Errc::InvalidSpec, "block size out of bounds");
  }
  if (partial && partial->offset > UINT64_MAX - partial->length) fail(Errc::InvalidSpec, "partial range overflows");
}

bool TransferProgress::data_complete() const {
  if (open_ended) {
    return received.empty() || (received.interval_count() == 1 && received.lower() == target.start);
  }
  if (target.empty()) return received.empty();
  return received.interval_count() == 1 && received.covers(target) && received.subset_of(target);
}

bool TransferProgress::complete() const {
  return eod_expected.has_value() && eod_seen == *eod_expected && data_complete();
}

// ---- planning ----

std::vector<ByteRange> plan_blocks(ByteRange target, std::size_t block_size) {
  std::vector<ByteRange> out;
  if (block_size == 0) fail(Errc::InvalidSpec, "block size 0");
  for (auto pos = target.start; pos < target.end;) {
    const auto end = pos + std::min<std::uint64_t>(block_size, target.end - pos);
    out.push_back({pos, end});
    pos = end;
  }
  return out;
}

std::vector<ByteRange> plan_blocks(const RangeSet& ranges, std::size_t block_size) {
  std::vector<ByteRange> out;
  for (const auto& r : ranges.intervals()) {
    auto part = plan_blocks(r, block_size);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::size_t assign_stripe(std::uint64_t block_index, std::size_t stripe_count) {
  if (stripe_count == 0) fail(Errc::InvalidSpec, "stripe count 0");
  return static_cast<std::size_t>(block_index % stripe_count);
}

std::vector<ByteRange> StripePlan::blocks_for(std::size_t stripe, const RangeSet& ranges) const {
  std::vector<ByteRange> out;
  const std::uint64_t b = block_size;
  for (const auto& r : ranges.intervals()) {
    for (auto pos = r.start; pos < r.end;) {
      const auto index = pos / b;
      const auto end = std::min<std::uint64_t>((index + 1) * b, r.end);
      if (assign_stripe(index, stripe_count) == stripe) out.push_back({pos, end});
      pos = end;
    }
  }
  return out;
}

RangeSet remaining_after(const RangeSet& marker, ByteRange target) {
  if (!marker.subset_of(target)) fail(Errc::MarkerOutsideTarget, "marker extends past " + range_text(target));
  RangeSet whole;
  if (!target.empty()) whole.insert(target);
  return whole.subtract(marker);
}

// ---- storage ----

File::File(const std::string& path, Mode mode) : path_(path) {
  int flags = O_CLOEXEC;
  switch (mode) {
    case Mode::Read: flags |= O_RDONLY; break;
    case Mode::Write: flags |= O_RDWR | O_CREAT; break;
    case Mode::WriteTruncate: flags |= O_RDWR | O_CREAT | O_TRUNC; break;
  }
  fd_ = ::open(path.c_str(), flags, 0644);
  if (fd_ < 0) fail(Errc::IoError, "open " + path + ": " + std::strerror(errno));
}

File::~File() {
  if (fd_ >= 0) ::close(fd_);
}

void File::read_at(std::uint64_t offset, std::span<std::byte> out) {
  std::size_t got = 0;
  while (got < out.size()) {
    const auto n = ::pread(fd_, out.data() + got, out.size() - got, static_cast<off_t>(offset + got));
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(Errc::IoError, "pread " + path_ + ": " + std::strerror(errno));
    }
    if (n == 0) fail(Errc::IoError, "short read from " + path_);
    got += static_cast<std::size_t>(n);
  }
}

void File::write_at(std::uint64_t offset, std::span<const std::byte> data) {
  std::size_t put = 0;
  while (put < data.size()) {
    const auto n = ::pwrite(fd_, data.data() + put, data.size() - put, static_cast<off_t>(offset + put));
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(Errc::IoError, "pwrite " + path_ + ": " + std::strerror(errno));
    }
    put += static_cast<std::size_t>(n);
  }
}

void File::sync() { ::fdatasync(fd_); }

std::uint64_t File::size() const {
  struct stat st {};
  if (::fstat(fd_, &st) != 0) fail(Errc::IoError, "fstat " + path_);
  return static_cast<std::uint64_t>(st.st_size);
}

void File::truncate(std::uint64_t size) {
  if (::ftruncate(fd_, static_cast<off_t>(size)) != 0) fail(Errc::IoError, "ftruncate " + path_);
}

void MemoryBuffer::read_at(std::uint64_t offset, std::span<std::byte> out) {
  std::lock_guard lock(mu_);
  if (offset + out.size() > data_.size()) fail(Errc::IoError, "read past end of buffer");
  std::memcpy(out.data(), data_.data() + offset, out.size());
}

void MemoryBuffer::write_at(std::uint64_t offset, std::span<const std::byte> data) {
  std::lock_guard lock(mu_);
  if (offset + data.size() > data_.size()) data_.resize(offset + data.size());
  if (!data.empty()) std::memcpy(data_.data() + offset, data.data(), data.size());
}

// ---- channels ----

Preamble make_preamble(std::span<const std::byte> token) {
  Preamble p{};
  const auto nonce = crypto::random_bytes(kNonceSize);
  std::copy(nonce.begin(), nonce.end(), p.begin());
  const auto mac = crypto::hmac_sha256(token, nonce);
  std::copy(mac.begin(), mac.end(), p.begin() + kNonceSize);
  return p;
}

bool verify_preamble(std::span<const std::byte> token, const Preamble& preamble) {
  const auto nonce = std::span(preamble).first(kNonceSize);
  const auto mac = crypto::hmac_sha256(token, nonce);
  return crypto::constant_time_equal(mac, std::span(preamble).subspan(kNonceSize));
}

DataChannel::DataChannel(net::Socket socket, std::size_t max_block)
    : socket_(std::move(socket)), reader_(socket_), max_block_(max_block) {}

void DataChannel::send_block(const wire::BlockHeader& header, std::span<const std::byte> payload) {
  std::vector<std::byte> frame(wire::kBlockHeaderSize + payload.size());
  if (payload.size() != header.count) fail(Errc::LengthMismatch, "payload size differs from header count");
  wire::encode_header(header, std::span<std::byte, wire::kBlockHeaderSize>(frame.data(), wire::kBlockHeaderSize));
  if (!payload.empty()) std::memcpy(frame.data() + wire::kBlockHeaderSize, payload.data(), payload.size());
  socket_.write_all(frame);
  if (header.is_data()) payload_sent_ += header.count;
}

std::optional<wire::Block> DataChannel::recv_block(Millis timeout) {
  reader_.set_timeout(timeout);
  auto block = wire::decode_block(reader_, max_block_);
  if (block && block->header.is_data()) payload_received_ += block->header.count;
  return block;
}

void DataChannel::write_preamble(std::span<const std::byte> token) {
  const auto p = make_preamble(token);
  socket_.write_all(p);
}

void DataChannel::expect_preamble(std::span<const std::byte> token, Millis timeout) {
  Preamble p{};
  reader_.set_timeout(timeout);
  std::size_t got = 0;
  while (got < p.size()) {
    const auto n = reader_.read(std::span(p).subspan(got));
    if (n == 0) fail(Errc::ConnectFailure, "data channel closed during preamble");
    got += n;
  }
  if (!verify_preamble(token, p)) fail(Errc::DcauMismatch, "data channel authentication failed");
}

// ---- sending ----

std::uint64_t SendReport::payload_bytes() const {
  std::uint64_t total = 0;
  for (const auto& c : channels) total += c.bytes;
  return total;
}

std::size_t SendReport::failed_channels() const {
  return static_cast<std::size_t>(std::count_if(channels.begin(), channels.end(), [](const auto& c) { return c.failed; }));
}

SendReport send_range(std::span<DataChannel* const> channels, std::vector<ByteRange> blocks,
                      BlockSource& source, const SendOptions& options) {
  if (channels.empty()) fail(Errc::AllChannelsFailed, "no data channels");

  struct Shared {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<ByteRange> queue;
    std::size_t in_flight = 0;
    std::size_t live = 0;
    std::size_t finishers = 0;
  } shared;
  shared.queue.assign(blocks.begin(), blocks.end());
  shared.live = channels.size();

  SendReport report;
  report.channels.resize(channels.size());
  std::atomic<std::uint64_t> eod_sent{0};
  std::atomic<bool> eof_sent{false};
  auto cancelled = [&] { return options.cancel && options.cancel->load(); };

  auto worker = [&](std::size_t index) {
    DataChannel& ch = *channels[index];
    ChannelReport& rep = report.channels[index];
    std::deque<ByteRange> recent;
    std::uint64_t recent_bytes = 0;
    std::vector<std::byte> buf;

    auto die = [&](std::optional<ByteRange> current, const std::string& why) {
      std::lock_guard lock(shared.mu);
      if (current) {
        --shared.in_flight;
        shared.queue.push_front(*current);
      }
      for (const auto& r : recent) shared.queue.push_back(r);
      --shared.live;
      rep.failed = true;
      rep.error = why;
      shared.cv.notify_all();
    };

    while (true) {
      ByteRange block;
      {
        std::unique_lock lock(shared.mu);
        shared.cv.wait(lock, [&] { return !shared.queue.empty() || shared.in_flight == 0 || cancelled(); });
        if (cancelled()) {
          --shared.live;
          rep.failed = true;
          rep.error = "cancelled";
          shared.cv.notify_all();
          return;
        }
        if (shared.queue.empty()) break;
        block = shared.queue.front();
        shared.queue.pop_front();
        ++shared.in_flight;
      }
      try {
        buf.resize(block.length());
        source.read_at(block.start, buf);
      } catch (const Error&) {
        // Source trouble is not a channel problem; stop everything.
        std::lock_guard lock(shared.mu);
        --shared.in_flight;
        shared.queue.push_front(block);
        throw;
      }
      try {
        ch.send_block(wire::BlockHeader{0, block.length(), block.start}, buf);
      } catch (const std::exception& e) {
        die(block, e.what());
        return;
      }
      rep.bytes += block.length();
      ++rep.blocks;
      if (options.on_sent) options.on_sent(block.length());
      recent.push_back(block);
      recent_bytes += block.length();
      while (!recent.empty() && recent_bytes - recent.front().length() >= options.requeue_window) {
        recent_bytes -= recent.front().length();
        recent.pop_front();
      }
      {
        std::lock_guard lock(shared.mu);
        --shared.in_flight;
        if (shared.queue.empty() && shared.in_flight == 0) shared.cv.notify_all();
      }
    }

    bool last = false;
    std::uint64_t live = 0;
    {
      std::lock_guard lock(shared.mu);
      ++shared.finishers;
      live = shared.live;
      last = shared.finishers == shared.live;
    }
    try {
      if (last && options.eof != SendOptions::Eof::None) {
        const auto count = options.eof == SendOptions::Eof::Fixed ? options.eof_count : live;
        ch.send_block(wire::BlockHeader{wire::descriptor::kEof, 0, count}, {});
        eof_sent = true;
      }
      const std::uint8_t flags = wire::descriptor::kEod | (options.close_after ? wire::descriptor::kClose : 0);
      ch.send_block(wire::BlockHeader{flags, 0, 0}, {});
      ++eod_sent;
    } catch (const std::exception& e) {
      rep.failed = true;
      rep.error = e.what();
    }
  };

  std::vector<std::exception_ptr> errors(channels.size());
  {
    std::vector<std::jthread> threads;
    threads.reserve(channels.size());
    for (std::size_t i = 0; i < channels.size(); ++i) {
      threads.emplace_back([&, i] {
        try {
          worker(i);
        } catch (...) {
          errors[i] = std::current_exception();
          std::lock_guard lock(shared.mu);
          --shared.live;
          report.channels[i].failed = true;
          for (auto* c : channels) c->shutdown();
          shared.cv.notify_all();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  report.eod_sent = eod_sent;
  report.eof_sent = eof_sent;
  if (cancelled()) fail(Errc::Cancelled, "send cancelled");
  if (!shared.queue.empty() || shared.live == 0) {
    fail(Errc::AllChannelsFailed, std::to_string(shared.queue.size()) + " blocks unsent");
  }
  return report;
}

// ---- receiving ----

void receive_block(TransferProgress& progress, const wire::BlockHeader& header,
                   std::span<const std::byte> payload, BlockSink& sink) {
  if (header.is_data()) {
    if (header.count == 0) return;
    const auto range = block_range(header);
    if (!in_target(progress, range)) fail(Errc::OutOfRangeBlock, range_text(range));
    const auto overlap = progress.received.intersect(range);
    check_overlap(overlap, range, payload, sink);
    if (overlap.total_bytes() < range.length()) sink.write_at(range.start, payload);
    progress.received.insert(range);
    return;
  }
  if (header.has(wire::descriptor::kEof)) progress.eod_expected = header.offset;
  if (header.has(wire::descriptor::kEod)) ++progress.eod_seen;
}

Receiver::Receiver(TransferProgress initial, BlockSink& sink)
    : progress_(std::move(initial)), sink_(&sink), last_sample_(Clock::now()) {
  progress_.throughput_samples.push_back({last_sample_, 0});
}

void Receiver::on_block(const wire::BlockHeader& header, std::span<const std::byte> payload) {
  if (!header.is_data()) {
    std::lock_guard lock(mu_);
    if (header.has(wire::descriptor::kEof)) progress_.eod_expected = header.offset;
    if (header.has(wire::descriptor::kEod)) ++progress_.eod_seen;
    return;
  }
  if (header.count == 0) return;
  const auto range = block_range(header);
  RangeSet overlap;
  {
    std::lock_guard lock(mu_);
    if (!in_target(progress_, range)) fail(Errc::OutOfRangeBlock, range_text(range));
    overlap = progress_.received.intersect(range);
  }
  check_overlap(overlap, range, payload, *sink_);
  if (overlap.total_bytes() < range.length()) sink_->write_at(range.start, payload);

  std::lock_guard lock(mu_);
  progress_.received.insert(range);
  payload_bytes_ += header.count;
  const auto now = Clock::now();
  if (now - last_sample_ >= std::chrono::seconds(1)) {
    progress_.throughput_samples.push_back({now, payload_bytes_});
    last_sample_ = now;
  }
}

TransferProgress Receiver::snapshot() const {
  std::lock_guard lock(mu_);
  return progress_;
}

bool Receiver::complete() const {
  std::lock_guard lock(mu_);
  return progress_.complete();
}

std::uint64_t Receiver::payload_bytes() const {
  std::lock_guard lock(mu_);
  return payload_bytes_;
}

ReceiveTransfer::ReceiveTransfer(Receiver& receiver, ReceiveOptions options)
    : receiver_(receiver), options_(std::move(options)) {
  last_activity_ = last_checkpoint_ = Clock::now();
  checkpoint_mark_ = receiver_.snapshot().received.total_bytes();
}

ReceiveTransfer::~ReceiveTransfer() {
  aborted_ = true;
  std::lock_guard lock(mu_);
  for (auto& s : slots_) {
    if (s->channel && !s->ended) s->channel->shutdown();
  }
  // jthreads join as slots_ is destroyed after this body
}

void ReceiveTransfer::add_channel(ChannelPtr channel) {
  std::lock_guard lock(mu_);
  auto slot = std::make_unique<Slot>();
  slot->channel = std::move(channel);
  auto* raw = slot.get();
  if (aborted_) slot->channel->shutdown();
  slots_.push_back(std::move(slot));
  last_activity_ = Clock::now();
  raw->thread = std::jthread([this, raw] { run_reader(raw); });
}

void ReceiveTransfer::run_reader(Slot* slot) {
  bool reusable = false;
  auto record = [&](const std::string& what) {
    std::lock_guard lock(mu_);
    if (!error_) error_ = what;
  };
  try {
    while (!aborted_) {
      auto block = slot->channel->recv_block(options_.stall_timeout);
      if (!block) break;
      try {
        receiver_.on_block(block->header, block->payload);
      } catch (const std::exception& e) {
        // Validation or sink failure: fatal for the whole transfer.
        record(e.what());
        break;
      }
      {
        std::lock_guard lock(mu_);
        last_activity_ = Clock::now();
      }
      if (block->header.has(wire::descriptor::kEod)) {
        reusable = !block->header.has(wire::descriptor::kClose);
        break;
      }
    }
  } catch (const Error& e) {
    if (e.code() == Errc::OversizeBlock) record(e.what());
  } catch (const std::exception&) {
  }
  std::lock_guard lock(mu_);
  slot->ended = true;
  slot->reusable = reusable && !aborted_;
  cv_.notify_all();
}

void ReceiveTransfer::checkpoint(bool force) {
  if (!options_.on_checkpoint) return;
  const auto now = Clock::now();
  auto snap = receiver_.snapshot();
  const auto bytes = snap.received.total_bytes();
  if (bytes == checkpoint_mark_ && !force) return;
  if (!force && bytes - checkpoint_mark_ < options_.checkpoint_bytes &&
      now - last_checkpoint_ < options_.checkpoint_interval) {
    return;
  }
  receiver_.sink().sync();
  checkpoint_mark_ = bytes;
  last_checkpoint_ = now;
  options_.on_checkpoint(snap);
}

bool ReceiveTransfer::wait() {
  const auto started = Clock::now();
  while (true) {
    bool failed = false;
    {
      std::unique_lock lock(mu_);
      cv_.wait_for(lock, Millis{50});
      const auto now = Clock::now();
      const bool all_ended = !slots_.empty() && std::all_of(slots_.begin(), slots_.end(),
                                                            [](const auto& s) { return s->ended; });
      if (error_ || aborted_ || (options_.cancel && options_.cancel->load())) {
        failed = true;
      } else if (receiver_.complete()) {
        // fall through to the final checkpoint below
      } else if (slots_.empty() && now - started > options_.stall_timeout) {
        failed = true;
      } else if (all_ended && now - last_activity_ > options_.idle_grace) {
        failed = true;
      } else if (!slots_.empty() && now - last_activity_ > options_.stall_timeout) {
        failed = true;
      }
    }
    if (failed) {
      abort();
      checkpoint(true);
      return false;
    }
    if (receiver_.complete()) {
      checkpoint(true);
      return true;
    }
    checkpoint(false);
  }
}

std::optional<std::string> ReceiveTransfer::error() const {
  std::lock_guard lock(mu_);
  return error_;
}

void ReceiveTransfer::abort() {
  aborted_ = true;
  std::lock_guard lock(mu_);
  for (auto& s : slots_) {
    if (s->channel && !s->ended) s->channel->shutdown();
  }
  cv_.notify_all();
}

std::vector<ChannelPtr> ReceiveTransfer::take_reusable() {
  std::vector<ChannelPtr> out;
  std::unique_lock lock(mu_);
  // A reader may have delivered its EOD but not yet marked itself ended.
  cv_.wait_for(lock, Millis{1000}, [&] {
    return std::all_of(slots_.begin(), slots_.end(), [](const auto& s) { return s->ended; });
  });
  for (auto& s : slots_) {
    if (s->ended && s->reusable && s->channel) {
      if (s->thread.joinable()) s->thread.join();
      out.push_back(std::move(s->channel));
    }
  }
  return out;
}

std::size_t ReceiveTransfer::channel_count() const {
  std::lock_guard lock(mu_);
  return slots_.size();
}

}  // namespace gftp::data
