#include "gftp/client.hpp"

#include <sys/stat.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "gftp/errors.hpp"

namespace gftp::client {

namespace {

constexpr Millis kConnectTimeout{5000};

// Presents file bytes [base, ...) as offsets starting at zero.
class OffsetSource final : public data::BlockSource {
 public:
  OffsetSource(data::BlockSource& inner, std::uint64_t base) : inner_(inner), base_(base) {}
  void read_at(std::uint64_t offset, std::span<std::byte> out) override { inner_.read_at(offset + base_, out); }

 private:
  data::BlockSource& inner_;
  std::uint64_t base_;
};

// Writes absolute offsets [base, ...) into a sink that starts at zero.
class ShiftSink final : public data::BlockSink {
 public:
  ShiftSink(data::BlockSink& inner, std::uint64_t base) : inner_(inner), base_(base) {}
  void write_at(std::uint64_t offset, std::span<const std::byte> d) override { inner_.write_at(offset - base_, d); }
  void read_at(std::uint64_t offset, std::span<std::byte> out) override { inner_.read_at(offset - base_, out); }
  void sync() override { inner_.sync(); }

 private:
  data::BlockSink& inner_;
  std::uint64_t base_;
};

class NoSyncSink final : public data::BlockSink {
 public:
  explicit NoSyncSink(data::BlockSink& inner) : inner_(inner) {}
  void write_at(std::uint64_t offset, std::span<const std::byte> d) override { inner_.write_at(offset, d); }
  void read_at(std::uint64_t offset, std::span<std::byte> out) override { inner_.read_at(offset, out); }

 private:
  data::BlockSink& inner_;
};

std::string reply_text(const wire::Reply& r) { return std::to_string(r.code()) + " " + r.text(); }

[[noreturn]] void fail_reply(const wire::Reply& r, const std::string& what) {
  switch (r.code()) {
    case 530:
    case 535: fail(Errc::AuthFailed, what + ": " + reply_text(r));
    case 550: fail(Errc::RemoteMissing, what + ": " + reply_text(r));
    case 551: fail(Errc::RangeError, what + ": " + reply_text(r));
    default: fail(Errc::TransferFailed, what + ": " + reply_text(r));
  }
}

bool fatal(Errc c) {
  return c == Errc::AuthFailed || c == Errc::RemoteMissing || c == Errc::RangeError || c == Errc::VerifyMismatch ||
         c == Errc::Cancelled || c == Errc::InvalidSpec || c == Errc::StaleRestart || c == Errc::SameEndpoint ||
         c == Errc::DataConflict;
}

}  // namespace

// ---- urls and credentials ----

bool is_grid_url(std::string_view text) { return text.rfind("gftp://", 0) == 0; }

GridUrl GridUrl::parse(std::string_view text) {
  if (!is_grid_url(text)) fail(Errc::InvalidSpec, "not a gftp:// url: " + std::string(text));
  auto rest = text.substr(7);
  const auto slash = rest.find('/');
  if (slash == std::string_view::npos || slash + 1 >= rest.size()) {
    fail(Errc::InvalidSpec, "url has no path: " + std::string(text));
  }
  GridUrl u;
  const auto authority = rest.substr(0, slash);
  u.path = std::string(rest.substr(slash));
  if (authority.find(':') == std::string_view::npos) {
    if (authority.empty()) fail(Errc::InvalidSpec, "url has no host");
    u.host = std::string(authority);
  } else {
    try {
      const auto ep = wire::parse_endpoint(authority);
      u.host = ep.host;
      u.port = ep.port;
    } catch (const Error& e) {
      fail(Errc::InvalidSpec, "bad url authority: " + e.detail());
    }
  }
  return u;
}

std::string GridUrl::to_string() const { return "gftp://" + endpoint().to_string() + path; }

Credentials Credentials::load(const std::string& path) {
  struct stat st {};
  if (::stat(path.c_str(), &st) != 0) fail(Errc::AuthFailed, "no credentials file " + path);
  if (st.st_mode & 077) fail(Errc::AuthFailed, "credentials file " + path + " must have mode 0600");
  std::ifstream in(path);
  Credentials c;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::istringstream fields(line);
    std::string host, user, hex;
    if (!(fields >> host >> user >> hex)) fail(Errc::InvalidSpec, "bad credentials line: " + line);
    bool ok = false;
    auto secret = crypto::from_hex(hex, &ok);
    if (!ok) fail(Errc::InvalidSpec, "bad secret for " + host);
    if (host == "*") {
      c.add_default(user, std::move(secret));
    } else {
      c.add(wire::parse_endpoint(host), user, std::move(secret));
    }
  }
  return c;
}

void Credentials::add(const wire::DataEndpoint& server, std::string user, std::vector<std::byte> secret) {
  entries_[server.to_string()] = {std::move(user), std::move(secret)};
}

void Credentials::add_default(std::string user, std::vector<std::byte> secret) {
  entries_["*"] = {std::move(user), std::move(secret)};
}

const Credentials::Entry& Credentials::find(const wire::DataEndpoint& server) const {
  auto it = entries_.find(server.to_string());
  if (it == entries_.end()) it = entries_.find("*");
  if (it == entries_.end()) fail(Errc::AuthFailed, "no credentials for " + server.to_string());
  return it->second;
}

std::string_view job_state_name(JobState state) {
  switch (state) {
    case JobState::Planned: return "PLANNED";
    case JobState::Running: return "RUNNING";
    case JobState::Interrupted: return "INTERRUPTED";
    case JobState::Complete: return "COMPLETE";
    case JobState::Failed: return "FAILED";
  }
  return "?";
}

std::string spec_digest(std::string_view direction, std::string_view remote, std::string_view local,
                        ByteRange target) {
  std::string text;
  text.append(direction).append("\n").append(remote).append("\n").append(local).append("\n");
  text += std::to_string(target.start) + "-" + std::to_string(target.end);
  return crypto::to_hex(crypto::sha256(text));
}

// ---- sessions ----

struct Client::Session {
  std::unique_ptr<ControlChannel> ctl;
  wire::DataEndpoint server;
  std::optional<wire::DataEndpoint> pasv;
  std::uint32_t parallelism = 0;
  std::size_t buffer = 0;
  std::string dcau = "A";
  bool broken = false;

  std::optional<std::vector<std::byte>> token() const {
    if (dcau == "N") return std::nullopt;
    return ctl->session_key();
  }
};

Client::Client(Credentials credentials, ClientOptions options)
    : credentials_(std::move(credentials)), options_(std::move(options)), cache_(options_.cache_ttl) {
  net::ignore_sigpipe();
}

Client::~Client() { close_idle(); }

void Client::close_idle() {
  cache_.clear();
  std::lock_guard lock(pool_mu_);
  for (auto& [ep, s] : pool_) {
    try {
      s->ctl->send(wire::make_command("QUIT"));
    } catch (const std::exception&) {
    }
  }
  pool_.clear();
}

Client::SessionPtr Client::checkout(const wire::DataEndpoint& server) {
  {
    std::lock_guard lock(pool_mu_);
    for (auto it = pool_.find(server); it != pool_.end() && it->first == server; it = pool_.find(server)) {
      auto s = std::move(it->second);
      pool_.erase(it);
      if (!s->ctl->closed()) return s;
    }
  }
  const auto& cred = credentials_.find(server);
  auto s = std::make_unique<Session>();
  s->server = server;
  s->ctl = ControlChannel::connect(server, kConnectTimeout);
  ++stats_.control_connects;
  s->ctl->authenticate(cred.user, cred.secret);
  return s;
}

void Client::checkin(SessionPtr session) {
  if (!session || session->broken) return;
  std::lock_guard lock(pool_mu_);
  pool_.emplace(session->server, std::move(session));
}

void Client::apply_spec(Session& s, const data::TransferSpec& spec) {
  auto expect = [&](const wire::Reply& r, const char* what) {
    if (r.code() != 200) fail(Errc::TransferFailed, std::string(what) + ": " + reply_text(r));
  };
  if (s.parallelism != spec.parallelism) {
    expect(s.ctl->command("OPTS", {"RETR", "Parallelism=" + std::to_string(spec.parallelism) + ";"}), "OPTS RETR");
    s.parallelism = spec.parallelism;
  }
  if (spec.buffer_size && s.buffer != spec.buffer_size) {
    expect(s.ctl->command("SBUF", {std::to_string(spec.buffer_size)}), "SBUF");
    s.buffer = spec.buffer_size;
  }
  const auto dcau = spec.dcau_token ? "S=" + crypto::base64_encode(*spec.dcau_token) : std::string("A");
  if (s.dcau != dcau) {
    expect(s.ctl->command("OPTS", {"DCAU", dcau + ";"}), "OPTS DCAU");
    s.dcau = dcau;
  }
}

std::vector<data::ChannelPtr> Client::data_channels(Session& s, const data::TransferSpec& spec, std::size_t want,
                                                    data::CacheKey& key, bool& cached) {
  const auto token = spec.dcau_token ? spec.dcau_token : s.token();
  std::vector<data::ChannelPtr> out;
  cached = false;
  if (options_.cache_channels && s.pasv) {
    key = {*s.pasv, s.ctl->identity(), token ? crypto::to_hex(*token) : std::string{}};
    if (auto bundle = cache_.checkout(key)) {
      for (auto& ch : *bundle) {
        if (!ch->peer_closed()) out.push_back(std::move(ch));
      }
      if (!out.empty()) {
        cached = true;
        ++stats_.cache_hits;
      }
    }
  }
  if (!cached) {
    const auto r = s.ctl->command("PASV");
    if (r.code() != 227) fail(Errc::TransferFailed, "PASV: " + reply_text(r));
    s.pasv = wire::parse_pasv_reply(r);
    key = {*s.pasv, s.ctl->identity(), token ? crypto::to_hex(*token) : std::string{}};
  }
  const auto target = options_.route ? options_.route(*s.pasv) : *s.pasv;
  while (out.size() < want) {
    auto ch = std::make_unique<data::DataChannel>(net::Socket::connect(target, kConnectTimeout, spec.buffer_size),
                                                  wire::kMaxBlockSize);
    if (token) ch->write_preamble(*token);
    ++stats_.data_connects;
    out.push_back(std::move(ch));
  }
  return out;
}

void Client::stash_channels(const data::CacheKey& key, std::vector<data::ChannelPtr> channels) {
  if (!options_.cache_channels || channels.empty()) return;
  cache_.checkin(key, std::move(channels));
}

// ---- queries ----

namespace {
std::uint64_t remote_size(ControlChannel& ctl, const GridUrl& url) {
  const auto r = ctl.command("SIZE", {url.path});
  if (r.code() != 213) fail_reply(r, "SIZE " + url.path);
  const auto n = wire::parse_u64(r.lines().front());
  if (!n) fail(Errc::ProtocolError, "bad SIZE reply " + reply_text(r));
  return *n;
}

std::string remote_checksum(ControlChannel& ctl, const GridUrl& url, std::uint64_t off, std::uint64_t len) {
  const auto r = ctl.command("CKSM", {"SHA256", std::to_string(off), std::to_string(len), url.path});
  if (r.code() != 213) fail_reply(r, "CKSM " + url.path);
  return r.lines().front();
}
}  // namespace

std::uint64_t Client::size(const GridUrl& url) {
  auto s = checkout(url.endpoint());
  try {
    const auto n = remote_size(*s->ctl, url);
    checkin(std::move(s));
    return n;
  } catch (const Error& e) {
    if (e.code() != Errc::RemoteMissing) s->broken = true;
    checkin(std::move(s));
    throw;
  }
}

crypto::Digest Client::checksum(const GridUrl& url, std::uint64_t offset, std::uint64_t length) {
  auto s = checkout(url.endpoint());
  const auto hex = remote_checksum(*s->ctl, url, offset, length);
  checkin(std::move(s));
  bool ok = false;
  const auto bytes = crypto::from_hex(hex, &ok);
  if (!ok || bytes.size() != 32) fail(Errc::ProtocolError, "bad checksum " + hex);
  crypto::Digest d{};
  std::copy(bytes.begin(), bytes.end(), d.begin());
  return d;
}

// ---- get ----

void Client::get_once(Session& s, const GridUrl& url, const data::TransferSpec& spec, ByteRange gap, bool whole,
                      data::BlockSink& sink, RangeSet& received, std::uint64_t& payload,
                      const std::function<void(const RangeSet&)>& on_checkpoint) {
  apply_spec(s, spec);
  data::CacheKey key;
  bool cached = false;
  auto channels = data_channels(s, spec, spec.parallelism, key, cached);
  const auto r = whole ? s.ctl->command("RETR", {url.path})
                       : s.ctl->command("ERET", {"P", std::to_string(gap.start), std::to_string(gap.length()), url.path});
  if (r.code() != 150) {
    // The connected channels were never accepted; drop them.
    s.pasv.reset();
    fail_reply(r, "retrieve " + url.path);
  }

  data::TransferProgress progress;
  progress.target = gap;
  data::Receiver receiver(progress, sink);
  data::ReceiveOptions ro;
  ro.idle_grace = options_.idle_grace;
  ro.stall_timeout = options_.stall_timeout;
  ro.checkpoint_bytes = options_.checkpoint_bytes;
  ro.checkpoint_interval = options_.checkpoint_interval;
  ro.cancel = options_.cancel;
  ro.on_checkpoint = [&](const data::TransferProgress& p) {
    RangeSet merged = received;
    merged.insert(p.received);
    on_checkpoint(merged);
  };
  data::ReceiveTransfer rt(receiver, ro);
  for (auto& c : channels) rt.add_channel(std::move(c));
  const bool ok = rt.wait();
  const auto snap = receiver.snapshot();
  received.insert(snap.received);
  payload += receiver.payload_bytes();
  stats_.payload_received += receiver.payload_bytes();

  wire::Reply final_reply(426, "no reply");
  try {
    final_reply = s.ctl->await_final();
  } catch (const std::exception&) {
    s.broken = true;
  }
  if (ok && final_reply.code() == 226) {
    stash_channels(key, rt.take_reusable());
    return;
  }
  if (!ok && rt.error()) fail(Errc::DataConflict, *rt.error());
  if (options_.cancel && options_.cancel->load()) fail(Errc::Cancelled, "cancelled");
  fail(Errc::Interrupted, ok ? reply_text(final_reply) : "data channels ended early; " + reply_text(final_reply));
}

void Client::get_striped(Session& s, const GridUrl& url, const data::TransferSpec& spec, const RangeSet& gaps,
                         ByteRange target, data::BlockSink& sink, RangeSet& received, std::uint64_t& payload,
                         const std::function<void(const RangeSet&)>& on_checkpoint) {
  apply_spec(s, spec);
  s.pasv.reset();
  const auto r = s.ctl->command("SPAS");
  if (r.code() != 229) fail_reply(r, "SPAS");
  const auto endpoints = wire::parse_spas_reply(r);
  const auto token = spec.dcau_token ? spec.dcau_token : s.token();
  std::vector<data::ChannelPtr> channels;
  for (const auto& ep : endpoints) {
    const auto target_ep = options_.route ? options_.route(ep) : ep;
    for (std::uint32_t i = 0; i < spec.parallelism; ++i) {
      auto ch = std::make_unique<data::DataChannel>(net::Socket::connect(target_ep, kConnectTimeout, spec.buffer_size),
                                                    wire::kMaxBlockSize);
      if (token) ch->write_preamble(*token);
      ++stats_.data_connects;
      channels.push_back(std::move(ch));
    }
  }
  // Everything outside the gaps is already here; the coordinator skips it.
  RangeSet have;
  have.insert(RangeSet{received});
  if (!have.empty()) {
    const auto rest = s.ctl->command("REST", {wire::render_range_list(have)});
    if (rest.code() != 350) fail_reply(rest, "REST");
  }
  const bool whole = target.start == 0 && !spec.partial;
  const auto cmd = whole ? s.ctl->command("RETR", {url.path})
                         : s.ctl->command("ERET", {"P", std::to_string(target.start),
                                                   std::to_string(target.length()), url.path});
  if (cmd.code() != 150) fail_reply(cmd, "retrieve " + url.path);

  data::TransferProgress progress;
  progress.target = target;
  progress.received = received;
  data::Receiver receiver(progress, sink);
  data::ReceiveOptions ro;
  ro.idle_grace = options_.idle_grace;
  ro.stall_timeout = options_.stall_timeout;
  ro.checkpoint_bytes = options_.checkpoint_bytes;
  ro.checkpoint_interval = options_.checkpoint_interval;
  ro.cancel = options_.cancel;
  ro.on_checkpoint = [&](const data::TransferProgress& p) { on_checkpoint(p.received); };
  data::ReceiveTransfer rt(receiver, ro);
  for (auto& c : channels) rt.add_channel(std::move(c));
  const bool ok = rt.wait();
  received = receiver.snapshot().received;
  payload += receiver.payload_bytes();
  stats_.payload_received += receiver.payload_bytes();
  (void)gaps;

  wire::Reply final_reply(426, "no reply");
  try {
    final_reply = s.ctl->await_final();
  } catch (const std::exception&) {
    s.broken = true;
  }
  if (ok && final_reply.code() == 226) return;
  if (!ok && rt.error()) fail(Errc::DataConflict, *rt.error());
  if (options_.cancel && options_.cancel->load()) fail(Errc::Cancelled, "cancelled");
  fail(Errc::Interrupted, reply_text(final_reply));
}

TransferJob Client::get(const GridUrl& url, const std::string& local_path, data::TransferSpec spec, bool resume) {
  spec.direction = data::Direction::Get;
  spec.validate();
  TransferJob job;
  job.spec = spec;
  job.source = url.to_string();
  job.destination = local_path;
  job.restart_file = data::restart_path_for(local_path);
  job.state = JobState::Running;

  auto s = checkout(url.endpoint());
  std::uint64_t size = 0;
  try {
    size = remote_size(*s->ctl, url);
  } catch (...) {
    checkin(std::move(s));
    throw;
  }
  const ByteRange target{0, size};
  const auto digest = spec_digest("get", job.source, local_path, target);

  RangeSet received;
  bool fresh = true;
  if (resume) {
    std::optional<data::RestartState> st;
    try {
      st = data::load_restart(job.restart_file);
    } catch (const Error&) {
      if (!options_.restart_stale) throw;
    }
    if (st) {
      const bool stale = st->spec_digest != digest || st->remote_size != size || st->direction != "get" ||
                         !std::filesystem::exists(local_path);
      if (stale) {
        if (!options_.restart_stale) {
          checkin(std::move(s));
          fail(Errc::StaleRestart, "restart file does not match " + job.source);
        }
        job.warnings.push_back("stale restart file ignored; retransferring everything");
      } else {
        received = st->received;
        fresh = false;
      }
    }
  } else {
    std::error_code ec;
    std::filesystem::remove(job.restart_file, ec);
  }

  data::File out(local_path, fresh ? data::File::Mode::WriteTruncate : data::File::Mode::Write);
  NoSyncSink nosync(out);
  data::BlockSink& sink = options_.sync_checkpoints ? static_cast<data::BlockSink&>(out) : nosync;
  data::RestartState state{job.source, target, received, digest, "get", local_path, size};
  auto checkpoint = [&](const RangeSet& r) {
    state.received = r;
    data::save_restart(job.restart_file, state);
    if (options_.on_progress) {
      data::TransferProgress p;
      p.target = target;
      p.received = r;
      options_.on_progress(p);
    }
  };

  const bool striped = !spec.stripes.empty();
  while (true) {
    const auto remaining = data::remaining_after(received, target);
    if (remaining.empty()) break;
    ++job.attempts;
    try {
      if (!s) s = checkout(url.endpoint());
      if (striped) {
        get_striped(*s, url, spec, remaining, target, sink, received, job.payload_bytes, checkpoint);
      } else {
        for (const auto& gap : remaining.intervals()) {
          get_once(*s, url, spec, gap, gap == target, sink, received, job.payload_bytes, checkpoint);
        }
      }
    } catch (const Error& e) {
      if (s) s->broken = s->broken || e.code() != Errc::RemoteMissing;
      state.received = received;
      data::save_restart(job.restart_file, state);
      if (fatal(e.code()) || job.attempts > options_.retries) {
        checkin(std::move(s));
        job.state = JobState::Interrupted;
        if (fatal(e.code())) throw;
        fail(Errc::Interrupted, std::string(e.what()) + " (restart file " + job.restart_file + ")");
      }
      job.warnings.push_back(std::string("attempt ") + std::to_string(job.attempts) + " interrupted: " + e.what());
      // A broken control connection cannot be reused; an intact one can.
      if (s && s->broken) s.reset();
    }
  }
  out.sync();
  if (out.size() != size) out.truncate(size);
  job.progress.target = target;
  job.progress.received = received;

  try {
    if (!s) s = checkout(url.endpoint());
    verify_remote(*s, url, local_path, size, spec, job);
  } catch (...) {
    if (s) s->broken = true;
    throw;
  }
  checkin(std::move(s));
  std::error_code ec;
  std::filesystem::remove(job.restart_file, ec);
  job.state = JobState::Complete;
  return job;
}

void Client::verify_remote(Session& s, const GridUrl& url, const std::string& local_path, std::uint64_t size,
                           const data::TransferSpec&, TransferJob& job) {
  const auto remote = remote_size(*s.ctl, url);
  const auto local = std::filesystem::file_size(local_path);
  if (remote != size || local != size) {
    job.state = JobState::Failed;
    fail(Errc::VerifyMismatch, "size mismatch: remote " + std::to_string(remote) + ", local " + std::to_string(local));
  }
  if (!options_.verify) return;
  const auto theirs = remote_checksum(*s.ctl, url, 0, size);
  const auto ours = crypto::to_hex(crypto::file_sha256(local_path, 0, size));
  if (theirs != ours) {
    job.state = JobState::Failed;
    fail(Errc::VerifyMismatch, "checksum mismatch for " + url.to_string());
  }
}

// ---- partial get ----

void Client::partial_get(const GridUrl& url, std::uint64_t offset, std::uint64_t length, data::BlockSink& sink,
                         data::TransferSpec spec) {
  spec.direction = data::Direction::Get;
  spec.partial = data::PartialRange{offset, length};
  spec.validate();
  auto s = checkout(url.endpoint());
  std::uint64_t size = 0;
  try {
    size = remote_size(*s->ctl, url);
  } catch (...) {
    checkin(std::move(s));
    throw;
  }
  if (offset > size || length > size - offset) {
    checkin(std::move(s));
    fail(Errc::RangeError, std::to_string(offset) + "+" + std::to_string(length) + " exceeds size " +
                               std::to_string(size));
  }
  if (length == 0) {
    checkin(std::move(s));
    return;
  }
  const ByteRange target{offset, offset + length};
  ShiftSink shifted(sink, offset);
  RangeSet received;
  std::uint64_t payload = 0;
  int attempts = 0;
  auto noop = [](const RangeSet&) {};
  while (true) {
    const auto remaining = data::remaining_after(received, target);
    if (remaining.empty()) break;
    ++attempts;
    try {
      if (!s) s = checkout(url.endpoint());
      for (const auto& gap : remaining.intervals()) get_once(*s, url, spec, gap, false, shifted, received, payload, noop);
    } catch (const Error& e) {
      if (s) s->broken = true;
      if (fatal(e.code()) || attempts > options_.retries) {
        checkin(std::move(s));
        throw;
      }
      s.reset();
    }
  }
  checkin(std::move(s));
}

std::vector<std::byte> Client::partial_get(const GridUrl& url, std::uint64_t offset, std::uint64_t length,
                                           data::TransferSpec spec) {
  data::MemoryBuffer buf;
  partial_get(url, offset, length, buf, std::move(spec));
  auto bytes = buf.bytes();
  bytes.resize(length);
  return bytes;
}

// ---- put ----

void Client::put_once(Session& s, const GridUrl& url, const data::TransferSpec& spec, ByteRange gap, bool fresh,
                      data::BlockSource& source, RangeSet& received, std::uint64_t& payload,
                      const std::function<void(const RangeSet&)>& on_marker) {
  apply_spec(s, spec);
  data::CacheKey key;
  bool cached = false;
  auto channels = data_channels(s, spec, spec.parallelism, key, cached);
  const auto r = fresh ? s.ctl->command("STOR", {url.path})
                       : s.ctl->command("ESTO", {"A", std::to_string(gap.start), url.path});
  if (r.code() != 150) {
    s.pasv.reset();
    fail_reply(r, "store " + url.path);
  }

  std::mutex mu;
  std::optional<wire::Reply> final_reply;
  std::jthread control([&] {
    try {
      auto fin = s.ctl->await_final([&](const wire::Reply& m) {
        if (m.code() != 111) return;
        ++stats_.markers;
        try {
          const auto marker = wire::parse_range_marker(m.text());
          std::lock_guard lock(mu);
          received.insert(marker);
          on_marker(received);
        } catch (const Error&) {
        }
      });
      std::lock_guard lock(mu);
      final_reply = fin;
    } catch (const std::exception&) {
      std::lock_guard lock(mu);
      s.broken = true;
    }
  });

  std::vector<data::DataChannel*> ptrs;
  for (auto& c : channels) ptrs.push_back(c.get());
  OffsetSource shifted(source, gap.start);
  data::SendOptions so;
  so.cancel = options_.cancel;
  so.on_sent = [&](std::uint64_t n) {
    std::lock_guard lock(mu);
    payload += n;
    stats_.payload_sent += n;
  };
  std::optional<data::SendReport> report;
  std::string send_error;
  try {
    report = data::send_range(ptrs, data::plan_blocks(ByteRange{0, gap.length()}, spec.block_size), shifted, so);
  } catch (const std::exception& e) {
    send_error = e.what();
    for (auto* c : ptrs) c->shutdown();
  }
  control.join();

  if (report && final_reply && final_reply->code() == 226) {
    received.insert(gap);
    std::vector<data::ChannelPtr> keep;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (!report->channels[i].failed) keep.push_back(std::move(channels[i]));
    }
    stash_channels(key, std::move(keep));
    return;
  }
  if (options_.cancel && options_.cancel->load()) fail(Errc::Cancelled, "cancelled");
  if (final_reply && final_reply->code() == 552) fail(Errc::TransferFailed, reply_text(*final_reply));
  fail(Errc::Interrupted, send_error.empty() ? (final_reply ? reply_text(*final_reply) : "control connection lost")
                                             : send_error);
}

TransferJob Client::put(const std::string& local_path, const GridUrl& url, data::TransferSpec spec, bool resume) {
  spec.direction = data::Direction::Put;
  spec.validate();
  TransferJob job;
  job.spec = spec;
  job.source = local_path;
  job.destination = url.to_string();
  job.restart_file = data::restart_path_for(local_path);
  job.state = JobState::Running;

  data::File src(local_path, data::File::Mode::Read);
  const auto size = src.size();
  const ByteRange target{0, size};
  const auto digest = spec_digest("put", job.destination, local_path, target);
  auto s = checkout(url.endpoint());

  RangeSet received;
  if (resume) {
    std::optional<data::RestartState> st;
    try {
      st = data::load_restart(job.restart_file);
    } catch (const Error&) {
      if (!options_.restart_stale) throw;
    }
    if (st) {
      bool stale = st->spec_digest != digest || st->direction != "put";
      if (!stale && !st->received.empty()) {
        try {
          stale = remote_size(*s->ctl, url) < st->received.upper();
        } catch (const Error& e) {
          if (e.code() != Errc::RemoteMissing) throw;
          stale = true;
        }
      }
      if (stale) {
        if (!options_.restart_stale) {
          checkin(std::move(s));
          fail(Errc::StaleRestart, "restart file does not match " + job.destination);
        }
        job.warnings.push_back("stale restart file ignored; retransferring everything");
      } else {
        received = st->received;
      }
    }
  } else {
    std::error_code ec;
    std::filesystem::remove(job.restart_file, ec);
  }

  data::RestartState state{job.destination, target, received, digest, "put", local_path, size};
  auto on_marker = [&](const RangeSet& r) {
    state.received = r;
    data::save_restart(job.restart_file, state);
    if (options_.on_progress) {
      data::TransferProgress p;
      p.target = target;
      p.received = r;
      options_.on_progress(p);
    }
  };

  bool done = false;
  while (!done) {
    auto remaining = data::remaining_after(received, target);
    const bool empty_file = size == 0 && job.attempts == 0 && !resume;
    if (remaining.empty() && !empty_file) break;
    ++job.attempts;
    try {
      if (!s) s = checkout(url.endpoint());
      if (empty_file) {
        put_once(*s, url, spec, ByteRange{0, 0}, true, src, received, job.payload_bytes, on_marker);
        done = true;
      }
      for (const auto& gap : remaining.intervals()) {
        const bool fresh = received.empty() && gap.start == 0;
        put_once(*s, url, spec, gap, fresh, src, received, job.payload_bytes, on_marker);
        on_marker(received);
      }
    } catch (const Error& e) {
      if (s) s->broken = true;
      state.received = received;
      data::save_restart(job.restart_file, state);
      if (fatal(e.code()) || e.code() == Errc::TransferFailed || job.attempts > options_.retries) {
        checkin(std::move(s));
        job.state = JobState::Interrupted;
        if (fatal(e.code()) || e.code() == Errc::TransferFailed) throw;
        fail(Errc::Interrupted, std::string(e.what()) + " (restart file " + job.restart_file + ")");
      }
      job.warnings.push_back(std::string("attempt ") + std::to_string(job.attempts) + " interrupted: " + e.what());
      s.reset();
    }
  }
  job.progress.target = target;
  job.progress.received = received;
  try {
    if (!s) s = checkout(url.endpoint());
    verify_remote(*s, url, local_path, size, spec, job);
  } catch (...) {
    if (s) s->broken = true;
    throw;
  }
  checkin(std::move(s));
  std::error_code ec;
  std::filesystem::remove(job.restart_file, ec);
  job.state = JobState::Complete;
  return job;
}

// ---- third party ----

TransferJob Client::third_party(const GridUrl& src, const GridUrl& dst, data::TransferSpec spec) {
  spec.direction = data::Direction::ThirdParty;
  spec.validate();
  if (src == dst) fail(Errc::SameEndpoint, src.to_string());
  TransferJob job;
  job.spec = spec;
  job.source = src.to_string();
  job.destination = dst.to_string();
  job.state = JobState::Running;

  auto ssrc = checkout(src.endpoint());
  SessionPtr sdst;
  try {
    sdst = checkout(dst.endpoint());
  } catch (...) {
    checkin(std::move(ssrc));
    throw;
  }
  std::uint64_t size = 0;
  try {
    size = remote_size(*ssrc->ctl, src);
  } catch (...) {
    checkin(std::move(ssrc));
    checkin(std::move(sdst));
    throw;
  }
  const ByteRange target{0, size};
  RangeSet received;
  std::mutex mu;

  while (true) {
    const auto remaining = data::remaining_after(received, target);
    if (!remaining.empty() || (size == 0 && job.attempts == 0)) {
      // fall through to an attempt
    } else {
      break;
    }
    ++job.attempts;
    try {
      if (!ssrc) ssrc = checkout(src.endpoint());
      if (!sdst) sdst = checkout(dst.endpoint());
      auto attempt_spec = spec;
      attempt_spec.dcau_token = spec.dcau_token ? spec.dcau_token : crypto::random_bytes(32);
      apply_spec(*ssrc, attempt_spec);
      apply_spec(*sdst, attempt_spec);
      sdst->pasv.reset();
      ssrc->pasv.reset();
      const auto pr = sdst->ctl->command("PASV");
      if (pr.code() != 227) fail_reply(pr, "PASV on destination");
      auto ep = wire::parse_pasv_reply(pr);
      if (options_.route) ep = options_.route(ep);
      const auto port = ssrc->ctl->command("PORT", {wire::render_host_port(ep)});
      if (port.code() != 200) fail_reply(port, "PORT on source");
      if (!received.empty()) {
        const auto list = wire::render_range_list(received);
        for (auto* side : {sdst.get(), ssrc.get()}) {
          const auto rr = side->ctl->command("REST", {list});
          if (rr.code() != 350) fail_reply(rr, "REST");
        }
      }
      const auto sr = sdst->ctl->command("STOR", {dst.path});
      if (sr.code() != 150) fail_reply(sr, "STOR on destination");
      const auto rr = ssrc->ctl->command("RETR", {src.path});
      if (rr.code() != 150) {
        sdst->ctl->send(wire::make_command("ABOR"));
        sdst->ctl->await_final();
        sdst->ctl->await_final();
        fail_reply(rr, "RETR on source");
      }
      std::optional<wire::Reply> dst_final;
      std::jthread watcher([&] {
        try {
          auto fin = sdst->ctl->await_final([&](const wire::Reply& m) {
            if (m.code() != 111) return;
            ++stats_.markers;
            try {
              const auto marker = wire::parse_range_marker(m.text());
              std::lock_guard lock(mu);
              received.insert(marker);
              if (options_.on_progress) {
                data::TransferProgress p;
                p.target = target;
                p.received = received;
                options_.on_progress(p);
              }
            } catch (const Error&) {
            }
          });
          std::lock_guard lock(mu);
          dst_final = fin;
        } catch (const std::exception&) {
          sdst->broken = true;
        }
      });
      wire::Reply src_final(426, "no reply");
      try {
        src_final = ssrc->ctl->await_final();
      } catch (const std::exception&) {
        ssrc->broken = true;
      }
      if (src_final.code() != 226) {
        // The destination cannot complete without its sender.
        try {
          sdst->ctl->send(wire::make_command("ABOR"));
        } catch (const std::exception&) {
          sdst->broken = true;
        }
      }
      watcher.join();
      if (src_final.code() != 226 && dst_final) {
        try {
          sdst->ctl->await_final();  // reply to ABOR
        } catch (const std::exception&) {
          sdst->broken = true;
        }
      }
      if (src_final.code() == 226 && dst_final && dst_final->code() == 226) {
        if (!target.empty()) received.insert(target);
        break;
      }
      fail(Errc::Interrupted, "source " + reply_text(src_final) + "; destination " +
                                  (dst_final ? reply_text(*dst_final) : std::string("no reply")));
    } catch (const Error& e) {
      for (auto* side : {ssrc.get(), sdst.get()}) {
        if (side) side->broken = true;
      }
      if (fatal(e.code()) || job.attempts > options_.retries) {
        checkin(std::move(ssrc));
        checkin(std::move(sdst));
        job.state = JobState::Failed;
        throw;
      }
      job.warnings.push_back(std::string("attempt ") + std::to_string(job.attempts) + " interrupted: " + e.what());
      ssrc.reset();
      sdst.reset();
    }
  }

  job.progress.target = target;
  job.progress.received = received;
  const auto dsize = remote_size(*sdst->ctl, dst);
  if (dsize != size) {
    job.state = JobState::Failed;
    checkin(std::move(ssrc));
    checkin(std::move(sdst));
    fail(Errc::VerifyMismatch, "destination size " + std::to_string(dsize) + " != " + std::to_string(size));
  }
  if (options_.verify && remote_checksum(*ssrc->ctl, src, 0, size) != remote_checksum(*sdst->ctl, dst, 0, size)) {
    job.state = JobState::Failed;
    checkin(std::move(ssrc));
    checkin(std::move(sdst));
    fail(Errc::VerifyMismatch, "checksum mismatch " + job.source + " -> " + job.destination);
  }
  checkin(std::move(ssrc));
  checkin(std::move(sdst));
  job.state = JobState::Complete;
  return job;
}

TransferJob Client::resume(const std::string& restart_file, data::TransferSpec spec) {
  const auto st = data::load_restart(restart_file);
  if (!st) fail(Errc::NotFound, "no restart file " + restart_file);
  if (st->direction == "get") return get(GridUrl::parse(st->url), st->local_path, std::move(spec), true);
  if (st->direction == "put") return put(st->local_path, GridUrl::parse(st->url), std::move(spec), true);
  fail(Errc::StaleRestart, "unknown direction " + st->direction);
}

}  // namespace gftp::client
